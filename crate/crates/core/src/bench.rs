//! Method x problem x noise x seed matrices, performance profiles and their emission.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problems::{Counted, NoisyOracle, ProblemInstance};
use crate::solver::{method_by_name, run_method, Method, SolverError, Status};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("noise level {0} outside [0, 1)")]
    Noise(f64),
    #[error("the matrix needs at least one {0}")]
    Empty(&'static str),
    #[error("no records to profile")]
    NoRecords,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub eps: f64,
    pub max_iter: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            eps: 1e-6,
            max_iter: 100_000,
        }
    }
}

/// Tolerance conventionally used for noisy runs.
pub const NOISY_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub problem: String,
    pub n: usize,
    pub noise: f64,
    pub seed: u64,
    pub status: Status,
    /// Steps taken.
    pub iterations: usize,
    /// Efficiency measure used by the profiles: steps for the function-free methods,
    /// function plus gradient evaluations for the backtracking baseline.
    pub cost: u64,
    pub final_normg: f64,
    pub value_calls: u64,
    pub gradient_calls: u64,
    pub hessian_calls: u64,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.status == Status::Converged
    }
}

/// Runs every `(method, problem, noise, seed)` combination in parallel.
///
/// Records come back sorted by the input order of methods, problems, noise levels and
/// seeds, independent of scheduling. Run failures are statuses, never errors.
pub fn run_matrix(
    methods: &[String],
    problems: &[ProblemInstance],
    noise_levels: &[f64],
    seeds: &[u64],
    cfg: &BenchConfig,
) -> Result<Vec<RunRecord>, BenchError> {
    for (what, empty) in [
        ("method", methods.is_empty()),
        ("problem", problems.is_empty()),
        ("noise level", noise_levels.is_empty()),
        ("seed", seeds.is_empty()),
    ] {
        if empty {
            return Err(BenchError::Empty(what));
        }
    }
    if let Some(bad) = noise_levels.iter().find(|l| !(0.0..1.0).contains(*l)) {
        return Err(BenchError::Noise(*bad));
    }
    let resolved: Vec<Method> = methods
        .iter()
        .map(|m| method_by_name(m))
        .collect::<Result<_, _>>()?;
    let mut jobs = Vec::new();
    for mi in 0..methods.len() {
        for pi in 0..problems.len() {
            for li in 0..noise_levels.len() {
                for &seed in seeds {
                    jobs.push((mi, pi, li, seed));
                }
            }
        }
    }
    let mut out: Vec<((usize, usize, usize, u64), RunRecord)> = jobs
        .into_par_iter()
        .map(|(mi, pi, li, seed)| {
            let rec = run_one(
                &methods[mi],
                &resolved[mi],
                &problems[pi],
                noise_levels[li],
                seed,
                cfg,
            );
            rec.map(|r| ((mi, pi, li, seed), r))
        })
        .collect::<Result<_, _>>()?;
    out.sort_by_key(|(key, _)| *key);
    Ok(out.into_iter().map(|(_, r)| r).collect())
}

fn run_one(
    name: &str,
    method: &Method,
    problem: &ProblemInstance,
    noise: f64,
    seed: u64,
    cfg: &BenchConfig,
) -> Result<RunRecord, BenchError> {
    let mut oracle = Counted::new(NoisyOracle::new(problem.clone(), noise, seed));
    let trace = run_method(method, &mut oracle, &problem.x0, cfg.eps, cfg.max_iter)?;
    let c = oracle.counts;
    let cost = match method {
        Method::Sdba => c.values + c.gradients,
        Method::Astr1 { .. } => trace.iterations as u64,
    };
    Ok(RunRecord {
        method: name.to_string(),
        problem: problem.name.clone(),
        n: problem.n,
        noise,
        seed,
        status: trace.status,
        iterations: trace.iterations,
        cost,
        final_normg: trace.final_normg,
        value_calls: c.values,
        gradient_calls: c.gradients,
        hessian_calls: c.hessians,
    })
}

/// Upper end of the performance-ratio range.
pub const T_MAX: f64 = 50.0;
/// Abscissas at which the profile curves are tabulated.
pub const GRID_POINTS: usize = 197;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub methods: Vec<String>,
    /// Ratios `t` in `[1, 50]` at which `curves` are tabulated.
    pub grid: Vec<f64>,
    /// `curves[m][i] = rho_m(grid[i])`, the fraction of problems solved within `t` times the best.
    pub curves: Vec<Vec<f64>>,
    /// Normalised area under each curve.
    pub pi: Vec<f64>,
    /// Percentage of successful runs.
    pub rho: Vec<f64>,
    pub problems: usize,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub pi: f64,
    pub rho: f64,
}

impl ProfileReport {
    /// `(method, pi, rho)` sorted by decreasing `pi` (then `rho`, then name).
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut rows: Vec<AggregateRow> = self
            .methods
            .iter()
            .enumerate()
            .map(|(i, m)| AggregateRow {
                method: m.clone(),
                pi: self.pi[i],
                rho: self.rho[i],
            })
            .collect();
        rows.sort_by(|a, b| {
            b.pi.total_cmp(&a.pi)
                .then(b.rho.total_cmp(&a.rho))
                .then(a.method.cmp(&b.method))
        });
        rows
    }

    pub fn method_index(&self, name: &str) -> Option<usize> {
        self.methods.iter().position(|m| m == name)
    }
}

/// Performance profile on cost, from records sharing one noise level.
///
/// With several seeds one profile is built per seed and `pi`, `rho` and the curves are
/// averaged. Problems no method solves stay in the denominator. The area is
/// `(rho(1) + int_1^50 rho(t) dt) / 50`, so a method that is always best scores exactly 1.
pub fn perf_profile(records: &[RunRecord]) -> Result<ProfileReport, BenchError> {
    if records.is_empty() {
        return Err(BenchError::NoRecords);
    }
    let mut methods: Vec<String> = Vec::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut by_seed: BTreeMap<u64, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        by_seed.entry(r.seed).or_default().push(r);
    }
    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| 1.0 + (T_MAX - 1.0) * i as f64 / (GRID_POINTS - 1) as f64)
        .collect();
    let m = methods.len();
    let mut curves = vec![vec![0.0; grid.len()]; m];
    let mut pi = vec![0.0; m];
    let mut successes = vec![0usize; m];
    let mut total_problems = 0usize;
    let mut problems = 0;
    for recs in by_seed.values() {
        // ratios[problem][method]
        let mut table: BTreeMap<(&str, usize), Vec<Option<u64>>> = BTreeMap::new();
        for r in recs {
            let mi = methods
                .iter()
                .position(|x| *x == r.method)
                .expect("collected above");
            let row = table
                .entry((&r.problem, r.n))
                .or_insert_with(|| vec![None; m]);
            row[mi] = r.succeeded().then_some(r.cost);
        }
        let np = table.len();
        problems = problems.max(np);
        total_problems += np;
        let mut ratios: Vec<Vec<f64>> = vec![Vec::with_capacity(np); m];
        for row in table.values() {
            let best = row.iter().flatten().min().copied();
            for mi in 0..m {
                let r = match (row[mi], best) {
                    (Some(c), Some(b)) => c.max(1) as f64 / b.max(1) as f64,
                    _ => f64::INFINITY,
                };
                if r.is_finite() {
                    successes[mi] += 1;
                }
                ratios[mi].push(r);
            }
        }
        for mi in 0..m {
            let within = |t: f64| ratios[mi].iter().filter(|r| **r <= t).count() as f64 / np as f64;
            for (gi, t) in grid.iter().enumerate() {
                curves[mi][gi] += within(*t);
            }
            let area: f64 = ratios[mi]
                .iter()
                .filter(|r| **r <= T_MAX)
                .map(|r| {
                    if *r <= 1.0 {
                        1.0 + T_MAX - r
                    } else {
                        T_MAX - r
                    }
                })
                .sum();
            pi[mi] += area / (T_MAX * np as f64);
        }
    }
    let seeds = by_seed.len();
    for mi in 0..m {
        pi[mi] /= seeds as f64;
        curves[mi].iter_mut().for_each(|v| *v /= seeds as f64);
    }
    let rho = successes
        .iter()
        .map(|s| 100.0 * *s as f64 / total_problems as f64)
        .collect();
    Ok(ProfileReport {
        methods,
        grid,
        curves,
        pi,
        rho,
        problems,
        seeds,
    })
}

/// Splits records by noise level (ascending) and profiles each group.
pub fn profiles_by_noise(records: &[RunRecord]) -> Result<Vec<(f64, ProfileReport)>, BenchError> {
    let mut levels: Vec<f64> = records.iter().map(|r| r.noise).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    levels
        .into_iter()
        .map(|l| {
            let subset: Vec<RunRecord> = records.iter().filter(|r| r.noise == l).cloned().collect();
            perf_profile(&subset).map(|p| (l, p))
        })
        .collect()
}

/// Six significant digits.
pub fn fmt6(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0.00000".into();
    }
    let mag = v.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        format!("{:.*}", (5 - mag) as usize, v)
    } else {
        format!("{v:.5e}")
    }
}

pub fn write_records_csv<W: Write>(mut w: W, records: &[RunRecord]) -> io::Result<()> {
    writeln!(
        w,
        "method,problem,n,noise,seed,status,iterations,cost,final_normg,value_calls,gradient_calls,hessian_calls"
    )?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.problem,
            r.n,
            fmt6(r.noise),
            r.seed,
            r.status,
            r.iterations,
            r.cost,
            fmt6(r.final_normg),
            r.value_calls,
            r.gradient_calls,
            r.hessian_calls
        )?;
    }
    Ok(())
}

/// Long format: `noise,method,t,rho`.
pub fn write_profile_csv<W: Write>(mut w: W, profiles: &[(f64, ProfileReport)]) -> io::Result<()> {
    writeln!(w, "noise,method,t,rho")?;
    for (noise, p) in profiles {
        for (mi, m) in p.methods.iter().enumerate() {
            for (t, v) in p.grid.iter().zip(&p.curves[mi]) {
                writeln!(w, "{},{},{},{}", fmt6(*noise), m, fmt6(*t), fmt6(*v))?;
            }
        }
    }
    Ok(())
}

/// `method,pi,rho`, best first.
pub fn write_aggregate_csv<W: Write>(mut w: W, report: &ProfileReport) -> io::Result<()> {
    writeln!(w, "method,pi,rho")?;
    for row in report.aggregate() {
        writeln!(w, "{},{},{}", row.method, fmt6(row.pi), fmt6(row.rho))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// Everything one benchmark produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub records: Vec<RunRecord>,
    pub profiles: Vec<(f64, ProfileReport)>,
}

impl BenchReport {
    pub fn new(config: BenchConfig, records: Vec<RunRecord>) -> Result<Self, BenchError> {
        let profiles = profiles_by_noise(&records)?;
        Ok(BenchReport {
            config,
            records,
            profiles,
        })
    }
}

/// Writes `records.csv`, `profile.csv` and the aggregate tables (one per noise level,
/// `aggregate.csv` or `aggregate_noise<level>.csv`), or `report.json`.
pub fn emit(report: &BenchReport, dir: &Path, format: Format) -> Result<(), BenchError> {
    fs::create_dir_all(dir)?;
    match format {
        Format::Json => {
            let f = io::BufWriter::new(fs::File::create(dir.join("report.json"))?);
            serde_json::to_writer_pretty(f, report)?;
        }
        Format::Csv => {
            write_records_csv(
                io::BufWriter::new(fs::File::create(dir.join("records.csv"))?),
                &report.records,
            )?;
            write_profile_csv(
                io::BufWriter::new(fs::File::create(dir.join("profile.csv"))?),
                &report.profiles,
            )?;
            let single = report.profiles.len() == 1;
            for (noise, p) in &report.profiles {
                let name = if single {
                    "aggregate.csv".to_string()
                } else {
                    format!("aggregate_noise{noise}.csv")
                };
                write_aggregate_csv(io::BufWriter::new(fs::File::create(dir.join(name))?), p)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, problem: &str, seed: u64, status: Status, cost: u64) -> RunRecord {
        RunRecord {
            method: method.into(),
            problem: problem.into(),
            n: 2,
            noise: 0.0,
            seed,
            status,
            iterations: cost as usize,
            cost,
            final_normg: 0.0,
            value_calls: 0,
            gradient_calls: cost,
            hessian_calls: 0,
        }
    }

    #[test]
    fn two_method_profile() {
        let mut rs = Vec::new();
        for (i, p) in ["a", "b", "c"].iter().enumerate() {
            let c = 10 * (i as u64 + 1);
            rs.push(rec("A", p, 0, Status::Converged, c));
            rs.push(rec("B", p, 0, Status::Converged, 2 * c));
        }
        let r = perf_profile(&rs).unwrap();
        assert_eq!(r.pi[0], 1.0);
        assert!((r.pi[1] - 0.96).abs() < 1e-12);
        assert_eq!(r.rho, vec![100.0, 100.0]);
        assert_eq!(r.aggregate()[0].method, "A");
    }

    #[test]
    fn failing_method_scores_zero() {
        let rs = vec![
            rec("A", "a", 0, Status::Converged, 5),
            rec("F", "a", 0, Status::MaxIter, 5),
            rec("A", "b", 0, Status::MaxIter, 5),
            rec("F", "b", 0, Status::Overflow, 5),
        ];
        let r = perf_profile(&rs).unwrap();
        assert_eq!((r.pi[1], r.rho[1]), (0.0, 0.0));
        assert_eq!(r.rho[0], 50.0);
        assert!(r.pi[0] <= r.rho[0] / 100.0);
        assert!(matches!(perf_profile(&[]), Err(BenchError::NoRecords)));
    }

    #[test]
    fn formatting() {
        assert_eq!(fmt6(0.96), "0.960000");
        assert_eq!(fmt6(100.0), "100.000");
        assert_eq!(fmt6(1.0), "1.00000");
        assert_eq!(fmt6(1.234567e-7), "1.23457e-7");
        assert_eq!(fmt6(0.0), "0.00000");
    }
}
