use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use offo::bench::{emit, fmt6, run_matrix, BenchConfig, BenchReport, Format};
use offo::problems::{default_suite, make_problem, Counted, Family, NoisyOracle, ProblemInstance};
use offo::sharpness::{admissibility, build_sequence, hermite_build, replay, SharpKind};
use offo::solver::{method_by_name, run_method, Geometry, IterationTrace, Method, StepDetail};
use offo::verify::{run_suite, SUITES};

#[derive(Parser)]
#[command(
    name = "offo",
    version,
    about = "Objective-function-free adaptive trust-region methods"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method on one problem.
    Run(RunArgs),
    /// Numerical verification suites.
    Verify {
        /// Suites to run (default: all).
        #[arg(long, value_delimiter = ',')]
        suite: Vec<String>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Method x problem x noise x seed benchmark with performance profiles.
    Bench(BenchArgs),
    /// Build, interpolate and replay a worst-case sequence.
    Sharpness(SharpArgs),
    /// List the problem catalog, or describe one problem.
    Problem {
        name: Option<String>,
        #[arg(long)]
        n: Option<usize>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, default_value = "adagrad")]
    method: String,
    #[arg(long)]
    problem: String,
    /// Dimension (family default when omitted).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iter: usize,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    kappa_b: Option<f64>,
    /// Override the method's trust-region geometry.
    #[arg(long)]
    geometry: Option<String>,
    /// Record f(x_k) (extra objective calls, never used by the iteration).
    #[arg(long)]
    instrument_f: bool,
    /// Per-iteration CSV: k,normg,f,delta_min,delta_max,gamma,status.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "adagrad,adagnorm,maxg,sdba"
    )]
    methods: Vec<String>,
    /// `all`, or a comma list of `name` / `name:n`.
    #[arg(long, default_value = "all")]
    problems: String,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    noise: Vec<f64>,
    /// Number of seeds (0, 1, ..., seeds - 1).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, default_value_t = 100_000)]
    max_iter: usize,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = OutFormat::Csv)]
    format: OutFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Thm31,
    Thm41,
}

#[derive(clap::Args)]
struct SharpArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long, default_value_t = 0.5)]
    mu: f64,
    #[arg(long, default_value_t = 0.01)]
    eta: f64,
    #[arg(long, default_value_t = 1.0 / 9.0)]
    nu: f64,
    /// Defaults to (1 - nu)/2 + 1/100.
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    #[arg(long, default_value_t = 10_000)]
    iters: usize,
    /// CSV with k,x,f,g.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(a) => cmd_run(a),
        Command::Verify { suite, report } => cmd_verify(suite, report),
        Command::Bench(a) => cmd_bench(a),
        Command::Sharpness(a) => cmd_sharpness(a),
        Command::Problem { name, n } => cmd_problem(name, n),
    }
}

fn problem(name: &str, n: Option<usize>) -> Result<ProblemInstance> {
    let fam: Family = name.parse()?;
    Ok(make_problem(name, n.unwrap_or(fam.default_dim()))?)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let p = problem(&a.problem, a.n)?;
    if !(0.0..1.0).contains(&a.noise) {
        bail!("noise must lie in [0, 1)");
    }
    let method = method_by_name(&a.method)?;
    let mut oracle = Counted::new(NoisyOracle::new(p.clone(), a.noise, a.seed));
    let trace = match method.config(a.eps, a.max_iter) {
        Some(mut cfg) => {
            if let Some(t) = a.tau {
                cfg.tau = t;
            }
            if let Some(k) = a.kappa_b {
                cfg.kappa_b = k;
            }
            if let Some(g) = &a.geometry {
                cfg.geometry = g.parse::<Geometry>()?;
            }
            cfg.instrument_f = a.instrument_f;
            offo::solver::astr1_run(&mut oracle, &p.x0, &cfg)?
        }
        None => run_method(&Method::Sdba, &mut oracle, &p.x0, a.eps, a.max_iter)?,
    };
    if let Some(path) = &a.trace {
        write_trace(path, &trace)?;
    }
    let summary = serde_json::json!({
        "method": a.method,
        "problem": p.name,
        "n": p.n,
        "noise": a.noise,
        "seed": a.seed,
        "status": trace.status,
        "iterations": trace.iterations,
        "final_normg": trace.final_normg,
        "final_f": trace.final_f,
        "value_calls": oracle.counts.values,
        "gradient_calls": oracle.counts.gradients,
        "hessian_calls": oracle.counts.hessians,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn write_trace(path: &PathBuf, trace: &IterationTrace) -> Result<()> {
    let mut w = BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(w, "k,normg,f,delta_min,delta_max,gamma,status")?;
    let opt = |v: Option<f64>| v.map(fmt6).unwrap_or_default();
    for r in &trace.records {
        let (dmin, dmax, gamma) = match r.detail {
            StepDetail::TrustRegion {
                delta_min,
                delta_max,
                gamma,
                ..
            } => (Some(delta_min), Some(delta_max), Some(gamma)),
            // the baseline's step length stands in for gamma
            StepDetail::LineSearch { alpha, .. } => (None, None, Some(alpha)),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},running",
            r.k,
            fmt6(r.normg),
            opt(r.f),
            opt(dmin),
            opt(dmax),
            opt(gamma)
        )?;
    }
    writeln!(
        w,
        "{},{},{},,,,{}",
        trace.iterations,
        fmt6(trace.final_normg),
        opt(trace.final_f),
        trace.status
    )?;
    Ok(())
}

fn cmd_verify(suites: Vec<String>, report: Option<PathBuf>) -> Result<()> {
    let names: Vec<String> = if suites.is_empty() || suites.iter().any(|s| s == "all") {
        SUITES.iter().map(|s| s.to_string()).collect()
    } else {
        suites
    };
    let mut reports = Vec::new();
    for s in &names {
        let r = run_suite(s)
            .with_context(|| format!("unknown suite `{s}` (known: {})", SUITES.join(", ")))?;
        eprintln!(
            "{:<9} {} ({} checks, {} failures)",
            r.suite,
            if r.passed { "pass" } else { "FAIL" },
            r.checks,
            r.failures
        );
        reports.push(r);
    }
    let json = serde_json::to_string_pretty(&reports)?;
    match report {
        Some(path) => {
            fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?
        }
        None => println!("{json}"),
    }
    if reports.iter().any(|r| !r.passed) {
        bail!("verification failed");
    }
    Ok(())
}

fn parse_problems(list: &str) -> Result<Vec<ProblemInstance>> {
    if list == "all" {
        return Ok(default_suite());
    }
    list.split(',')
        .map(|item| match item.split_once(':') {
            Some((name, n)) => problem(
                name,
                Some(
                    n.parse()
                        .with_context(|| format!("bad dimension in `{item}`"))?,
                ),
            ),
            None => problem(item, None),
        })
        .collect()
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let problems = parse_problems(&a.problems)?;
    let noisy = a.noise.iter().any(|l| *l > 0.0);
    let eps = a
        .eps
        .unwrap_or(if noisy { offo::bench::NOISY_EPS } else { 1e-6 });
    let cfg = BenchConfig {
        eps,
        max_iter: a.max_iter,
    };
    let seeds: Vec<u64> = (0..a.seeds.max(1)).collect();
    let records = run_matrix(&a.methods, &problems, &a.noise, &seeds, &cfg)?;
    let report = BenchReport::new(cfg, records)?;
    if matches!(a.format, OutFormat::Csv | OutFormat::Both) {
        emit(&report, &a.out, Format::Csv)?;
    }
    if matches!(a.format, OutFormat::Json | OutFormat::Both) {
        emit(&report, &a.out, Format::Json)?;
    }
    for (noise, p) in &report.profiles {
        println!("noise {}", fmt6(*noise));
        println!("method,pi,rho");
        for row in p.aggregate() {
            println!("{},{},{}", row.method, fmt6(row.pi), fmt6(row.rho));
        }
    }
    Ok(())
}

fn cmd_sharpness(a: SharpArgs) -> Result<()> {
    let kind = match a.kind {
        Kind::Thm31 => SharpKind::Thm31 {
            mu: a.mu,
            eta: a.eta,
            sigma: a.sigma,
        },
        Kind::Thm41 => SharpKind::Thm41 {
            nu: a.nu,
            omega: a.omega.unwrap_or((1.0 - a.nu) / 2.0 + 0.01),
            sigma: a.sigma,
        },
    };
    let seq = build_sequence(kind, a.iters)?;
    let adm = admissibility(&seq);
    let interp = hermite_build(&seq)?;
    let rep = replay(&seq, &interp)?;
    if let Some(path) = &a.out {
        let mut w = BufWriter::new(
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        );
        writeln!(w, "k,x,f,g")?;
        for k in 0..=seq.iters {
            writeln!(w, "{},{:e},{:e},{:e}", k, seq.x[k], seq.f[k], seq.g[k])?;
        }
    }
    let summary = serde_json::json!({
        "kind": kind,
        "iters": seq.iters,
        "f0": seq.f0,
        "kappa_f": seq.kappa_f,
        "admissibility": adm,
        "max_iterate_deviation": rep.max_iterate_deviation,
        "max_decay_deviation": rep.max_decay_deviation,
        "first_divergent": rep.first_divergent,
        "replay_matches": rep.matches(1e-8),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if !rep.matches(1e-8) {
        bail!("replay diverged from the prescribed sequence");
    }
    Ok(())
}

fn cmd_problem(name: Option<String>, n: Option<usize>) -> Result<()> {
    match name {
        None => {
            println!("name,default_n,quadratic");
            for f in Family::ALL {
                println!("{},{},{}", f.name(), f.default_dim(), f.is_quadratic());
            }
        }
        Some(name) => {
            let p = problem(&name, n)?;
            let f0 = p.value(&p.x0)?;
            let g0 = p.gradient(&p.x0)?;
            let info = serde_json::json!({
                "name": p.name,
                "n": p.n,
                "f_x0": f0,
                "normg_x0": g0.iter().map(|v| v * v).sum::<f64>().sqrt(),
                "f_low": p.f_low,
                "lipschitz": p.lipschitz_hint,
                "x0": p.x0,
            });
            println!("{}", serde_json::to_string_pretty(&info)?);
        }
    }
    Ok(())
}
