//! Ready-made numerical verification suites built from the `theory` checks.

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::ModelKind;
use crate::problems::{make_problem, ProblemInstance};
use crate::scaling::{ScalingRule, Theta};
use crate::solver::{astr1_run, Astr1Config, Geometry};
use crate::theory::{
    decrease_check, envelope_check, kappa_constants, lambert_w_m1, lambert_w_m1_exp, ming_check,
    series_bound, TheoryParams,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub checks: usize,
    pub failures: usize,
    pub metrics: BTreeMap<String, f64>,
    pub notes: Vec<String>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        SuiteReport {
            suite: suite.into(),
            passed: true,
            checks: 0,
            failures: 0,
            metrics: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures += 1;
            self.passed = false;
            if self.notes.len() < 20 {
                self.notes.push(what());
            }
        }
    }

    fn worst(&mut self, key: &str, v: f64) {
        let e = self.metrics.entry(key.into()).or_insert(f64::NEG_INFINITY);
        *e = e.max(v);
    }
}

pub const SUITES: [&str; 5] = ["series", "lambert", "envelope", "decrease", "ming"];

pub fn run_suite(name: &str) -> Option<SuiteReport> {
    Some(match name {
        "series" => series_suite(1000, 7),
        "lambert" => lambert_suite(1000),
        "envelope" => envelope_suite(),
        "decrease" => decrease_suite(),
        "ming" => ming_suite(),
        _ => return None,
    })
}

/// Random non-negative sequences (up to 40 terms, magnitudes spread over six decades)
/// for every exponent, plus continuity of the bound at `alpha = 1`.
pub fn series_suite(cases: usize, seed: u64) -> SuiteReport {
    let mut rep = SuiteReport::new("series");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let len = rng.random_range(1..=40);
        let a: Vec<f64> = (0..len)
            .map(|_| {
                if rng.random_range(0.0..1.0) < 0.1 {
                    0.0
                } else {
                    10f64.powf(rng.random_range(-3.0..3.0))
                }
            })
            .collect();
        let xi = 10f64.powf(rng.random_range(-2.0..2.0));
        for alpha in [0.3, 0.7, 1.0, 1.3, 1.7, 2.0] {
            let b = series_bound(&a, xi, alpha).expect("valid inputs");
            rep.worst(
                "max_lhs_over_rhs",
                if b.rhs > 0.0 { b.lhs / b.rhs } else { 0.0 },
            );
            rep.check(b.holds(), || format!("case {case}, alpha {alpha}: {b:?}"));
        }
        let mid = series_bound(&a, xi, 1.0).expect("valid").rhs;
        for alpha in [1.0 - 1e-6, 1.0 + 1e-6] {
            let r = series_bound(&a, xi, alpha).expect("valid").rhs;
            let rel = if mid > 0.0 {
                (r - mid).abs() / mid
            } else {
                (r - mid).abs()
            };
            rep.worst("max_continuity_gap", rel);
            rep.check(rel <= 1e-4, || {
                format!("case {case}: continuity gap {rel:e}")
            });
        }
    }
    rep
}

/// Residuals on a grid over `[-1/e + 1e-9, -1e-12]`, the branch point, and the bound
/// `|W(-exp(-x-1))| <= 1 + sqrt(2x) + x` on a log grid.
pub fn lambert_suite(points: usize) -> SuiteReport {
    let mut rep = SuiteReport::new("lambert");
    let lo = -(-1.0f64).exp() + 1e-9;
    let hi = -1e-12;
    // half linear (dense near the branch point), half logarithmic (dense near zero)
    let half = points / 2;
    let mut xs: Vec<f64> = (0..half)
        .map(|i| lo + (hi - lo) * i as f64 / (half - 1) as f64)
        .collect();
    let (a, b) = ((-hi).log10(), (-lo).log10());
    xs.extend((0..points - half).map(|i| {
        let t = i as f64 / (points - half - 1) as f64;
        -(10f64.powf(a + t * (b - a)))
    }));
    for x in xs {
        let w = lambert_w_m1(x).expect("in domain");
        let res = (w * w.exp() - x).abs() / x.abs();
        rep.worst("max_rel_residual", res);
        rep.check(res <= 1e-12 && w <= -1.0, || {
            format!("x = {x:e}: w = {w}, residual {res:e}")
        });
    }
    let w = lambert_w_m1(-(-1.0f64).exp()).expect("branch point");
    rep.check((w + 1.0).abs() <= 1e-8, || format!("W(-1/e) = {w}"));
    for i in 0..=120 {
        let x = 10f64.powf(-3.0 + 6.0 * i as f64 / 120.0);
        let w = lambert_w_m1_exp(-x - 1.0).expect("in domain");
        let bound = 1.0 + (2.0 * x).sqrt() + x;
        rep.worst("max_w_over_bound", w.abs() / bound);
        rep.check(w.abs() <= bound, || {
            format!("x = {x:e}: |W| = {} > {bound}", w.abs())
        });
    }
    rep
}

/// Quadratic catalog problems, where the Lipschitz constant is exact.
pub fn exact_l_problems() -> Vec<ProblemInstance> {
    [
        ("tridia", 10),
        ("tridia", 30),
        ("booth", 2),
        ("arglina", 10),
        ("arglina", 20),
    ]
    .iter()
    .map(|(name, n)| make_problem(name, *n).expect("catalog problem"))
    .collect()
}

/// Adagrad with `B = 0`; any `kappa_B >= 1` bounds the zero model, 1 gives the tightest constant.
pub fn adagrad_config() -> Astr1Config {
    Astr1Config {
        kappa_b: 1.0,
        instrument_f: true,
        ..Astr1Config::default()
    }
}

/// `sum_{j<=k} ||g_j||^2 <= kappa_2` along adagrad runs on the exact-L problems.
pub fn envelope_suite() -> SuiteReport {
    let mut rep = SuiteReport::new("envelope");
    let cfg = adagrad_config();
    for p in exact_l_problems() {
        let params = TheoryParams::for_run(&p, &cfg).expect("finite start");
        let kappa = kappa_constants(&params, 0.5).expect("exact L");
        let mut oracle = p.clone();
        let trace = astr1_run(&mut oracle, &p.x0, &cfg).expect("valid config");
        let env = envelope_check(&trace, kappa);
        rep.worst("max_ratio", env.max_ratio);
        rep.metrics
            .insert(format!("{}{}_kappa2", p.name, p.n), kappa);
        rep.check(env.holds(), || {
            format!("{}({}): ratio {}", p.name, p.n, env.max_ratio)
        });
    }
    rep
}

/// Configurations whose per-iteration decrease is checked: four scalings with `B = 0`
/// and the exact Hessian with `kappa_B = max(1, L)`.
pub fn decrease_configs(l: f64) -> Vec<(&'static str, Astr1Config)> {
    let base = adagrad_config();
    vec![
        ("adagrad", base.clone()),
        (
            "adam",
            Astr1Config {
                scaling: ScalingRule::adam(),
                ..base.clone()
            },
        ),
        (
            "maxg",
            Astr1Config {
                scaling: ScalingRule::maxg(),
                ..base.clone()
            },
        ),
        (
            "adagnorm",
            Astr1Config {
                scaling: ScalingRule::adagrad().with_aggregated(true),
                geometry: Geometry::Ball,
                ..base.clone()
            },
        ),
        (
            "adagH",
            Astr1Config {
                model: ModelKind::Exact,
                kappa_b: l.max(1.0),
                ..base
            },
        ),
    ]
}

pub fn decrease_suite() -> SuiteReport {
    let mut rep = SuiteReport::new("decrease");
    for p in exact_l_problems() {
        let l = p.lipschitz_hint.expect("quadratics carry L").value;
        for (name, cfg) in decrease_configs(l) {
            let cfg = Astr1Config {
                max_iter: 20_000,
                ..cfg
            };
            let params = TheoryParams::for_run(&p, &cfg).expect("finite start");
            let mut oracle = p.clone();
            let trace = astr1_run(&mut oracle, &p.x0, &cfg).expect("valid config");
            let d = decrease_check(&trace, &params).expect("instrumented");
            rep.worst("max_violation", d.max_violation);
            rep.check(d.max_violation <= 1e-8, || {
                format!(
                    "{}({}) {name}: violation {:e}",
                    p.name, p.n, d.max_violation
                )
            });
        }
    }
    rep
}

/// Threshold past which the diminishing-rule bracket exceeds `eta`: once for the default
/// rule (astronomical, vacuous) and once for a rule with a small, testable threshold.
pub fn ming_suite() -> SuiteReport {
    let mut rep = SuiteReport::new("ming");
    let p = make_problem("booth", 2).expect("catalog");
    let default = Astr1Config {
        scaling: ScalingRule::maxg(),
        kappa_b: 1.0,
        ..Astr1Config::default()
    };
    let steep = Astr1Config {
        scaling: ScalingRule::maxg()
            .with_mu(0.5)
            .with_nu(0.5)
            .with_sigma(1.0)
            .with_theta(Theta::Fixed(100.0)),
        tau: 1.0,
        kappa_b: 1.0,
        ..Astr1Config::default()
    };
    for (label, cfg) in [("default", default), ("steep", steep)] {
        let params = TheoryParams::for_run(&p, &cfg).expect("finite start");
        let eta = 0.5 * params.tau * params.sigma;
        let mut oracle = p.clone();
        let trace = astr1_run(&mut oracle, &p.x0, &cfg).expect("valid config");
        let r = ming_check(&trace, &params, eta, cfg.scaling.nu).expect("eta in range");
        rep.metrics.insert(format!("{label}_j_eta"), r.j_eta);
        rep.metrics
            .insert(format!("{label}_checked"), r.checked as f64);
        if r.vacuous {
            rep.notes.push(format!(
                "{label}: j_eta = {:e} exceeds the run length; holds vacuously",
                r.j_eta
            ));
        }
        rep.check(r.holds(), || {
            format!("{label}: bracket {:?} <= eta {eta}", r.min_bracket)
        });
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_suites_pass() {
        for rep in [series_suite(50, 1), lambert_suite(200), ming_suite()] {
            assert!(rep.passed, "{rep:?}");
        }
        assert!(run_suite("nope").is_none());
    }
}
