//! One-dimensional worst-case instances: prescribed gradient sequences that the
//! method reproduces exactly, realised as C^1 piecewise-cubic Hermite functions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelKind;
use crate::problems::{Oracle, ProblemError};
use crate::scaling::{ScalingRule, ScalingState};
use crate::solver::{astr1_run, Astr1Config, Geometry, IterationTrace, SolverError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SharpError {
    #[error("parameter {name} = {value} outside {range}")]
    Parameter {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("Hermite data not admissible at k = {k} ({condition})")]
    Inadmissible { k: usize, condition: &'static str },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

fn param(name: &'static str, value: f64, ok: bool, range: &'static str) -> Result<(), SharpError> {
    if ok {
        Ok(())
    } else {
        Err(SharpError::Parameter { name, value, range })
    }
}

/// Riemann zeta for real `s > 1`: 20 direct terms plus an Euler-Maclaurin tail.
pub fn riemann_zeta(s: f64) -> Result<f64, SharpError> {
    param("s", s, s > 1.0 && s.is_finite(), "(1, inf)")?;
    const N: usize = 20;
    // B_2, B_4, ..., B_16 divided by (2j)!
    const B_OVER_FACT: [f64; 8] = [
        1.0 / 12.0,
        -1.0 / 720.0,
        1.0 / 30240.0,
        -1.0 / 1209600.0,
        1.0 / 47900160.0,
        -691.0 / 1307674368000.0,
        1.0 / 74724249600.0,
        -3617.0 / 10670622842880000.0,
    ];
    let n = N as f64;
    let mut sum: f64 = (1..N).rev().map(|k| (k as f64).powf(-s)).sum();
    sum += n.powf(1.0 - s) / (s - 1.0) + 0.5 * n.powf(-s);
    // rising factorial s (s+1) ... (s+2j-2) times N^(-s-2j+1)
    let mut rising = s;
    let mut npow = n.powf(-s - 1.0);
    for (j, c) in B_OVER_FACT.iter().enumerate() {
        sum += c * rising * npow;
        let m = 2.0 * j as f64;
        rising *= (s + m + 1.0) * (s + m + 2.0);
        npow /= n * n;
    }
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SharpKind {
    /// Adagrad-like weights: `g_0 = -2`, `g_k = -k^-(1/2 + eta)`.
    Thm31 { mu: f64, eta: f64, sigma: f64 },
    /// Diminishing weights `(k+1)^nu`: `g_k = -(k+1)^-omega`.
    Thm41 { nu: f64, omega: f64, sigma: f64 },
}

impl SharpKind {
    pub fn validate(&self) -> Result<(), SharpError> {
        match *self {
            SharpKind::Thm31 { mu, eta, sigma } => {
                param("mu", mu, mu > 0.0 && mu < 1.0, "(0, 1)")?;
                param("eta", eta, eta > 0.0 && eta <= 1.0, "(0, 1]")?;
                param("sigma", sigma, sigma > 0.0 && sigma <= 1.0, "(0, 1]")
            }
            SharpKind::Thm41 { nu, omega, sigma } => {
                param("nu", nu, nu > 0.0 && nu < 1.0, "(0, 1)")?;
                param(
                    "omega",
                    omega,
                    omega > (1.0 - nu) / 2.0 && omega.is_finite(),
                    "((1-nu)/2, inf)",
                )?;
                param("sigma", sigma, sigma > 0.0 && sigma <= 1.0, "(0, 1]")
            }
        }
    }

    /// Scaling rule the method must use for the sequence to be its iterates.
    pub fn scaling_rule(&self) -> ScalingRule {
        match *self {
            SharpKind::Thm31 { mu, sigma, .. } => {
                ScalingRule::adagrad().with_mu(mu).with_sigma(sigma)
            }
            SharpKind::Thm41 { nu, sigma, .. } => ScalingRule::maxg()
                .with_mu(nu)
                .with_nu(nu)
                .with_sigma(sigma),
        }
    }

    /// Prescribed gradient at iteration `k`.
    pub fn gradient(&self, k: usize) -> f64 {
        match *self {
            SharpKind::Thm31 { eta, .. } => {
                if k == 0 {
                    -2.0
                } else {
                    -(k as f64).powf(-(0.5 + eta))
                }
            }
            SharpKind::Thm41 { omega, .. } => -((k + 1) as f64).powf(-omega),
        }
    }

    /// `||g_k||` times the decay rate; identically one for `k >= 1` (Thm31) or `k >= 0` (Thm41).
    pub fn normalised(&self, k: usize, gnorm: f64) -> f64 {
        match *self {
            SharpKind::Thm31 { eta, .. } => gnorm * (k as f64).powf(0.5 + eta),
            SharpKind::Thm41 { omega, .. } => gnorm * ((k + 1) as f64).powf(omega),
        }
    }
}

/// Prescribed iterates `x_0 = 0, ..., x_K` with their gradients, steps, weights and values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpSequence {
    pub kind: SharpKind,
    pub iters: usize,
    /// `g_0 .. g_K`.
    pub g: Vec<f64>,
    /// `s_0 .. s_{K-1}`.
    pub s: Vec<f64>,
    /// `w_0 .. w_{K-1}`.
    pub w: Vec<f64>,
    /// `x_0 .. x_K`.
    pub x: Vec<f64>,
    /// `f_0 .. f_K`.
    pub f: Vec<f64>,
    pub f0: f64,
    pub kappa_f: f64,
}

/// Builds the first `iters` steps of a worst-case sequence.
pub fn build_sequence(kind: SharpKind, iters: usize) -> Result<SharpSequence, SharpError> {
    kind.validate()?;
    param("iters", iters as f64, iters >= 1, "[1, inf)")?;
    let (f0, kappa_f) = match kind {
        SharpKind::Thm31 { mu, eta, sigma } => {
            let f0 = 4.0 / (sigma + 4.0).powf(mu) + riemann_zeta(1.0 + 2.0 * eta)?;
            (f0, (1.5 * (sigma + 5.0).powf(mu)).max(f0).max(2.0))
        }
        SharpKind::Thm41 { nu, omega, .. } => {
            let f0 = riemann_zeta(2.0 * omega + nu)?;
            (f0, omega.max(f0).max(1.0))
        }
    };
    let rule = kind.scaling_rule();
    let mut state = ScalingState::new(&rule, 1);
    let g: Vec<f64> = (0..=iters).map(|k| kind.gradient(k)).collect();
    let mut s = Vec::with_capacity(iters);
    let mut w = Vec::with_capacity(iters);
    let mut x = vec![0.0];
    let mut f = vec![f0];
    for k in 0..iters {
        state
            .update(&rule, &g[k..=k])
            .map_err(|_| SharpError::Inadmissible {
                k,
                condition: "finite weights",
            })?;
        let wk = state.weights(&rule)[0];
        // the same arithmetic as the trust radius and Cauchy step with B = 0
        let sk = g[k].abs() / wk;
        w.push(wk);
        s.push(sk);
        x.push(x[k] + sk);
        f.push(f[k] + g[k] * sk);
    }
    Ok(SharpSequence {
        kind,
        iters,
        g,
        s,
        w,
        x,
        f,
        f0,
        kappa_f,
    })
}

/// Slack in the interpolation conditions; all positive for admissible data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Admissibility {
    /// `min_k kappa_f s_k^2 - |f_{k+1} - f_k - g_k s_k|`.
    pub value_margin: f64,
    /// `min_k kappa_f s_k - |g_{k+1} - g_k|`.
    pub gradient_margin: f64,
    /// `kappa_f - max_k max(|f_k|, |g_k|)`.
    pub bound_margin: f64,
    /// Index where the gradient condition is tightest.
    pub tightest: usize,
}

impl Admissibility {
    pub fn positive(&self) -> bool {
        self.value_margin > 0.0 && self.gradient_margin > 0.0 && self.bound_margin >= 0.0
    }
}

pub fn admissibility(seq: &SharpSequence) -> Admissibility {
    let kf = seq.kappa_f;
    let mut value_margin = f64::INFINITY;
    let mut gradient_margin = f64::INFINITY;
    let mut tightest = 0;
    for k in 0..seq.iters {
        let sk = seq.s[k];
        let v = kf * sk * sk - (seq.f[k + 1] - seq.f[k] - seq.g[k] * sk).abs();
        value_margin = value_margin.min(v);
        let gm = kf * sk - (seq.g[k + 1] - seq.g[k]).abs();
        if gm < gradient_margin {
            gradient_margin = gm;
            tightest = k;
        }
    }
    let peak = seq
        .f
        .iter()
        .chain(&seq.g)
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    Admissibility {
        value_margin,
        gradient_margin,
        bound_margin: kf - peak,
        tightest,
    }
}

/// C^1 piecewise cubic through `(x_k, f_k, g_k)`, continued quadratically outside `[x_0, x_K]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HermiteInterpolant {
    pub x: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    /// Per interval: `f(x_k + d) = f_k + g_k d + c2 d^2 + c3 d^3`.
    c2: Vec<f64>,
    c3: Vec<f64>,
    left_curvature: f64,
    right_curvature: f64,
}

/// Checks admissibility, then interpolates.
pub fn hermite_build(seq: &SharpSequence) -> Result<HermiteInterpolant, SharpError> {
    let kf = seq.kappa_f;
    for k in 0..seq.iters {
        let sk = seq.s[k];
        if (seq.f[k + 1] - seq.f[k] - seq.g[k] * sk).abs() > kf * sk * sk {
            return Err(SharpError::Inadmissible {
                k,
                condition: "value",
            });
        }
        if (seq.g[k + 1] - seq.g[k]).abs() > kf * sk {
            return Err(SharpError::Inadmissible {
                k,
                condition: "gradient",
            });
        }
    }
    Ok(HermiteInterpolant::new(
        seq.x.clone(),
        seq.f.clone(),
        seq.g.clone(),
    ))
}

impl HermiteInterpolant {
    /// `x` strictly increasing, at least two points.
    pub fn new(x: Vec<f64>, f: Vec<f64>, g: Vec<f64>) -> Self {
        assert!(x.len() >= 2 && x.len() == f.len() && x.len() == g.len());
        let m = x.len() - 1;
        let mut c2 = Vec::with_capacity(m);
        let mut c3 = Vec::with_capacity(m);
        for k in 0..m {
            let h = x[k + 1] - x[k];
            let slope = (f[k + 1] - f[k]) / h;
            c2.push((3.0 * slope - 2.0 * g[k] - g[k + 1]) / h);
            c3.push((g[k] + g[k + 1] - 2.0 * slope) / (h * h));
        }
        let left_curvature = 2.0 * c2[0];
        let h = x[m] - x[m - 1];
        let right_curvature = 2.0 * c2[m - 1] + 6.0 * c3[m - 1] * h;
        HermiteInterpolant {
            x,
            f,
            g,
            c2,
            c3,
            left_curvature,
            right_curvature,
        }
    }

    /// `(f, f', f'')` at `t`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let m = self.x.len() - 1;
        if t < self.x[0] {
            let d = t - self.x[0];
            let c = self.left_curvature;
            return (
                self.f[0] + self.g[0] * d + 0.5 * c * d * d,
                self.g[0] + c * d,
                c,
            );
        }
        if t > self.x[m] {
            let d = t - self.x[m];
            let c = self.right_curvature;
            return (
                self.f[m] + self.g[m] * d + 0.5 * c * d * d,
                self.g[m] + c * d,
                c,
            );
        }
        // interval k with x_k <= t, the last one when t = x_K
        let k = (self.x.partition_point(|v| *v <= t) - 1).min(m - 1);
        let d = t - self.x[k];
        let (c2, c3) = (self.c2[k], self.c3[k]);
        (
            self.f[k] + d * (self.g[k] + d * (c2 + d * c3)),
            self.g[k] + d * (2.0 * c2 + 3.0 * c3 * d),
            2.0 * c2 + 6.0 * c3 * d,
        )
    }

    /// Largest `|f''|` on interval `k` (attained at an end point, `f''` being affine).
    pub fn curvature_bound(&self, k: usize) -> f64 {
        let h = self.x[k + 1] - self.x[k];
        let a = 2.0 * self.c2[k];
        a.abs().max((a + 6.0 * self.c3[k] * h).abs())
    }

    pub fn intervals(&self) -> usize {
        self.x.len() - 1
    }
}

impl Oracle for HermiteInterpolant {
    fn dim(&self) -> usize {
        1
    }
    fn value(&mut self, x: &[f64]) -> Result<f64, ProblemError> {
        Ok(self.eval(x[0]).0)
    }
    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, ProblemError> {
        Ok(vec![self.eval(x[0]).1])
    }
    fn hessian(&mut self, x: &[f64]) -> Result<DMatrix<f64>, ProblemError> {
        Ok(DMatrix::from_element(1, 1, self.eval(x[0]).2))
    }
    fn has_hessian(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub trace: IterationTrace,
    /// `max_k |x_k^replay - x_k| / |x_k|` (absolute where `x_k = 0`).
    pub max_iterate_deviation: f64,
    /// `max_k |normalised ||g_k|| - 1|` over the range where the decay law is exact.
    pub max_decay_deviation: f64,
    /// First index whose iterate deviation exceeds `1e-8`.
    pub first_divergent: Option<usize>,
}

impl ReplayReport {
    pub fn matches(&self, tol: f64) -> bool {
        self.max_iterate_deviation <= tol && self.max_decay_deviation <= tol
    }
}

/// Runs the method (`B = 0`, box, `eps = 0`, exactly `K` iterations) on the interpolant from 0.
pub fn replay(
    seq: &SharpSequence,
    interp: &HermiteInterpolant,
) -> Result<ReplayReport, SharpError> {
    let cfg = Astr1Config {
        scaling: seq.kind.scaling_rule(),
        model: ModelKind::Zero,
        geometry: Geometry::Box,
        eps: 0.0,
        max_iter: seq.iters,
        record_vectors: true,
        ..Astr1Config::default()
    };
    let mut oracle = interp.clone();
    let trace = astr1_run(&mut oracle, &[seq.x[0]], &cfg)?;
    let xs = trace.iterates().unwrap_or_default();
    let mut max_iterate_deviation: f64 = if xs.len() == seq.x.len() {
        0.0
    } else {
        f64::INFINITY
    };
    let mut first_divergent = None;
    for (k, (xr, xp)) in xs.iter().zip(&seq.x).enumerate() {
        let diff = (xr[0] - xp).abs();
        let dev = if *xp == 0.0 { diff } else { diff / xp.abs() };
        if dev > 1e-8 && first_divergent.is_none() {
            first_divergent = Some(k);
        }
        max_iterate_deviation = max_iterate_deviation.max(dev);
    }
    let first = match seq.kind {
        SharpKind::Thm31 { .. } => 1,
        SharpKind::Thm41 { .. } => 0,
    };
    let norms = trace.gradient_norms();
    let max_decay_deviation = norms
        .iter()
        .enumerate()
        .skip(first)
        .map(|(k, g)| (seq.kind.normalised(k, *g) - 1.0).abs())
        .fold(
            if norms.len() == seq.iters + 1 {
                0.0
            } else {
                f64::INFINITY
            },
            f64::max,
        );
    Ok(ReplayReport {
        trace,
        max_iterate_deviation,
        max_decay_deviation,
        first_divergent,
    })
}
