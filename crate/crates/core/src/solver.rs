//! Adaptively scaled trust-region iteration that never evaluates the objective,
//! plus the steepest-descent-with-backtracking baseline.
//!
//! One iteration of [`astr1_run`]:
//!
//! 1. radii `Delta_{i,k} = |g_{i,k}| / w_{i,k}` from the scaling rule,
//! 2. a Hessian model `B_k` with `||B_k|| <= kappa_B`,
//! 3. a step inside the trust region whose model decrease is at least a
//!    fraction `tau` of the decrease at the Cauchy step `s_Q = gamma s_L`,
//! 4. `x_{k+1} = x_k + s_k`.
//!
//! There is no acceptance test and no radius update loop.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{dot, HessianModel, ModelError, ModelKind};
use crate::problems::Oracle;
use crate::scaling::{ScalingError, ScalingRule, ScalingState, Theta};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
    #[error("the exact Hessian model needs an oracle with second derivatives")]
    NoHessian,
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
}

/// Internal failure of one step computation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error("non-finite arithmetic in the step computation")]
    NonFinite,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    /// Per-coordinate bounds `|s_i| <= Delta_i`.
    Box,
    /// Euclidean ball `||s||_2 <= Delta`; requires an aggregated scaling rule.
    Ball,
}

impl FromStr for Geometry {
    type Err = SolverError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "box" | "inf" => Ok(Geometry::Box),
            "ball" | "l2" => Ok(Geometry::Ball),
            _ => Err(SolverError::Config(format!("unknown geometry `{s}`"))),
        }
    }
}

impl fmt::Display for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Geometry::Box => "box",
            Geometry::Ball => "ball",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Astr1Config {
    pub tau: f64,
    pub kappa_b: f64,
    pub geometry: Geometry,
    pub scaling: ScalingRule,
    pub model: ModelKind,
    pub eps: f64,
    pub max_iter: usize,
    pub cg_rel: f64,
    pub cg_abs: f64,
    /// Record `f(x_k)` at every iterate. The values are never used by the iteration.
    pub instrument_f: bool,
    /// Keep `x, g, w, Delta, s` in every record.
    pub record_vectors: bool,
}

impl Default for Astr1Config {
    fn default() -> Self {
        Astr1Config {
            tau: 0.1,
            kappa_b: 1e5,
            geometry: Geometry::Box,
            scaling: ScalingRule::adagrad(),
            model: ModelKind::Zero,
            eps: 1e-6,
            max_iter: 100_000,
            cg_rel: 1e-5,
            cg_abs: 1e-12,
            instrument_f: false,
            record_vectors: false,
        }
    }
}

impl Astr1Config {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: String| Err(SolverError::Config(m));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau = {} outside (0, 1]", self.tau));
        }
        if !(self.kappa_b >= 1.0) {
            return bad(format!("kappa_B = {} below 1", self.kappa_b));
        }
        if !(self.eps >= 0.0) {
            return bad(format!("eps = {} must be non-negative", self.eps));
        }
        if self.geometry == Geometry::Ball && !self.scaling.aggregated {
            return bad("ball geometry requires an aggregated scaling rule".into());
        }
        self.scaling.validate()?;
        Ok(())
    }
}

/// Trust-region radii for one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Radii {
    Box(Vec<f64>),
    Ball(f64),
}

impl Radii {
    pub fn min(&self) -> f64 {
        match self {
            Radii::Box(d) => d.iter().copied().fold(f64::INFINITY, f64::min),
            Radii::Ball(d) => *d,
        }
    }

    pub fn max(&self) -> f64 {
        match self {
            Radii::Box(d) => d.iter().copied().fold(0.0, f64::max),
            Radii::Ball(d) => *d,
        }
    }

    /// Largest violation of the trust-region bound by `s`, relative to `1 + Delta`.
    pub fn containment_slack(&self, s: &[f64]) -> f64 {
        match self {
            Radii::Box(d) => s
                .iter()
                .zip(d)
                .map(|(si, di)| (si.abs() - di) / (1.0 + di))
                .fold(f64::NEG_INFINITY, f64::max),
            Radii::Ball(d) => (norm2(s) - d) / (1.0 + d),
        }
    }
}

/// `Delta_i = |g_i| / w_i` (box) or `Delta = ||g||_2 / w` (ball, `w` shared by all coordinates).
pub fn trust_radius(g: &[f64], w: &[f64], geometry: Geometry) -> Radii {
    match geometry {
        Geometry::Box => Radii::Box(g.iter().zip(w).map(|(gi, wi)| gi.abs() / wi).collect()),
        Geometry::Ball => Radii::Ball(if g.is_empty() { 0.0 } else { norm2(g) / w[0] }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauchyStep {
    pub s_l: Vec<f64>,
    pub gamma: f64,
    pub s_q: Vec<f64>,
    pub q_q: f64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scaled steepest-descent step `s_L`, its model minimiser `s_Q = gamma s_L` and `q(s_Q)`.
pub fn cauchy_step(
    g: &[f64],
    model: &HessianModel,
    radii: &Radii,
) -> Result<CauchyStep, StepError> {
    let s_l: Vec<f64> = match radii {
        Radii::Box(d) => g.iter().zip(d).map(|(gi, di)| -sign(*gi) * di).collect(),
        Radii::Ball(d) => {
            let ng = norm2(g);
            if ng == 0.0 {
                vec![0.0; g.len()]
            } else {
                g.iter().map(|gi| -gi * (d / ng)).collect()
            }
        }
    };
    let gs = dot(g, &s_l);
    let curvature = if model.is_zero() {
        0.0
    } else {
        dot(&s_l, &model.apply(&s_l)?)
    };
    let gamma = if curvature > 0.0 {
        (gs.abs() / curvature).min(1.0)
    } else {
        1.0
    };
    let s_q: Vec<f64> = s_l.iter().map(|v| gamma * v).collect();
    let q_q = gamma * gs + 0.5 * gamma * gamma * curvature;
    if !q_q.is_finite() {
        return Err(StepError::NonFinite);
    }
    Ok(CauchyStep {
        s_l,
        gamma,
        s_q,
        q_q,
    })
}

/// `g's + s'Bs / 2`.
pub fn model_value(g: &[f64], model: &HessianModel, s: &[f64]) -> Result<f64, StepError> {
    let lin = dot(g, s);
    if model.is_zero() {
        return Ok(lin);
    }
    Ok(lin + 0.5 * dot(s, &model.apply(s)?))
}

/// Result of the trust-region subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct Subproblem {
    pub s: Vec<f64>,
    pub q: f64,
    pub cg_iterations: usize,
    /// The iterative solution missed the Cauchy-fraction condition and `s_Q` was used instead.
    pub fell_back: bool,
}

/// Approximate model minimiser in the trust region satisfying
/// `q(s) <= tau q(s_Q)`; falls back to `s_Q` when the truncated CG result does not.
pub fn solve_subproblem(
    g: &[f64],
    model: &HessianModel,
    radii: &Radii,
    cauchy: &CauchyStep,
    cfg: &Astr1Config,
) -> Result<Subproblem, StepError> {
    if model.is_zero() {
        return Ok(Subproblem {
            s: cauchy.s_l.clone(),
            q: dot(g, &cauchy.s_l),
            cg_iterations: 0,
            fell_back: false,
        });
    }
    let tol = cfg.cg_abs.max(cfg.cg_rel * norm2(g));
    let max_cg = 10 * g.len() + 50;
    let (s, iters) = match radii {
        Radii::Box(d) => box_tcg(g, model, d, tol, max_cg)?,
        Radii::Ball(d) => steihaug_tcg(g, model, *d, tol, max_cg)?,
    };
    let q = model_value(g, model, &s)?;
    if !q.is_finite() || s.iter().any(|v| !v.is_finite()) {
        return Err(StepError::NonFinite);
    }
    if q <= cfg.tau * cauchy.q_q {
        Ok(Subproblem {
            s,
            q,
            cg_iterations: iters,
            fell_back: false,
        })
    } else {
        Ok(Subproblem {
            s: cauchy.s_q.clone(),
            q: cauchy.q_q,
            cg_iterations: iters,
            fell_back: true,
        })
    }
}

/// Projected truncated CG in the box `|s_i| <= delta_i`: CG on the free variables; a
/// coordinate reaching its bound (or met along negative curvature) is fixed there and CG
/// restarts on the remaining ones.
fn box_tcg(
    g: &[f64],
    model: &HessianModel,
    delta: &[f64],
    tol: f64,
    max_cg: usize,
) -> Result<(Vec<f64>, usize), StepError> {
    let n = g.len();
    let mut s = vec![0.0; n];
    let mut free: Vec<bool> = delta.iter().map(|d| *d > 0.0).collect();
    // B s, carried along the CG steps rather than recomputed at each restart
    let mut bs = vec![0.0; n];
    let mut iters = 0;
    'restart: for _ in 0..=n {
        if !free.iter().any(|f| *f) {
            break;
        }
        let mut r: Vec<f64> = (0..n)
            .map(|i| if free[i] { g[i] + bs[i] } else { 0.0 })
            .collect();
        let mut rr = dot(&r, &r);
        if rr.sqrt() <= tol {
            break;
        }
        let mut p: Vec<f64> = r.iter().map(|v| -v).collect();
        loop {
            if iters >= max_cg {
                break 'restart;
            }
            iters += 1;
            let bp = model.apply(&p)?;
            let curv = dot(&p, &bp);
            let (alpha_max, hit) = box_exit(&s, &p, delta, &free);
            let alpha = if curv > 0.0 { rr / curv } else { f64::INFINITY };
            if !alpha.is_finite() && !alpha_max.is_finite() {
                return Err(StepError::NonFinite);
            }
            if alpha >= alpha_max {
                for i in 0..n {
                    s[i] += alpha_max * p[i];
                    bs[i] += alpha_max * bp[i];
                }
                if let Some(i) = hit {
                    s[i] = sign(p[i]) * delta[i];
                    free[i] = false;
                }
                continue 'restart;
            }
            for i in 0..n {
                s[i] += alpha * p[i];
                bs[i] += alpha * bp[i];
                if free[i] {
                    r[i] += alpha * bp[i];
                }
            }
            let rr_new = dot(&r, &r);
            if !rr_new.is_finite() {
                return Err(StepError::NonFinite);
            }
            if rr_new.sqrt() <= tol {
                break 'restart;
            }
            let beta = rr_new / rr;
            for i in 0..n {
                p[i] = if free[i] { -r[i] + beta * p[i] } else { 0.0 };
            }
            rr = rr_new;
        }
    }
    for (si, di) in s.iter_mut().zip(delta) {
        *si = si.clamp(-di, *di);
    }
    Ok((s, iters))
}

/// Largest step along `p` keeping the free coordinates inside the box, and the first blocking index.
fn box_exit(s: &[f64], p: &[f64], delta: &[f64], free: &[bool]) -> (f64, Option<usize>) {
    let mut best = f64::INFINITY;
    let mut hit = None;
    for i in 0..s.len() {
        if !free[i] || p[i] == 0.0 {
            continue;
        }
        let room = if p[i] > 0.0 {
            delta[i] - s[i]
        } else {
            -delta[i] - s[i]
        };
        let t = (room / p[i]).max(0.0);
        if t < best {
            best = t;
            hit = Some(i);
        }
    }
    (best, hit)
}

/// Steihaug-Toint truncated CG in the ball `||s|| <= delta`.
fn steihaug_tcg(
    g: &[f64],
    model: &HessianModel,
    delta: f64,
    tol: f64,
    max_cg: usize,
) -> Result<(Vec<f64>, usize), StepError> {
    let n = g.len();
    let mut s = vec![0.0; n];
    let mut r = g.to_vec();
    let mut rr = dot(&r, &r);
    let mut p: Vec<f64> = r.iter().map(|v| -v).collect();
    let mut iters = 0;
    if rr.sqrt() <= tol || delta == 0.0 {
        return Ok((s, 0));
    }
    while iters < max_cg {
        iters += 1;
        let bp = model.apply(&p)?;
        let curv = dot(&p, &bp);
        let alpha = if curv > 0.0 { rr / curv } else { f64::INFINITY };
        let trial_norm = if alpha.is_finite() {
            norm2(
                &s.iter()
                    .zip(&p)
                    .map(|(a, b)| a + alpha * b)
                    .collect::<Vec<_>>(),
            )
        } else {
            f64::INFINITY
        };
        if trial_norm >= delta {
            let t = ball_exit(&s, &p, delta);
            for (si, pi) in s.iter_mut().zip(&p) {
                *si += t * pi;
            }
            break;
        }
        for (si, pi) in s.iter_mut().zip(&p) {
            *si += alpha * pi;
        }
        for (ri, bpi) in r.iter_mut().zip(&bp) {
            *ri += alpha * bpi;
        }
        let rr_new = dot(&r, &r);
        if !rr_new.is_finite() {
            return Err(StepError::NonFinite);
        }
        if rr_new.sqrt() <= tol {
            break;
        }
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = -ri + beta * *pi;
        }
        rr = rr_new;
    }
    let ns = norm2(&s);
    if ns > delta {
        let f = delta / ns;
        s.iter_mut().for_each(|v| *v *= f);
    }
    Ok((s, iters))
}

/// Positive root `t` of `||s + t p|| = delta`.
fn ball_exit(s: &[f64], p: &[f64], delta: f64) -> f64 {
    let pp = dot(p, p);
    let sp = dot(s, p);
    let ss = dot(s, s);
    let disc = (sp * sp + pp * (delta * delta - ss)).max(0.0);
    // stable form of (-sp + sqrt(disc)) / pp
    if sp <= 0.0 {
        (-sp + disc.sqrt()) / pp
    } else {
        (delta * delta - ss).max(0.0) / (sp + disc.sqrt())
    }
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIter,
    Overflow,
    /// Backtracking exhausted (steepest-descent baseline only).
    LinesearchFailure,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Converged => "converged",
            Status::MaxIter => "max_iter",
            Status::Overflow => "overflow",
            Status::LinesearchFailure => "linesearch_failure",
        })
    }
}

/// Vectors of one iteration, kept when `record_vectors` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterVectors {
    pub x: Vec<f64>,
    pub g: Vec<f64>,
    pub w: Vec<f64>,
    pub delta: Vec<f64>,
    pub s: Vec<f64>,
}

/// Step-computation details of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepDetail {
    TrustRegion {
        w_min: f64,
        w_max: f64,
        delta_min: f64,
        delta_max: f64,
        gamma: f64,
        /// `q(s_k)`.
        q_step: f64,
        /// `q(s_Q)`.
        q_cauchy: f64,
        /// `max_i (|s_i| - Delta_i) / (1 + Delta_i)`.
        containment_slack: f64,
        /// `q(s_k) - tau q(s_Q)`.
        gcp_residual: f64,
        /// `sum_i g_i^2 / w_i`.
        sum_g2_over_w: f64,
        /// `sum_i g_i^2 / w_i^2`.
        sum_g2_over_w2: f64,
        cg_iterations: usize,
        fell_back: bool,
    },
    LineSearch {
        alpha: f64,
        backtracks: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub k: usize,
    pub normg: f64,
    pub f: Option<f64>,
    pub detail: StepDetail,
    pub vectors: Option<IterVectors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<IterRecord>,
    pub status: Status,
    /// Number of steps taken.
    pub iterations: usize,
    pub final_x: Vec<f64>,
    /// Gradient norm at `final_x` (NaN after an overflow).
    pub final_normg: f64,
    pub final_f: Option<f64>,
    pub tau: f64,
    pub kappa_b: f64,
}

impl IterationTrace {
    /// `||g_j||` for every evaluated iterate, the final one included.
    pub fn gradient_norms(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.records.iter().map(|r| r.normg).collect();
        if self.final_normg.is_finite() {
            v.push(self.final_normg);
        }
        v
    }

    /// Objective values at every iterate (instrumented runs only).
    pub fn f_values(&self) -> Option<Vec<f64>> {
        let mut v: Vec<f64> = self.records.iter().map(|r| r.f).collect::<Option<_>>()?;
        v.push(self.final_f?);
        Some(v)
    }

    /// Iterates `x_0 .. x_K` (requires `record_vectors`).
    pub fn iterates(&self) -> Option<Vec<Vec<f64>>> {
        let mut v: Vec<Vec<f64>> = self
            .records
            .iter()
            .map(|r| r.vectors.as_ref().map(|v| v.x.clone()))
            .collect::<Option<_>>()?;
        v.push(self.final_x.clone());
        Some(v)
    }

    /// Worst trust-region containment slack over all iterations.
    pub fn max_containment_slack(&self) -> f64 {
        self.records
            .iter()
            .filter_map(|r| match r.detail {
                StepDetail::TrustRegion {
                    containment_slack, ..
                } => Some(containment_slack),
                _ => None,
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Worst `(q(s) - tau q(s_Q)) / max(1, |q(s_Q)|)` over all iterations.
    pub fn max_gcp_residual(&self) -> f64 {
        self.records
            .iter()
            .filter_map(|r| match r.detail {
                StepDetail::TrustRegion {
                    gcp_residual,
                    q_cauchy,
                    ..
                } => Some(gcp_residual / q_cauchy.abs().max(1.0)),
                _ => None,
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest `q(s_Q)` over all iterations (never positive).
    pub fn max_cauchy_value(&self) -> f64 {
        self.records
            .iter()
            .filter_map(|r| match r.detail {
                StepDetail::TrustRegion { q_cauchy, .. } => Some(q_cauchy),
                _ => None,
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

struct Finisher {
    tau: f64,
    kappa_b: f64,
    instrument_f: bool,
}

impl Finisher {
    fn finish<O: Oracle>(
        &self,
        oracle: &mut O,
        records: Vec<IterRecord>,
        status: Status,
        x: Vec<f64>,
        normg: f64,
    ) -> IterationTrace {
        let final_f = if self.instrument_f && status != Status::Overflow {
            oracle.value(&x).ok()
        } else {
            None
        };
        IterationTrace {
            iterations: records.len(),
            records,
            status,
            final_x: x,
            final_normg: normg,
            final_f,
            tau: self.tau,
            kappa_b: self.kappa_b,
        }
    }
}

/// Runs the adaptively scaled trust-region method from `x0`.
///
/// The objective value is requested from the oracle only when `instrument_f` is set.
/// Run outcomes (convergence, iteration cap, overflow) are reported through the trace status.
pub fn astr1_run<O: Oracle>(
    oracle: &mut O,
    x0: &[f64],
    cfg: &Astr1Config,
) -> Result<IterationTrace, SolverError> {
    cfg.validate()?;
    if cfg.model == ModelKind::Exact && !oracle.has_hessian() {
        return Err(SolverError::NoHessian);
    }
    let n = x0.len();
    let fin = Finisher {
        tau: cfg.tau,
        kappa_b: cfg.kappa_b,
        instrument_f: cfg.instrument_f,
    };
    let rule = &cfg.scaling;
    let mut state = ScalingState::new(rule, n);
    let mut model = HessianModel::new(cfg.model, cfg.kappa_b);
    let mut records = Vec::new();
    let mut x = x0.to_vec();
    let mut g = match oracle.gradient(&x) {
        Ok(g) => g,
        Err(_) => return Ok(fin.finish(oracle, records, Status::Overflow, x, f64::NAN)),
    };
    let overflow =
        |oracle: &mut O, records, x| fin.finish(oracle, records, Status::Overflow, x, f64::NAN);
    loop {
        let normg = norm2(&g);
        if !normg.is_finite() {
            return Ok(overflow(oracle, records, x));
        }
        if normg <= cfg.eps {
            return Ok(fin.finish(oracle, records, Status::Converged, x, normg));
        }
        if records.len() >= cfg.max_iter {
            return Ok(fin.finish(oracle, records, Status::MaxIter, x, normg));
        }
        let f = if cfg.instrument_f {
            match oracle.value(&x) {
                Ok(f) => Some(f),
                Err(_) => return Ok(overflow(oracle, records, x)),
            }
        } else {
            None
        };
        if state.update(rule, &g).is_err() {
            return Ok(overflow(oracle, records, x));
        }
        let w = state.weights(rule);
        if cfg.model == ModelKind::Exact {
            match oracle.hessian(&x) {
                Ok(h) => model.set_exact(h),
                Err(_) => return Ok(overflow(oracle, records, x)),
            }
        }
        let radii = trust_radius(&g, &w, cfg.geometry);
        let step = cauchy_step(&g, &model, &radii)
            .and_then(|c| solve_subproblem(&g, &model, &radii, &c, cfg).map(|sp| (c, sp)));
        let (cauchy, sub) = match step {
            Ok(v) => v,
            Err(StepError::NonFinite) => return Ok(overflow(oracle, records, x)),
            Err(StepError::Model(e)) => panic!("model misuse inside the solver: {e}"),
        };
        let s = sub.s;
        let sum_g2_over_w = g.iter().zip(&w).map(|(gi, wi)| gi * gi / wi).sum();
        let sum_g2_over_w2 = g.iter().zip(&w).map(|(gi, wi)| gi * gi / (wi * wi)).sum();
        let detail = StepDetail::TrustRegion {
            w_min: w.iter().copied().fold(f64::INFINITY, f64::min),
            w_max: w.iter().copied().fold(0.0, f64::max),
            delta_min: radii.min(),
            delta_max: radii.max(),
            gamma: cauchy.gamma,
            q_step: sub.q,
            q_cauchy: cauchy.q_q,
            containment_slack: radii.containment_slack(&s),
            gcp_residual: sub.q - cfg.tau * cauchy.q_q,
            sum_g2_over_w,
            sum_g2_over_w2,
            cg_iterations: sub.cg_iterations,
            fell_back: sub.fell_back,
        };
        let x_next: Vec<f64> = x.iter().zip(&s).map(|(a, b)| a + b).collect();
        records.push(IterRecord {
            k: records.len(),
            normg,
            f,
            detail,
            vectors: cfg.record_vectors.then(|| IterVectors {
                x: x.clone(),
                g: g.clone(),
                w: w.clone(),
                delta: match &radii {
                    Radii::Box(d) => d.clone(),
                    Radii::Ball(d) => vec![*d],
                },
                s: s.clone(),
            }),
        });
        if x_next.iter().any(|v| !v.is_finite()) {
            return Ok(overflow(oracle, records, x_next));
        }
        let g_next = match oracle.gradient(&x_next) {
            Ok(g) => g,
            Err(_) => return Ok(overflow(oracle, records, x_next)),
        };
        if matches!(cfg.model, ModelKind::BbDiag | ModelKind::Lbfgs { .. }) {
            let y: Vec<f64> = g_next.iter().zip(&g).map(|(a, b)| a - b).collect();
            model.update(&s, &y);
        }
        x = x_next;
        g = g_next;
    }
}

/// Armijo constant of the backtracking baseline.
pub const ARMIJO_C1: f64 = 1e-4;
/// Halvings allowed per iteration before the baseline gives up.
pub const MAX_BACKTRACKS: usize = 50;

/// Steepest descent with Armijo backtracking: the one method that evaluates `f`.
///
/// The first trial step is `1 / ||g_0||` at iteration 0 and `1` afterwards; each
/// rejection halves it.
pub fn sdba_run<O: Oracle>(
    oracle: &mut O,
    x0: &[f64],
    eps: f64,
    max_iter: usize,
) -> IterationTrace {
    let fin = Finisher {
        tau: f64::NAN,
        kappa_b: f64::NAN,
        instrument_f: false,
    };
    let mut records = Vec::new();
    let mut x = x0.to_vec();
    let (mut f, mut g) = match (oracle.value(&x), oracle.gradient(&x)) {
        (Ok(f), Ok(g)) => (f, g),
        _ => return fin.finish(oracle, records, Status::Overflow, x, f64::NAN),
    };
    let out = |oracle: &mut O, records: Vec<IterRecord>, status, x: Vec<f64>, normg, f: f64| {
        let mut t = fin.finish(oracle, records, status, x, normg);
        t.final_f = Some(f);
        t
    };
    let normg0 = norm2(&g);
    loop {
        let normg = norm2(&g);
        if !normg.is_finite() {
            return out(oracle, records, Status::Overflow, x, f64::NAN, f);
        }
        if normg <= eps {
            return out(oracle, records, Status::Converged, x, normg, f);
        }
        if records.len() >= max_iter {
            return out(oracle, records, Status::MaxIter, x, normg, f);
        }
        let mut alpha = if records.is_empty() {
            1.0 / normg0
        } else {
            1.0
        };
        let mut accepted = None;
        for backtracks in 0..=MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - alpha * gi).collect();
            if let Ok(ft) = oracle.value(&trial) {
                if ft <= f - ARMIJO_C1 * alpha * normg * normg {
                    accepted = Some((trial, ft, backtracks));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((trial, ft, backtracks)) = accepted else {
            return out(oracle, records, Status::LinesearchFailure, x, normg, f);
        };
        let alpha_used = alpha;
        records.push(IterRecord {
            k: records.len(),
            normg,
            f: Some(f),
            detail: StepDetail::LineSearch {
                alpha: alpha_used,
                backtracks,
            },
            vectors: None,
        });
        match oracle.gradient(&trial) {
            Ok(gn) => {
                x = trial;
                g = gn;
                f = ft;
            }
            Err(_) => return out(oracle, records, Status::Overflow, trial, f64::NAN, ft),
        }
    }
}

/// A named method from the benchmark variant table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Astr1 {
        scaling: ScalingRule,
        model: ModelKind,
        geometry: Geometry,
    },
    Sdba,
}

/// Every variant name understood by [`method_by_name`].
pub const METHOD_NAMES: [&str; 16] = [
    "adagrad",
    "adagnorm",
    "adam",
    "adamnorm",
    "maxg",
    "maxgnorm",
    "adagrads",
    "adams",
    "maxgs",
    "adagbb",
    "adagbfgs3",
    "adagH",
    "adagbbs",
    "adagbfgs3s",
    "adagHs",
    "sdba",
];

/// Resolves a variant name: `*norm` variants aggregate the weights and use the ball,
/// a trailing `s` selects `theta = sqrt(n)`, and `bb` / `bfgs3` / `H` pick the Hessian model.
pub fn method_by_name(name: &str) -> Result<Method, SolverError> {
    if name == "sdba" {
        return Ok(Method::Sdba);
    }
    let unknown = || SolverError::UnknownMethod(name.to_string());
    let lower = name.to_ascii_lowercase();
    let (stem, sqrt_n) = match lower.strip_suffix('s') {
        // "adams" is the scaled Adam; "adam" itself has no trailing s.
        Some(stem) if stem != "adagnorm" && !stem.is_empty() => (stem.to_string(), true),
        _ => (lower.clone(), false),
    };
    let (stem, sqrt_n) = if METHOD_STEMS.contains(&stem.as_str()) {
        (stem, sqrt_n)
    } else if METHOD_STEMS.contains(&lower.as_str()) {
        (lower.clone(), false)
    } else {
        return Err(unknown());
    };
    let (scaling, model, aggregated) = match stem.as_str() {
        "adagrad" => (ScalingRule::adagrad(), ModelKind::Zero, false),
        "adagnorm" => (ScalingRule::adagrad(), ModelKind::Zero, true),
        "adam" => (ScalingRule::adam(), ModelKind::Zero, false),
        "adamnorm" => (ScalingRule::adam(), ModelKind::Zero, true),
        "maxg" => (ScalingRule::maxg(), ModelKind::Zero, false),
        "maxgnorm" => (ScalingRule::maxg(), ModelKind::Zero, true),
        "adagbb" => (ScalingRule::adagrad(), ModelKind::BbDiag, false),
        "adagbfgs3" => (
            ScalingRule::adagrad(),
            ModelKind::Lbfgs { memory: 3 },
            false,
        ),
        "adagh" => (ScalingRule::adagrad(), ModelKind::Exact, false),
        _ => return Err(unknown()),
    };
    if sqrt_n && aggregated {
        return Err(unknown());
    }
    let theta = if sqrt_n {
        Theta::SqrtN
    } else {
        Theta::Fixed(1.0)
    };
    Ok(Method::Astr1 {
        scaling: scaling.with_aggregated(aggregated).with_theta(theta),
        model,
        geometry: if aggregated {
            Geometry::Ball
        } else {
            Geometry::Box
        },
    })
}

const METHOD_STEMS: [&str; 9] = [
    "adagrad",
    "adagnorm",
    "adam",
    "adamnorm",
    "maxg",
    "maxgnorm",
    "adagbb",
    "adagbfgs3",
    "adagh",
];

impl Method {
    /// Solver configuration for this method with the given tolerance and cap.
    pub fn config(&self, eps: f64, max_iter: usize) -> Option<Astr1Config> {
        match self {
            Method::Astr1 {
                scaling,
                model,
                geometry,
            } => Some(Astr1Config {
                scaling: scaling.clone(),
                model: *model,
                geometry: *geometry,
                eps,
                max_iter,
                ..Astr1Config::default()
            }),
            Method::Sdba => None,
        }
    }
}

/// Runs any method on an oracle; configuration errors surface as `Err`.
pub fn run_method<O: Oracle>(
    method: &Method,
    oracle: &mut O,
    x0: &[f64],
    eps: f64,
    max_iter: usize,
) -> Result<IterationTrace, SolverError> {
    match method.config(eps, max_iter) {
        Some(cfg) => astr1_run(oracle, x0, &cfg),
        None => Ok(sdba_run(oracle, x0, eps, max_iter)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_problem, Counted, ProblemError};
    use nalgebra::DMatrix;

    /// `f = sum_i c_i x_i^2 / 2` with a diagonal Hessian.
    struct Quadratic {
        c: Vec<f64>,
    }

    impl Oracle for Quadratic {
        fn dim(&self) -> usize {
            self.c.len()
        }
        fn value(&mut self, x: &[f64]) -> Result<f64, ProblemError> {
            Ok(x.iter().zip(&self.c).map(|(a, c)| 0.5 * c * a * a).sum())
        }
        fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, ProblemError> {
            Ok(x.iter().zip(&self.c).map(|(a, c)| c * a).collect())
        }
        fn hessian(&mut self, _x: &[f64]) -> Result<DMatrix<f64>, ProblemError> {
            Ok(DMatrix::from_diagonal(
                &nalgebra::DVector::from_column_slice(&self.c),
            ))
        }
        fn has_hessian(&self) -> bool {
            true
        }
    }

    fn exact_model(h: DMatrix<f64>) -> HessianModel {
        let mut m = HessianModel::new(ModelKind::Exact, 1e5);
        m.set_exact(h);
        m
    }

    #[test]
    fn radii() {
        assert_eq!(
            trust_radius(&[2.0], &[4.0], Geometry::Box),
            Radii::Box(vec![0.5])
        );
        assert_eq!(
            trust_radius(&[0.0], &[4.0], Geometry::Box),
            Radii::Box(vec![0.0])
        );
        assert_eq!(
            trust_radius(&[3.0, -4.0], &[5.0, 5.0], Geometry::Ball),
            Radii::Ball(1.0)
        );
    }

    #[test]
    fn cauchy_with_zero_model() {
        let m = HessianModel::new(ModelKind::Zero, 1e5);
        let c = cauchy_step(&[1.0, -2.0, 0.0], &m, &Radii::Box(vec![0.5, 0.25, 0.0])).unwrap();
        assert_eq!(c.gamma, 1.0);
        assert_eq!(c.s_l, vec![-0.5, 0.25, 0.0]);
        assert_eq!(c.s_q, c.s_l);
        assert_eq!(c.q_q, -1.0);
    }

    #[test]
    fn cauchy_positive_curvature() {
        let m = exact_model(DMatrix::from_element(1, 1, 4.0));
        let c = cauchy_step(&[1.0], &m, &Radii::Box(vec![1.0])).unwrap();
        assert_eq!(c.s_l, vec![-1.0]);
        assert_eq!(c.gamma, 0.25);
        assert_eq!(c.s_q, vec![-0.25]);
        assert!((c.q_q + 0.125).abs() < 1e-15);
    }

    #[test]
    fn cauchy_negative_curvature() {
        let m = exact_model(DMatrix::from_element(1, 1, -1.0));
        let c = cauchy_step(&[1.0], &m, &Radii::Box(vec![1.0])).unwrap();
        assert_eq!(c.gamma, 1.0);
        assert_eq!(c.s_q, vec![-1.0]);
        assert!((c.q_q + 1.5).abs() < 1e-15);
    }

    #[test]
    fn subproblem_zero_model_returns_s_l() {
        let m = HessianModel::new(ModelKind::Zero, 1e5);
        let r = Radii::Box(vec![0.3, 0.7]);
        let c = cauchy_step(&[1.0, -1.0], &m, &r).unwrap();
        let sp = solve_subproblem(&[1.0, -1.0], &m, &r, &c, &Astr1Config::default()).unwrap();
        assert_eq!(sp.s, c.s_l);
    }

    #[test]
    fn subproblem_interior_1d() {
        let m = exact_model(DMatrix::from_element(1, 1, 4.0));
        let r = Radii::Box(vec![1.0]);
        let c = cauchy_step(&[1.0], &m, &r).unwrap();
        let sp = solve_subproblem(&[1.0], &m, &r, &c, &Astr1Config::default()).unwrap();
        assert!((sp.s[0] + 0.25).abs() < 1e-15);
        assert!((sp.q + 0.125).abs() < 1e-15);
        assert!(sp.q <= 0.1 * c.q_q);
        assert!(!sp.fell_back);
    }

    #[test]
    fn subproblem_solves_spd_system_with_large_radius() {
        // Fixed pseudo-random SPD matrix A = M'M + I.
        let m = DMatrix::from_fn(5, 5, |i, j| (((i * 7 + j * 3) % 11) as f64 - 5.0) / 5.0);
        let a = m.transpose() * &m + DMatrix::identity(5, 5);
        let g = [1.0, -2.0, 0.5, 3.0, -1.5];
        let model = exact_model(a.clone());
        let cfg = Astr1Config::default();
        for radii in [Radii::Box(vec![1e3; 5]), Radii::Ball(1e3)] {
            let c = cauchy_step(&g, &model, &radii).unwrap();
            let sp = solve_subproblem(&g, &model, &radii, &c, &cfg).unwrap();
            let want = a
                .clone()
                .lu()
                .solve(&(-nalgebra::DVector::from_column_slice(&g)))
                .unwrap();
            let res: Vec<f64> = model
                .apply(&sp.s)
                .unwrap()
                .iter()
                .zip(&g)
                .map(|(a, b)| a + b)
                .collect();
            assert!(norm2(&res) <= 1e-5 * norm2(&g), "residual {}", norm2(&res));
            for i in 0..5 {
                assert!((sp.s[i] - want[i]).abs() < 1e-4 * (1.0 + want[i].abs()));
            }
        }
    }

    #[test]
    fn box_tcg_respects_bounds_under_indefinite_model() {
        let h = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 2.0, -3.0, 0.5, 0.0, 0.5, 2.0]);
        let model = exact_model(h);
        let g = [0.3, -0.1, 0.7];
        let d = vec![0.2, 0.05, 0.4];
        let radii = Radii::Box(d.clone());
        let c = cauchy_step(&g, &model, &radii).unwrap();
        let sp = solve_subproblem(&g, &model, &radii, &c, &Astr1Config::default()).unwrap();
        for i in 0..3 {
            assert!(sp.s[i].abs() <= d[i]);
        }
        assert!(sp.q <= 0.1 * c.q_q);
    }

    #[test]
    fn one_dimensional_quadratic_first_step() {
        let mut q = Quadratic { c: vec![1.0] };
        let cfg = Astr1Config {
            max_iter: 1,
            record_vectors: true,
            ..Default::default()
        };
        let t = astr1_run(&mut q, &[1.0], &cfg).unwrap();
        let x1 = t.final_x[0];
        assert!((x1 - (1.0 - 1.0 / 1.01f64.sqrt())).abs() < 1e-15);
        assert!((x1 - 0.004963).abs() < 1e-6);
    }

    #[test]
    fn stationary_start_converges_immediately() {
        let mut q = Quadratic { c: vec![1.0, 2.0] };
        let t = astr1_run(&mut q, &[0.0, 0.0], &Astr1Config::default()).unwrap();
        assert_eq!(t.status, Status::Converged);
        assert_eq!(t.iterations, 0);
        let t = sdba_run(&mut q, &[0.0, 0.0], 1e-6, 10);
        assert_eq!(t.status, Status::Converged);
        assert_eq!(t.iterations, 0);
    }

    #[test]
    fn ball_requires_aggregated_scaling() {
        let mut q = Quadratic { c: vec![1.0] };
        let cfg = Astr1Config {
            geometry: Geometry::Ball,
            ..Default::default()
        };
        assert!(matches!(
            astr1_run(&mut q, &[1.0], &cfg),
            Err(SolverError::Config(_))
        ));
    }

    #[test]
    fn rosenbrock_converges_with_invariants() {
        let p = make_problem("rosenbr", 10).unwrap();
        let mut c = Counted::new(p.clone());
        let t = astr1_run(&mut c, &p.x0, &Astr1Config::default()).unwrap();
        assert_eq!(t.status, Status::Converged);
        assert!(t.final_normg <= 1e-6);
        assert!(t.max_containment_slack() <= 1e-14);
        assert!(t.max_gcp_residual() <= 1e-12);
        assert!(t.max_cauchy_value() <= 0.0);
        assert_eq!(c.counts.values, 0);
    }

    #[test]
    fn sdba_decreases_monotonically() {
        let mut q = Quadratic { c: vec![1.0] };
        let t = sdba_run(&mut q, &[1.0], 1e-8, 1000);
        assert_eq!(t.status, Status::Converged);
        let f: Vec<f64> = t.records.iter().map(|r| r.f.unwrap()).collect();
        assert!(f.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn overflow_is_a_status() {
        // Woods from a far start with tiny sigma, aggressive steps overflow quickly.
        struct Blow;
        impl Oracle for Blow {
            fn dim(&self) -> usize {
                1
            }
            fn value(&mut self, _x: &[f64]) -> Result<f64, ProblemError> {
                Err(ProblemError::NonFinite)
            }
            fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, ProblemError> {
                if x[0] > 0.5 {
                    Err(ProblemError::NonFinite)
                } else {
                    Ok(vec![-1.0])
                }
            }
            fn hessian(&mut self, _x: &[f64]) -> Result<DMatrix<f64>, ProblemError> {
                Err(ProblemError::NoHessian("blow".into()))
            }
            fn has_hessian(&self) -> bool {
                false
            }
        }
        let t = astr1_run(&mut Blow, &[0.0], &Astr1Config::default()).unwrap();
        assert_eq!(t.status, Status::Overflow);
        let cfg = Astr1Config {
            model: ModelKind::Exact,
            ..Default::default()
        };
        assert_eq!(
            astr1_run(&mut Blow, &[0.0], &cfg),
            Err(SolverError::NoHessian)
        );
    }

    #[test]
    fn method_names_resolve() {
        for name in METHOD_NAMES {
            method_by_name(name).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        match method_by_name("adagnorm").unwrap() {
            Method::Astr1 {
                scaling, geometry, ..
            } => {
                assert!(scaling.aggregated);
                assert_eq!(geometry, Geometry::Ball);
            }
            _ => unreachable!(),
        }
        match method_by_name("adams").unwrap() {
            Method::Astr1 { scaling, .. } => {
                assert_eq!(scaling.variant, crate::scaling::Variant::AdamLike);
                assert_eq!(scaling.theta, Theta::SqrtN);
            }
            _ => unreachable!(),
        }
        match method_by_name("adagHs").unwrap() {
            Method::Astr1 { model, scaling, .. } => {
                assert_eq!(model, ModelKind::Exact);
                assert_eq!(scaling.theta, Theta::SqrtN);
            }
            _ => unreachable!(),
        }
        assert!(method_by_name("adagnorms").is_err());
        assert!(method_by_name("newton").is_err());
    }
}
