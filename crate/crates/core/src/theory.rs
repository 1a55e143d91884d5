//! Numerical checks of the complexity analysis: the series lemma, the lower
//! Lambert branch, the complexity constants and trace-level envelope / decrease checks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problems::ProblemInstance;
use crate::solver::{Astr1Config, IterationTrace, StepDetail};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TheoryError {
    #[error("{what} = {value} is outside its domain {domain}")]
    Domain {
        what: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("a gradient Lipschitz constant is required")]
    MissingLipschitz,
    #[error("objective evaluation failed at the starting point")]
    Objective,
}

fn domain(what: &'static str, value: f64, domain: &'static str) -> TheoryError {
    TheoryError::Domain {
        what,
        value,
        domain,
    }
}

/// Problem and algorithm constants entering the bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Gradient Lipschitz constant, if known.
    pub lipschitz: Option<f64>,
    /// Whether `lipschitz` is the exact constant rather than an estimate.
    pub lipschitz_exact: bool,
    /// `f(x_0) - f_low`.
    pub gamma0: f64,
    pub n: usize,
    pub tau: f64,
    pub kappa_b: f64,
    pub theta: f64,
    pub vartheta: f64,
    /// Smallest `sigma_i` of the scaling rule.
    pub sigma: f64,
    /// Smallest weight the rule can produce (the floor in the per-iteration decrease).
    pub weight_floor: f64,
}

impl TheoryParams {
    /// Constants for running `cfg` on `problem` from its standard start.
    pub fn for_run(problem: &ProblemInstance, cfg: &Astr1Config) -> Result<Self, TheoryError> {
        let f0 = problem
            .value(&problem.x0)
            .map_err(|_| TheoryError::Objective)?;
        let gamma0 = f0 - problem.f_low;
        if !(gamma0 >= 0.0) {
            return Err(domain("Gamma0", gamma0, "[0, inf)"));
        }
        let hint = problem.lipschitz_hint;
        Ok(TheoryParams {
            lipschitz: hint.map(|h| h.value),
            lipschitz_exact: hint.is_some_and(|h| h.exact),
            gamma0,
            n: problem.n,
            tau: cfg.tau,
            kappa_b: cfg.kappa_b,
            theta: cfg.scaling.theta_value(problem.n),
            vartheta: cfg.scaling.vartheta,
            sigma: cfg.scaling.sigma.min(),
            weight_floor: cfg.scaling.as4_floor(problem.n),
        })
    }

    fn l(&self) -> Result<f64, TheoryError> {
        match self.lipschitz {
            Some(l) if l >= 0.0 => Ok(l),
            Some(l) => Err(domain("L", l, "[0, inf)")),
            None => Err(TheoryError::MissingLipschitz),
        }
    }

    /// `kappa_B (kappa_B + L)`.
    pub fn kappa_bbl(&self) -> Result<f64, TheoryError> {
        Ok(self.kappa_b * (self.kappa_b + self.l()?))
    }
}

/// Both sides of the series inequality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesBound {
    /// `sum_j a_j / (xi + b_j)^alpha`, `b_j` the prefix sums.
    pub lhs: f64,
    pub rhs: f64,
    /// Simpler bound: `(xi + b_k)^(1-alpha) / (1-alpha)` below one, `xi^(1-alpha) / (alpha-1)` above.
    pub majorant: Option<f64>,
}

impl SeriesBound {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs && self.majorant.is_none_or(|m| self.rhs <= m)
    }
}

/// `sum a_j/(xi+b_j)^alpha <= ((xi+b_k)^(1-alpha) - xi^(1-alpha))/(1-alpha)`, or
/// `log((xi+b_k)/xi)` when `alpha = 1`.
pub fn series_bound(a: &[f64], xi: f64, alpha: f64) -> Result<SeriesBound, TheoryError> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(domain("xi", xi, "(0, inf)"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(domain("alpha", alpha, "(0, inf)"));
    }
    if let Some(bad) = a.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(domain("a_j", *bad, "[0, inf)"));
    }
    let mut b = 0.0;
    let mut lhs = 0.0;
    for aj in a {
        b += aj;
        lhs += aj / (xi + b).powf(alpha);
    }
    let log_ratio = (b / xi).ln_1p();
    if alpha == 1.0 {
        return Ok(SeriesBound {
            lhs,
            rhs: log_ratio,
            majorant: None,
        });
    }
    let e = 1.0 - alpha;
    // (xi^e)(exp(e log(1 + b/xi)) - 1)/e, accurate as alpha -> 1.
    let rhs = xi.powf(e) * (e * log_ratio).exp_m1() / e;
    let majorant = if alpha < 1.0 {
        (xi + b).powf(e) / e
    } else {
        xi.powf(e) / -e
    };
    Ok(SeriesBound {
        lhs,
        rhs,
        majorant: Some(majorant),
    })
}

const INV_E: f64 = 0.367_879_441_171_442_33;

/// Lower real branch `W_{-1}(x)` for `x` in `[-1/e, 0)`.
pub fn lambert_w_m1(x: f64) -> Result<f64, TheoryError> {
    if !(x < 0.0) || x.is_nan() {
        return Err(domain("x", x, "[-1/e, 0)"));
    }
    // 1 + e x, with the rounding of 1/e absorbed at the branch point.
    let t = 1.0 + x / INV_E;
    if t < -1e-15 {
        return Err(domain("x", x, "[-1/e, 0)"));
    }
    if t <= 0.0 {
        return Ok(-1.0);
    }
    let mut w = if t < 0.25 {
        // branch-point series in p = -sqrt(2(1 + e x))
        let p = -(2.0 * t).sqrt();
        -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p * p * p
    } else {
        let l1 = (-x).ln();
        let l2 = (-l1).ln();
        l1 - l2 + l2 / l1
    };
    for _ in 0..100 {
        let ew = w.exp();
        let f = w * ew - x;
        if f.abs() <= 1e-15 * x.abs() {
            break;
        }
        let wp1 = w + 1.0;
        if wp1 == 0.0 {
            break;
        }
        let next = w - f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1));
        if !next.is_finite() || next > -1.0 {
            // Halley overshot across the branch point; bisect towards it instead
            w = 0.5 * (w - 1.0);
            continue;
        }
        if next == w {
            break;
        }
        w = next;
    }
    Ok(w)
}

/// `W_{-1}(-e^l)` for `l <= -1`, solved as `w + ln(-w) = l` so that arguments far below
/// the `f64` range stay usable.
pub fn lambert_w_m1_exp(l: f64) -> Result<f64, TheoryError> {
    if !(l <= -1.0 + 1e-15) {
        return Err(domain("l", l, "(-inf, -1]"));
    }
    if l >= -1.0 {
        return Ok(-1.0);
    }
    if l > -700.0 {
        return lambert_w_m1(-l.exp());
    }
    let mut w = l - (-l).ln();
    for _ in 0..50 {
        let h = w + (-w).ln() - l;
        let next = w - h * w / (w + 1.0);
        if next == w {
            break;
        }
        w = next;
    }
    Ok(w)
}

/// Bound on the first-order complexity constant for the Adagrad-like rule with exponent `mu`.
///
/// `mu < 1/2`, `mu = 1/2` and `mu > 1/2` use the three regimes of the analysis; `mu` must
/// lie in `[0.01, 0.99]` so the `1/(1 - 2 mu)`-type exponents stay finite.
pub fn kappa_constants(p: &TheoryParams, mu: f64) -> Result<f64, TheoryError> {
    if !(0.01..=0.99).contains(&mu) {
        return Err(domain("mu", mu, "[0.01, 0.99]"));
    }
    let l = p.l()?;
    let n = p.n as f64;
    let (tau, kb, th, vt, sg, g0) = (p.tau, p.kappa_b, p.theta, p.vartheta, p.sigma, p.gamma0);
    let kbbl = kb * (kb + l);
    let terms: Vec<f64> = if mu == 0.5 {
        let c = 8.0 * n * kbbl / (tau * vt.powf(1.5) * th);
        let w = lambert_w_m1(-sg / c)?;
        vec![
            0.5 * (2.0 * g0 * vt * th * th / (n * (kb + l))).exp(),
            c * c * w * w / (2.0 * sg),
        ]
    } else if mu < 0.5 {
        let e = 1.0 - 2.0 * mu;
        vec![
            (2f64.powf(2.0 * mu) * vt * e * th * th * g0 / (n * (kb + l))).powf(1.0 / e),
            (4.0 * n * kbbl / (e * tau * th * sg.powf(mu) * vt.powf(1.5))).powf(1.0 / mu),
        ]
    } else {
        let inner =
            g0 * th + n * (kb + l) * sg.powf(1.0 - 2.0 * mu) / (2.0 * vt * th * (2.0 * mu - 1.0));
        vec![
            (2f64.powf(1.0 + mu) * kb / (tau * sg.powf(mu) * vt.sqrt()) * inner)
                .powf(1.0 / (1.0 - mu)),
        ]
    };
    Ok(terms.into_iter().fold(sg, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub kappa: f64,
    /// `max_k sum_{j<=k} ||g_j||^2 / kappa`.
    pub max_ratio: f64,
    pub first_violation: Option<usize>,
    pub iterates: usize,
}

impl EnvelopeReport {
    pub fn holds(&self) -> bool {
        self.max_ratio <= 1.0
    }
}

/// Checks `sum_{j<=k} ||g_j||^2 <= kappa` at every recorded iterate.
pub fn envelope_check(trace: &IterationTrace, kappa: f64) -> EnvelopeReport {
    let norms = trace.gradient_norms();
    let mut sum = 0.0;
    let mut max_ratio: f64 = 0.0;
    let mut first_violation = None;
    for (k, g) in norms.iter().enumerate() {
        sum += g * g;
        let r = sum / kappa;
        if r > 1.0 && first_violation.is_none() {
            first_violation = Some(k);
        }
        max_ratio = max_ratio.max(r);
    }
    EnvelopeReport {
        kappa,
        max_ratio,
        first_violation,
        iterates: norms.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MingReport {
    pub j_eta: f64,
    /// No recorded iteration lies beyond `j_eta`, so the bracket claim holds vacuously.
    pub vacuous: bool,
    /// Iterations `j > j_eta` examined.
    pub checked: usize,
    /// Smallest `tau sigma_min - kappa_BBL / w_min,j` over the examined iterations.
    pub min_bracket: Option<f64>,
    pub eta: f64,
}

impl MingReport {
    pub fn holds(&self) -> bool {
        self.min_bracket.is_none_or(|b| b > self.eta)
    }
}

/// `j_eta = (kappa_BBL / (theta sigma_min (tau sigma_min - eta)))^(1/nu)`, past which the
/// decrease bracket of the diminishing rules exceeds `eta`.
pub fn ming_threshold(p: &TheoryParams, eta: f64, nu: f64) -> Result<f64, TheoryError> {
    let cap = p.tau * p.sigma;
    if !(eta > 0.0 && eta < cap) {
        return Err(domain("eta", eta, "(0, tau sigma_min)"));
    }
    if !(nu > 0.0 && nu < 1.0) {
        return Err(domain("nu", nu, "(0, 1)"));
    }
    Ok((p.kappa_bbl()? / (p.theta * p.sigma * (cap - eta))).powf(1.0 / nu))
}

/// Evaluates the bracket `tau sigma_min - kappa_BBL / w_min,j` on every recorded `j > j_eta`.
pub fn ming_check(
    trace: &IterationTrace,
    p: &TheoryParams,
    eta: f64,
    nu: f64,
) -> Result<MingReport, TheoryError> {
    let j_eta = ming_threshold(p, eta, nu)?;
    let kbbl = p.kappa_bbl()?;
    let mut min_bracket: Option<f64> = None;
    let mut checked = 0;
    for r in &trace.records {
        if (r.k as f64) <= j_eta {
            continue;
        }
        if let StepDetail::TrustRegion { w_min, .. } = r.detail {
            let b = p.tau * p.sigma - kbbl / w_min;
            min_bracket = Some(min_bracket.map_or(b, |m| m.min(b)));
            checked += 1;
        }
    }
    Ok(MingReport {
        j_eta,
        vacuous: checked == 0,
        checked,
        min_bracket,
        eta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecreaseReport {
    /// `max_j max(f(x_{j+1}) - rhs_j, 0)`.
    pub max_violation: f64,
    pub worst_iteration: Option<usize>,
    pub checked: usize,
}

/// Evaluates the guaranteed per-iteration decrease
/// `f(x_{j+1}) <= f(x_j) - tau s_min/(2 kappa_B) sum g^2/w + (kappa_B + L)/2 sum g^2/w^2`
/// along an instrumented trace.
pub fn decrease_check(
    trace: &IterationTrace,
    p: &TheoryParams,
) -> Result<DecreaseReport, TheoryError> {
    let l = p.l()?;
    let f = trace
        .f_values()
        .ok_or(domain("instrumented f", f64::NAN, "present"))?;
    let mut max_violation: f64 = 0.0;
    let mut worst_iteration = None;
    for (j, r) in trace.records.iter().enumerate() {
        let StepDetail::TrustRegion {
            sum_g2_over_w,
            sum_g2_over_w2,
            ..
        } = r.detail
        else {
            continue;
        };
        let rhs = f[j] - p.tau * p.weight_floor * sum_g2_over_w / (2.0 * p.kappa_b)
            + 0.5 * (p.kappa_b + l) * sum_g2_over_w2;
        let v = f[j + 1] - rhs;
        if v > max_violation {
            max_violation = v;
            worst_iteration = Some(j);
        }
    }
    Ok(DecreaseReport {
        max_violation,
        worst_iteration,
        checked: trace.records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> TheoryParams {
        TheoryParams {
            lipschitz: Some(1.0),
            lipschitz_exact: true,
            gamma0: 0.5,
            n: 1,
            tau: 0.1,
            kappa_b: 1.0,
            theta: 1.0,
            vartheta: 1.0,
            sigma: 0.01,
            weight_floor: 0.1,
        }
    }

    #[test]
    fn series_examples() {
        let b = series_bound(&[1.0, 1.0, 1.0], 1.0, 1.0).unwrap();
        assert!((b.lhs - 13.0 / 12.0).abs() < 1e-15);
        assert!((b.rhs - 4f64.ln()).abs() < 1e-15);
        assert!(b.holds());
        let z = series_bound(&[0.0; 4], 1.0, 0.3).unwrap();
        assert_eq!((z.lhs, z.rhs), (0.0, 0.0));
        assert!(series_bound(&[1.0], 0.0, 1.0).is_err());
        assert!(series_bound(&[-1.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn series_continuity_at_one() {
        let a = [0.5, 2.0, 1.5, 0.1];
        let mid = series_bound(&a, 0.3, 1.0).unwrap().rhs;
        for alpha in [1.0 - 1e-6, 1.0 + 1e-6] {
            let r = series_bound(&a, 0.3, alpha).unwrap().rhs;
            assert!((r - mid).abs() <= 1e-4 * mid);
        }
    }

    #[test]
    fn lambert_values() {
        assert_eq!(lambert_w_m1(-INV_E).unwrap(), -1.0);
        let w = lambert_w_m1(-0.05).unwrap();
        assert!((w + 4.499_755_288_523_487).abs() < 1e-12);
        let w = lambert_w_m1(-6.25e-5).unwrap();
        assert!((w + 12.180_151_719_904_271).abs() < 1e-11);
        assert!(lambert_w_m1(0.0).is_err());
        assert_eq!(lambert_w_m1_exp(-1.0).unwrap(), -1.0);
        let w = lambert_w_m1_exp(-1001.0).unwrap();
        assert!((w + (-w).ln() + 1001.0).abs() < 1e-12);
        assert!((lambert_w_m1_exp(0.05f64.ln()).unwrap() + 4.499_755_288_523_487).abs() < 1e-12);
        assert!(lambert_w_m1(-0.5).is_err());
    }

    #[test]
    fn kappa_two_reference() {
        let k = kappa_constants(&params(), 0.5).unwrap();
        // third term dominates: (1/0.02) (160)^2 W^2
        assert!((k - 189_895_802.777_455_33).abs() < 1e-6 * k);
    }

    #[test]
    fn kappa_regimes_finite_and_above_sigma() {
        for mu in [0.01, 0.3, 0.49, 0.5, 0.51, 0.7] {
            let k = kappa_constants(&params(), mu).unwrap();
            assert!(k.is_finite() && k >= 0.01, "mu={mu}: {k}");
        }
        // exponent 1/(1 - mu) = 100: legitimately beyond f64
        assert!(kappa_constants(&params(), 0.99).unwrap() >= 0.01);
        assert!(kappa_constants(&params(), 0.995).is_err());
        let mut p = params();
        p.lipschitz = None;
        assert_eq!(kappa_constants(&p, 0.5), Err(TheoryError::MissingLipschitz));
    }

    #[test]
    fn ming_examples() {
        let mut p = params();
        let j = ming_threshold(&p, 0.0005, 0.1).unwrap();
        assert!((j / (2.0f64 / (0.01 * 0.0005)).powi(10) - 1.0).abs() < 1e-12);
        p.lipschitz = Some(0.0);
        p.sigma = 1.0;
        p.tau = 1.0;
        assert!((ming_threshold(&p, 0.5, 0.5).unwrap() - 4.0).abs() < 1e-12);
        assert!(ming_threshold(&p, 1.0, 0.5).is_err());
    }
}
