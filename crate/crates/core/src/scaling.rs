//! Scaling-factor recurrences defining the per-coordinate trust-region radii.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScalingError {
    #[error("parameter {name} = {value} outside its admissible range {range}")]
    Parameter {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("gradient has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite gradient component")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// `theta (sigma + sum_l g_l^2)^mu`, scaled by `sqrt(vartheta)`.
    AdagradLike,
    /// `theta (sigma + sum_l beta2^(k-l) g_l^2)^(1/2)`.
    AdamLike,
    /// `theta max[sigma, max_l |g_l|] (k+1)^nu`.
    DiminishingMax,
    /// `theta max[sigma, mean_l |g_l|] (k+1)^nu`.
    DiminishingAvg,
}

/// The floor `sigma_i`, uniform unless configured per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Sigma {
    Uniform(f64),
    PerCoordinate(Vec<f64>),
}

impl Sigma {
    pub fn get(&self, i: usize) -> f64 {
        match self {
            Sigma::Uniform(s) => *s,
            Sigma::PerCoordinate(v) => v[i],
        }
    }

    pub fn min(&self) -> f64 {
        match self {
            Sigma::Uniform(s) => *s,
            Sigma::PerCoordinate(v) => v.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

/// Scale parameter: a fixed value, or `sqrt(n)` resolved against the problem dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Theta {
    Fixed(f64),
    SqrtN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRule {
    pub variant: Variant,
    /// Accumulator exponent (AdagradLike) or upper growth power (Diminishing).
    pub mu: f64,
    /// Growth power actually applied by the Diminishing variants, `0 < nu <= mu`.
    pub nu: f64,
    pub theta: Theta,
    pub vartheta: f64,
    pub sigma: Sigma,
    pub beta2: f64,
    /// One weight from `||g||_2`, shared by all coordinates.
    pub aggregated: bool,
}

impl ScalingRule {
    /// Deterministic Adagrad: `mu = 1/2`, `theta = vartheta = 1`, `sigma = 1/100`.
    pub fn adagrad() -> Self {
        ScalingRule {
            variant: Variant::AdagradLike,
            mu: 0.5,
            nu: 0.5,
            theta: Theta::Fixed(1.0),
            vartheta: 1.0,
            sigma: Sigma::Uniform(0.01),
            beta2: 0.9,
            aggregated: false,
        }
    }

    pub fn adam() -> Self {
        ScalingRule {
            variant: Variant::AdamLike,
            ..Self::adagrad()
        }
    }

    /// Running-max rule with `mu = nu = 1/10`.
    pub fn maxg() -> Self {
        ScalingRule {
            variant: Variant::DiminishingMax,
            mu: 0.1,
            nu: 0.1,
            ..Self::adagrad()
        }
    }

    pub fn avgg() -> Self {
        ScalingRule {
            variant: Variant::DiminishingAvg,
            ..Self::maxg()
        }
    }

    pub fn with_aggregated(mut self, aggregated: bool) -> Self {
        self.aggregated = aggregated;
        self
    }

    pub fn with_theta(mut self, theta: Theta) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = Sigma::Uniform(sigma);
        self
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_nu(mut self, nu: f64) -> Self {
        self.nu = nu;
        self
    }

    pub fn theta_value(&self, n: usize) -> f64 {
        match self.theta {
            Theta::Fixed(t) => t,
            Theta::SqrtN => (n as f64).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<(), ScalingError> {
        let check = |name, value: f64, ok: bool, range| {
            if ok {
                Ok(())
            } else {
                Err(ScalingError::Parameter { name, value, range })
            }
        };
        if let Theta::Fixed(t) = self.theta {
            check("theta", t, t > 0.0 && t.is_finite(), "(0, inf)")?;
        }
        let sigmas: Vec<f64> = match &self.sigma {
            Sigma::Uniform(s) => vec![*s],
            Sigma::PerCoordinate(v) => v.clone(),
        };
        for s in sigmas {
            check("sigma", s, s > 0.0 && s <= 1.0, "(0, 1]")?;
        }
        match self.variant {
            Variant::AdagradLike => {
                check("mu", self.mu, self.mu > 0.0 && self.mu < 1.0, "(0, 1)")?;
                check(
                    "vartheta",
                    self.vartheta,
                    self.vartheta > 0.0 && self.vartheta <= 1.0,
                    "(0, 1]",
                )?;
            }
            Variant::AdamLike => {
                check(
                    "beta2",
                    self.beta2,
                    self.beta2 > 0.0 && self.beta2 < 1.0,
                    "(0, 1)",
                )?;
            }
            Variant::DiminishingMax | Variant::DiminishingAvg => {
                check("mu", self.mu, self.mu > 0.0 && self.mu < 1.0, "(0, 1)")?;
                check(
                    "nu",
                    self.nu,
                    self.nu > 0.0 && self.nu <= self.mu,
                    "(0, mu]",
                )?;
            }
        }
        Ok(())
    }

    /// Lower bound on every weight the rule can produce for dimension `n`.
    pub fn as4_floor(&self, n: usize) -> f64 {
        let theta = self.theta_value(n);
        let sigma = self.sigma.min();
        match self.variant {
            Variant::AdagradLike => theta * self.vartheta.sqrt() * sigma.powf(self.mu),
            Variant::AdamLike => theta * sigma.sqrt(),
            Variant::DiminishingMax | Variant::DiminishingAvg => theta * sigma,
        }
    }
}

/// Accumulator state owned by one run.
///
/// Accumulator contents by variant: AdagradLike `sigma_i + sum g^2`,
/// AdamLike the decayed sum `sum beta2^(k-l) g^2` (sigma added when weights are read),
/// DiminishingMax the running max `|g|`, DiminishingAvg the running sum `|g|`.
/// Aggregated rules keep a single entry fed by `||g||_2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingState {
    pub n: usize,
    /// Number of gradients absorbed; the latest one has index `updates - 1`.
    pub updates: usize,
    pub acc: Vec<f64>,
}

impl ScalingState {
    pub fn new(rule: &ScalingRule, n: usize) -> Self {
        let len = if rule.aggregated { 1 } else { n };
        let acc = (0..len)
            .map(|i| match rule.variant {
                Variant::AdagradLike if rule.aggregated => rule.sigma.min(),
                Variant::AdagradLike => rule.sigma.get(i),
                _ => 0.0,
            })
            .collect();
        ScalingState { n, updates: 0, acc }
    }

    /// Index of the most recent gradient.
    pub fn k(&self) -> usize {
        self.updates.saturating_sub(1)
    }

    /// Absorbs `g_k` (the current gradient is part of the sum that defines `w_k`).
    pub fn update(&mut self, rule: &ScalingRule, g: &[f64]) -> Result<(), ScalingError> {
        if g.len() != self.n {
            return Err(ScalingError::LengthMismatch {
                expected: self.n,
                got: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(ScalingError::NonFinite);
        }
        let sq: Vec<f64> = if rule.aggregated {
            vec![g.iter().map(|v| v * v).sum()]
        } else {
            g.iter().map(|v| v * v).collect()
        };
        for (a, s) in self.acc.iter_mut().zip(sq) {
            match rule.variant {
                Variant::AdagradLike => *a += s,
                Variant::AdamLike => *a = rule.beta2 * *a + s,
                Variant::DiminishingMax => *a = a.max(s.sqrt()),
                Variant::DiminishingAvg => *a += s.sqrt(),
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// `v_{i,k}` of the Diminishing class (running max or running mean of `|g_i|`).
    pub fn diminishing_v(&self, rule: &ScalingRule) -> Vec<f64> {
        match rule.variant {
            Variant::DiminishingAvg => {
                let count = self.updates.max(1) as f64;
                self.acc.iter().map(|a| a / count).collect()
            }
            _ => self.acc.clone(),
        }
    }

    /// Current weights `w_k`, one per coordinate.
    pub fn weights(&self, rule: &ScalingRule) -> Vec<f64> {
        let theta = rule.theta_value(self.n);
        let growth = ((self.k() + 1) as f64).powf(rule.nu);
        let v = self.diminishing_v(rule);
        let w: Vec<f64> = self
            .acc
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let sigma = if rule.aggregated {
                    rule.sigma.min()
                } else {
                    rule.sigma.get(i)
                };
                match rule.variant {
                    Variant::AdagradLike => rule.vartheta.sqrt() * theta * a.powf(rule.mu),
                    Variant::AdamLike => theta * (sigma + a).sqrt(),
                    Variant::DiminishingMax | Variant::DiminishingAvg => {
                        theta * sigma.max(v[i]) * growth
                    }
                }
            })
            .collect();
        if rule.aggregated {
            vec![w[0]; self.n]
        } else {
            w
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn adagrad_accumulator_includes_sigma_and_current_gradient() {
        let rule = ScalingRule::adagrad();
        let mut st = ScalingState::new(&rule, 1);
        st.update(&rule, &[1.0]).unwrap();
        assert!((st.acc[0] - 1.01).abs() < 1e-15);
        let w = st.weights(&rule);
        assert!((w[0] - 1.01f64.sqrt()).abs() < 1e-15);
        assert!((w[0] - 1.004987).abs() < 1e-6);
    }

    #[test]
    fn adam_decayed_sum() {
        let rule = ScalingRule::adam();
        let mut st = ScalingState::new(&rule, 1);
        st.update(&rule, &[1.0]).unwrap();
        st.update(&rule, &[0.0]).unwrap();
        assert!((st.acc[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn running_max() {
        let rule = ScalingRule::maxg();
        let mut st = ScalingState::new(&rule, 1);
        for g in [0.2, 0.5, 0.3] {
            st.update(&rule, &[g]).unwrap();
        }
        assert_eq!(st.acc[0], 0.5);
    }

    #[test]
    fn zero_history_gives_floor() {
        let rule = ScalingRule::adagrad();
        let mut st = ScalingState::new(&rule, 2);
        st.update(&rule, &[0.0, 0.0]).unwrap();
        for w in st.weights(&rule) {
            assert!((w - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn diminishing_first_weight() {
        let rule = ScalingRule::maxg();
        let mut st = ScalingState::new(&rule, 1);
        st.update(&rule, &[-0.5]).unwrap();
        assert_eq!(st.weights(&rule), vec![0.5]);
    }

    #[test]
    fn floors() {
        assert!((ScalingRule::adagrad().as4_floor(5) - 0.1).abs() < 1e-15);
        assert!((ScalingRule::maxg().as4_floor(5) - 0.01).abs() < 1e-15);
        assert!((ScalingRule::adam().as4_floor(5) - 0.1).abs() < 1e-15);
        let s = ScalingRule::adagrad().with_theta(Theta::SqrtN);
        assert!((s.as4_floor(4) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_and_length_errors() {
        let rule = ScalingRule::adagrad();
        let mut st = ScalingState::new(&rule, 2);
        assert_eq!(
            st.update(&rule, &[f64::NAN, 0.0]),
            Err(ScalingError::NonFinite)
        );
        assert!(matches!(
            st.update(&rule, &[1.0]),
            Err(ScalingError::LengthMismatch { .. })
        ));
        assert_eq!(st.updates, 0);
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        assert!(ScalingRule::adagrad().with_mu(1.0).validate().is_err());
        assert!(ScalingRule::maxg().with_nu(0.2).validate().is_err());
        assert!(ScalingRule::adagrad().with_sigma(0.0).validate().is_err());
        assert!(ScalingRule::maxg().validate().is_ok());
    }

    fn rules() -> Vec<ScalingRule> {
        let mut out = Vec::new();
        for base in [
            ScalingRule::adagrad(),
            ScalingRule::adam(),
            ScalingRule::maxg(),
            ScalingRule::avgg(),
        ] {
            out.push(base.clone());
            out.push(base.clone().with_aggregated(true));
            out.push(base.with_theta(Theta::SqrtN));
        }
        out
    }

    proptest! {
        #[test]
        fn weights_respect_floor_and_monotonicity(
            grads in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 3), 1..30)
        ) {
            for rule in rules() {
                let mut st = ScalingState::new(&rule, 3);
                let floor = rule.as4_floor(3);
                let mut prev_w: Option<Vec<f64>> = None;
                let mut prev_v: Option<Vec<f64>> = None;
                for (k, g) in grads.iter().enumerate() {
                    st.update(&rule, g).unwrap();
                    let w = st.weights(&rule);
                    for wi in &w {
                        prop_assert!(*wi >= floor * (1.0 - 1e-15));
                    }
                    if rule.aggregated {
                        prop_assert!(w.iter().all(|x| *x == w[0]));
                    }
                    if matches!(rule.variant, Variant::AdagradLike | Variant::DiminishingMax) {
                        if let Some(p) = &prev_w {
                            for (a, b) in w.iter().zip(p) {
                                prop_assert!(a >= b);
                            }
                        }
                    }
                    let theta = rule.theta_value(3);
                    let h = if rule.variant == Variant::DiminishingAvg { (k + 1) as f64 } else { 1.0 };
                    if matches!(rule.variant, Variant::DiminishingMax | Variant::DiminishingAvg) && !rule.aggregated {
                        let v = st.diminishing_v(&rule);
                        for i in 0..3 {
                            // v_{i,k} >= |g_{i,k}| / h(k)
                            prop_assert!(v[i] * h >= g[i].abs() * (1.0 - 1e-12));
                            let base = theta * rule.sigma.get(i).max(v[i]);
                            let kk = (k + 1) as f64;
                            prop_assert!(w[i] >= base * kk.powf(rule.nu) * (1.0 - 1e-12));
                            prop_assert!(w[i] <= base * kk.powf(rule.mu) * (1.0 + 1e-12));
                            if rule.variant == Variant::DiminishingMax {
                                if let Some(pv) = &prev_v {
                                    if v[i] > pv[i] {
                                        prop_assert!(v[i] <= g[i].abs());
                                    }
                                }
                            }
                        }
                        prev_v = Some(v);
                    }
                    prev_w = Some(w);
                }
            }
        }
    }
}
