//! Bounded symmetric Hessian models used in the quadratic trust-region model.
//!
//! Whatever the kind, the operator handed to the step computation satisfies
//! `||B|| <= kappa_B`: when the norm estimate exceeds the bound the whole
//! operator is rescaled by `kappa_B / estimate`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Curvature safeguard: a secant pair is used only when `y's >= 1e-15 ||s||^2`.
pub const CURVATURE_THRESHOLD: f64 = 1e-15;

/// Dimension above which the exact-Hessian norm falls back to a Gershgorin bound.
const DENSE_EIGEN_LIMIT: usize = 400;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("exact Hessian model used before a Hessian was supplied")]
    MissingHessian,
    #[error("vector has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("unknown model `{0}`")]
    UnknownModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Zero,
    BbDiag,
    Lbfgs { memory: usize },
    Exact,
}

impl ModelKind {
    pub fn name(self) -> String {
        match self {
            ModelKind::Zero => "none".into(),
            ModelKind::BbDiag => "bb".into(),
            ModelKind::Lbfgs { memory } => format!("lbfgs{memory}"),
            ModelKind::Exact => "exact".into(),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "zero" => Ok(ModelKind::Zero),
            "bb" => Ok(ModelKind::BbDiag),
            "exact" => Ok(ModelKind::Exact),
            _ => s
                .strip_prefix("lbfgs")
                .and_then(|m| m.parse::<usize>().ok())
                .filter(|&m| m > 0)
                .map(|memory| ModelKind::Lbfgs { memory })
                .ok_or_else(|| ModelError::UnknownModel(s.to_string())),
        }
    }
}

/// One BFGS correction in unrolled form: `+ b b' - a a' / (s'a)`.
#[derive(Debug, Clone, PartialEq)]
struct Correction {
    a: Vec<f64>,
    s_dot_a: f64,
    b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianModel {
    pub kind: ModelKind,
    pub kappa_b: f64,
    pub bb_scale: f64,
    pairs: VecDeque<(Vec<f64>, Vec<f64>)>,
    corrections: Vec<Correction>,
    exact: Option<DMatrix<f64>>,
    raw_norm: f64,
    factor: f64,
    pub accepted: usize,
    pub rejected: usize,
}

impl HessianModel {
    pub fn new(kind: ModelKind, kappa_b: f64) -> Self {
        assert!(kappa_b >= 1.0, "kappa_B must be at least 1");
        let mut model = HessianModel {
            kind,
            kappa_b,
            bb_scale: 1.0,
            pairs: VecDeque::new(),
            corrections: Vec::new(),
            exact: None,
            raw_norm: 0.0,
            factor: 1.0,
            accepted: 0,
            rejected: 0,
        };
        model.refresh();
        model
    }

    pub fn is_zero(&self) -> bool {
        self.kind == ModelKind::Zero
    }

    pub fn stored_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Offers the secant pair `(s, y)`; returns whether it passed the curvature safeguard.
    pub fn update(&mut self, s: &[f64], y: &[f64]) -> bool {
        if matches!(self.kind, ModelKind::Zero | ModelKind::Exact) {
            return false;
        }
        let ss = dot(s, s);
        let ys = dot(y, s);
        if !(ss > 0.0 && ys >= CURVATURE_THRESHOLD * ss && ys.is_finite()) {
            self.rejected += 1;
            return false;
        }
        self.accepted += 1;
        self.bb_scale = ss / ys;
        if let ModelKind::Lbfgs { memory } = self.kind {
            self.pairs.push_back((s.to_vec(), y.to_vec()));
            while self.pairs.len() > memory {
                self.pairs.pop_front();
            }
        }
        self.refresh();
        true
    }

    /// Installs the Hessian at the current iterate (exact models only).
    pub fn set_exact(&mut self, h: DMatrix<f64>) {
        if self.kind == ModelKind::Exact {
            self.exact = Some(h);
            self.refresh();
        }
    }

    /// Product with the enforced operator.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut out = self.apply_raw(v)?;
        if self.factor != 1.0 {
            for o in &mut out {
                *o *= self.factor;
            }
        }
        Ok(out)
    }

    /// Upper estimate of `||B||` for the enforced operator (never above `kappa_B`).
    pub fn norm_estimate(&self) -> f64 {
        self.raw_norm * self.factor
    }

    /// Norm estimate before enforcement.
    pub fn raw_norm_estimate(&self) -> f64 {
        self.raw_norm
    }

    /// Multiplier applied to the raw operator, `min(1, kappa_B / estimate)`.
    pub fn enforcement_factor(&self) -> f64 {
        self.factor
    }

    fn apply_raw(&self, v: &[f64]) -> Result<Vec<f64>, ModelError> {
        match self.kind {
            ModelKind::Zero => Ok(vec![0.0; v.len()]),
            ModelKind::BbDiag => Ok(v.iter().map(|x| self.bb_scale * x).collect()),
            ModelKind::Lbfgs { .. } => Ok(self.lbfgs_apply(v, self.corrections.len())),
            ModelKind::Exact => {
                let h = self.exact.as_ref().ok_or(ModelError::MissingHessian)?;
                if h.ncols() != v.len() {
                    return Err(ModelError::LengthMismatch {
                        expected: h.ncols(),
                        got: v.len(),
                    });
                }
                let mut out = vec![0.0; v.len()];
                for (j, vj) in v.iter().enumerate() {
                    if *vj != 0.0 {
                        for (o, hij) in out.iter_mut().zip(h.column(j).iter()) {
                            *o += hij * vj;
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// `B v` using the base `bb_scale I` and the first `upto` corrections.
    fn lbfgs_apply(&self, v: &[f64], upto: usize) -> Vec<f64> {
        let mut out: Vec<f64> = v.iter().map(|x| self.bb_scale * x).collect();
        for c in &self.corrections[..upto] {
            let bv = dot(&c.b, v);
            let av = dot(&c.a, v) / c.s_dot_a;
            for ((o, b), a) in out.iter_mut().zip(&c.b).zip(&c.a) {
                *o += bv * b - av * a;
            }
        }
        out
    }

    fn refresh(&mut self) {
        if let ModelKind::Lbfgs { .. } = self.kind {
            self.corrections.clear();
            let pairs: Vec<_> = self.pairs.iter().cloned().collect();
            for (s, y) in pairs {
                let a = self.lbfgs_apply(&s, self.corrections.len());
                let s_dot_a = dot(&s, &a);
                let ys = dot(&y, &s);
                if s_dot_a > 0.0 && ys > 0.0 {
                    let scale = ys.sqrt();
                    let b = y.iter().map(|v| v / scale).collect();
                    self.corrections.push(Correction { a, s_dot_a, b });
                }
            }
        }
        self.raw_norm = match self.kind {
            ModelKind::Zero => 0.0,
            ModelKind::BbDiag => self.bb_scale.abs(),
            // Positive definite, and each correction raises the top eigenvalue by at most ||b||^2.
            ModelKind::Lbfgs { .. } => {
                self.bb_scale.abs()
                    + self
                        .corrections
                        .iter()
                        .map(|c| dot(&c.b, &c.b))
                        .sum::<f64>()
            }
            ModelKind::Exact => self.exact.as_ref().map_or(0.0, exact_norm),
        };
        self.factor = if self.raw_norm > self.kappa_b {
            self.kappa_b / self.raw_norm
        } else {
            1.0
        };
    }
}

fn exact_norm(h: &DMatrix<f64>) -> f64 {
    if h.nrows() <= DENSE_EIGEN_LIMIT {
        SymmetricEigen::new(h.clone())
            .eigenvalues
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    } else {
        h.row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0_f64, f64::max)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
