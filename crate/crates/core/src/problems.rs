//! Smooth unconstrained test problems with analytic derivatives.
//!
//! Every problem is written as a sum of element functions, each of which
//! reports its value together with a sparse gradient and a sparse Hessian.
//! Least-squares families are expressed through their residuals, so the
//! Gauss-Newton part and the residual curvature are assembled in one place.
//!
//! [`NoisyOracle`] wraps an instance and contaminates every scalar it returns
//! with relative Gaussian noise drawn deterministically from `(seed, position)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while building or evaluating a problem.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("problem `{name}` does not accept dimension {n}: {reason}")]
    InvalidDimension {
        name: String,
        n: usize,
        reason: &'static str,
    },
    #[error("point has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("evaluation produced a non-finite value")]
    NonFinite,
    #[error("problem `{0}` has no analytic Hessian")]
    NoHessian(String),
}

/// Every family in the catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Rosenbr,
    Broyden3d,
    Broydenbd,
    Arwhead,
    Tridia,
    Woods,
    Powellsg,
    Engval1,
    Beale,
    Box3,
    Cube,
    Vardim,
    Nondquar,
    Nlminsurf,
    Dixmaana,
    Helix,
    Booth,
    Arglina,
}

impl Family {
    pub const ALL: [Family; 18] = [
        Family::Rosenbr,
        Family::Broyden3d,
        Family::Broydenbd,
        Family::Arwhead,
        Family::Tridia,
        Family::Woods,
        Family::Powellsg,
        Family::Engval1,
        Family::Beale,
        Family::Box3,
        Family::Cube,
        Family::Vardim,
        Family::Nondquar,
        Family::Nlminsurf,
        Family::Dixmaana,
        Family::Helix,
        Family::Booth,
        Family::Arglina,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Rosenbr => "rosenbr",
            Family::Broyden3d => "broyden3d",
            Family::Broydenbd => "broydenbd",
            Family::Arwhead => "arwhead",
            Family::Tridia => "tridia",
            Family::Woods => "woods",
            Family::Powellsg => "powellsg",
            Family::Engval1 => "engval1",
            Family::Beale => "beale",
            Family::Box3 => "box3",
            Family::Cube => "cube",
            Family::Vardim => "vardim",
            Family::Nondquar => "nondquar",
            Family::Nlminsurf => "nlminsurf",
            Family::Dixmaana => "dixmaana",
            Family::Helix => "helix",
            Family::Booth => "booth",
            Family::Arglina => "arglina",
        }
    }

    /// Dimension used by the small benchmark suite.
    pub fn default_dim(self) -> usize {
        match self {
            Family::Beale | Family::Cube | Family::Booth => 2,
            Family::Box3 | Family::Helix => 3,
            Family::Woods | Family::Powellsg | Family::Dixmaana => 12,
            Family::Nlminsurf => 16,
            _ => 10,
        }
    }

    /// Quadratic objectives, for which the gradient Lipschitz constant is known exactly.
    pub fn is_quadratic(self) -> bool {
        matches!(self, Family::Tridia | Family::Booth | Family::Arglina)
    }

    /// Sum-of-squares objectives (f >= 0 everywhere).
    pub fn is_sum_of_squares(self) -> bool {
        !matches!(
            self,
            Family::Arwhead | Family::Engval1 | Family::Dixmaana | Family::Nlminsurf
        )
    }

    fn check_dim(self, n: usize) -> Result<(), ProblemError> {
        let bad = |reason| {
            Err(ProblemError::InvalidDimension {
                name: self.name().to_string(),
                n,
                reason,
            })
        };
        match self {
            Family::Beale | Family::Cube | Family::Booth if n != 2 => bad("fixed dimension 2"),
            Family::Box3 | Family::Helix if n != 3 => bad("fixed dimension 3"),
            Family::Woods | Family::Powellsg if n == 0 || n % 4 != 0 => {
                bad("must be a positive multiple of 4")
            }
            Family::Dixmaana if n == 0 || n % 3 != 0 => bad("must be a positive multiple of 3"),
            Family::Rosenbr | Family::Arwhead | Family::Engval1 if n < 2 => bad("must be >= 2"),
            Family::Nondquar if n < 3 => bad("must be >= 3"),
            Family::Nlminsurf => {
                let p = isqrt(n);
                if n == 0 || p * p != n {
                    bad("must be a positive perfect square")
                } else {
                    Ok(())
                }
            }
            _ if n == 0 => bad("must be positive"),
            _ => Ok(()),
        }
    }

    fn start(self, n: usize) -> Vec<f64> {
        match self {
            Family::Rosenbr => (0..n)
                .map(|i| if i % 2 == 0 { -1.2 } else { 1.0 })
                .collect(),
            Family::Broyden3d | Family::Broydenbd => vec![-1.0; n],
            Family::Arwhead | Family::Tridia | Family::Arglina => vec![1.0; n],
            Family::Woods => (0..n)
                .map(|i| if i % 2 == 0 { -3.0 } else { -1.0 })
                .collect(),
            Family::Powellsg => (0..n).map(|i| [3.0, -1.0, 0.0, 1.0][i % 4]).collect(),
            Family::Engval1 | Family::Dixmaana => vec![2.0; n],
            Family::Beale => vec![1.0, 1.0],
            Family::Box3 => vec![0.0, 10.0, 20.0],
            Family::Cube => vec![-1.2, 1.0],
            Family::Vardim => (1..=n).map(|i| 1.0 - i as f64 / n as f64).collect(),
            Family::Nondquar => (0..n)
                .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
                .collect(),
            Family::Nlminsurf => vec![0.0; n],
            Family::Helix => vec![-1.0, 0.0, 0.0],
            Family::Booth => vec![0.0, 0.0],
        }
    }

    fn f_low(self, n: usize) -> f64 {
        match self {
            Family::Dixmaana | Family::Nlminsurf => 1.0,
            // 2n residuals, the first n of which can be zeroed but the remaining n sum to n.
            Family::Arglina => n as f64,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = ProblemError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .iter()
            .copied()
            .find(|fam| fam.name() == s)
            .ok_or_else(|| ProblemError::UnknownProblem(s.to_string()))
    }
}

fn isqrt(n: usize) -> usize {
    let mut p = (n as f64).sqrt() as usize;
    while p * p > n {
        p -= 1;
    }
    while (p + 1) * (p + 1) <= n {
        p += 1;
    }
    p
}

/// Estimate of the gradient Lipschitz constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzHint {
    pub value: f64,
    /// `true` only when `value` is the exact constant (quadratic problems).
    pub exact: bool,
}

/// A catalog problem at a fixed dimension, with its standard starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub name: String,
    pub family: Family,
    pub n: usize,
    pub x0: Vec<f64>,
    pub f_low: f64,
    pub lipschitz_hint: Option<LipschitzHint>,
}

/// Requested derivative order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Order {
    Value,
    Gradient,
    Hessian,
}

/// Result of [`ProblemInstance::evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub f: f64,
    pub g: Option<Vec<f64>>,
    pub h: Option<DMatrix<f64>>,
}

/// Build a catalog problem.
pub fn make_problem(name: &str, n: usize) -> Result<ProblemInstance, ProblemError> {
    let family: Family = name.parse()?;
    family.check_dim(n)?;
    let mut problem = ProblemInstance {
        name: family.name().to_string(),
        family,
        n,
        x0: family.start(n),
        f_low: family.f_low(n),
        lipschitz_hint: None,
    };
    problem.lipschitz_hint = Some(if family.is_quadratic() {
        let h = problem.hessian(&problem.x0)?;
        let eig = SymmetricEigen::new(h);
        LipschitzHint {
            value: eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
            exact: true,
        }
    } else {
        LipschitzHint {
            value: problem.sample_lipschitz(32, 0x5eed),
            exact: false,
        }
    });
    Ok(problem)
}

/// Every catalog family at its default dimension.
pub fn default_suite() -> Vec<ProblemInstance> {
    Family::ALL
        .iter()
        .map(|fam| make_problem(fam.name(), fam.default_dim()).expect("default dims are valid"))
        .collect()
}

impl ProblemInstance {
    /// Function value and, on request, gradient and dense Hessian.
    pub fn evaluate(&self, x: &[f64], order: Order) -> Result<Evaluation, ProblemError> {
        if x.len() != self.n {
            return Err(ProblemError::LengthMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ProblemError::NonFinite);
        }
        let mut acc = Accumulator::new(self.n, order);
        self.assemble(x, &mut acc)?;
        acc.finish()
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, ProblemError> {
        Ok(self.evaluate(x, Order::Value)?.f)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, ProblemError> {
        Ok(self
            .evaluate(x, Order::Gradient)?
            .g
            .expect("gradient requested"))
    }

    pub fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>, ProblemError> {
        Ok(self
            .evaluate(x, Order::Hessian)?
            .h
            .expect("hessian requested"))
    }

    /// All catalog families provide analytic Hessians.
    pub fn has_hessian(&self) -> bool {
        true
    }

    pub fn lipschitz_is_exact(&self) -> bool {
        self.lipschitz_hint.is_some_and(|h| h.exact)
    }

    /// Largest gradient-difference quotient over random pairs in the unit box around `x0`.
    fn sample_lipschitz(&self, pairs: usize, seed: u64) -> f64 {
        use rand::RngExt;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best = 0.0_f64;
        for _ in 0..pairs {
            let a: Vec<f64> = self
                .x0
                .iter()
                .map(|v| v + rng.random_range(-0.5..0.5))
                .collect();
            let b: Vec<f64> = self
                .x0
                .iter()
                .map(|v| v + rng.random_range(-0.5..0.5))
                .collect();
            if let (Ok(ga), Ok(gb)) = (self.gradient(&a), self.gradient(&b)) {
                let dg = dist(&ga, &gb);
                let dx = dist(&a, &b);
                if dx > 0.0 && dg.is_finite() {
                    best = best.max(dg / dx);
                }
            }
        }
        best
    }

    fn assemble(&self, x: &[f64], acc: &mut Accumulator) -> Result<(), ProblemError> {
        let n = self.n;
        match self.family {
            Family::Rosenbr => {
                for i in 0..n - 1 {
                    acc.residual(
                        10.0 * (x[i + 1] - x[i] * x[i]),
                        &[(i, -20.0 * x[i]), (i + 1, 10.0)],
                        &[(i, i, -20.0)],
                    );
                    acc.residual(1.0 - x[i], &[(i, -1.0)], &[]);
                }
            }
            Family::Broyden3d => {
                for i in 0..n {
                    let left = if i > 0 { x[i - 1] } else { 0.0 };
                    let right = if i + 1 < n { x[i + 1] } else { 0.0 };
                    let r = (3.0 - 2.0 * x[i]) * x[i] - left - 2.0 * right + 1.0;
                    let mut grad = vec![(i, 3.0 - 4.0 * x[i])];
                    if i > 0 {
                        grad.push((i - 1, -1.0));
                    }
                    if i + 1 < n {
                        grad.push((i + 1, -2.0));
                    }
                    acc.residual(r, &grad, &[(i, i, -4.0)]);
                }
            }
            Family::Broydenbd => {
                for i in 0..n {
                    let lo = i.saturating_sub(5);
                    let hi = (i + 1).min(n - 1);
                    let mut r = x[i] * (2.0 + 5.0 * x[i] * x[i]) + 1.0;
                    let mut grad = vec![(i, 2.0 + 15.0 * x[i] * x[i])];
                    let mut hess = vec![(i, i, 30.0 * x[i])];
                    for j in (lo..=hi).filter(|&j| j != i) {
                        r -= x[j] * (1.0 + x[j]);
                        grad.push((j, -(1.0 + 2.0 * x[j])));
                        hess.push((j, j, -2.0));
                    }
                    acc.residual(r, &grad, &hess);
                }
            }
            Family::Arwhead => {
                let l = n - 1;
                for i in 0..n - 1 {
                    quartic_pair(acc, x, i, l);
                }
            }
            Family::Engval1 => {
                for i in 0..n - 1 {
                    quartic_pair(acc, x, i, i + 1);
                }
            }
            Family::Tridia => {
                acc.residual(x[0] - 1.0, &[(0, 1.0)], &[]);
                for i in 1..n {
                    let c = ((i + 1) as f64).sqrt();
                    acc.residual(
                        c * (2.0 * x[i] - x[i - 1]),
                        &[(i, 2.0 * c), (i - 1, -c)],
                        &[],
                    );
                }
            }
            Family::Woods => {
                let (s90, s10, s01) = (90f64.sqrt(), 10f64.sqrt(), 0.1f64.sqrt());
                for b in (0..n).step_by(4) {
                    let (i1, i2, i3, i4) = (b, b + 1, b + 2, b + 3);
                    let (x1, x2, x3, x4) = (x[i1], x[i2], x[i3], x[i4]);
                    acc.residual(
                        10.0 * (x2 - x1 * x1),
                        &[(i1, -20.0 * x1), (i2, 10.0)],
                        &[(i1, i1, -20.0)],
                    );
                    acc.residual(1.0 - x1, &[(i1, -1.0)], &[]);
                    acc.residual(
                        s90 * (x4 - x3 * x3),
                        &[(i3, -2.0 * s90 * x3), (i4, s90)],
                        &[(i3, i3, -2.0 * s90)],
                    );
                    acc.residual(1.0 - x3, &[(i3, -1.0)], &[]);
                    acc.residual(s10 * (x2 + x4 - 2.0), &[(i2, s10), (i4, s10)], &[]);
                    acc.residual(s01 * (x2 - x4), &[(i2, s01), (i4, -s01)], &[]);
                }
            }
            Family::Powellsg => {
                let (s5, s10) = (5f64.sqrt(), 10f64.sqrt());
                for b in (0..n).step_by(4) {
                    let (i1, i2, i3, i4) = (b, b + 1, b + 2, b + 3);
                    let (x1, x2, x3, x4) = (x[i1], x[i2], x[i3], x[i4]);
                    acc.residual(x1 + 10.0 * x2, &[(i1, 1.0), (i2, 10.0)], &[]);
                    acc.residual(s5 * (x3 - x4), &[(i3, s5), (i4, -s5)], &[]);
                    let t = x2 - 2.0 * x3;
                    acc.residual(
                        t * t,
                        &[(i2, 2.0 * t), (i3, -4.0 * t)],
                        &[(i2, i2, 2.0), (i2, i3, -4.0), (i3, i3, 8.0)],
                    );
                    let u = x1 - x4;
                    acc.residual(
                        s10 * u * u,
                        &[(i1, 2.0 * s10 * u), (i4, -2.0 * s10 * u)],
                        &[
                            (i1, i1, 2.0 * s10),
                            (i1, i4, -2.0 * s10),
                            (i4, i4, 2.0 * s10),
                        ],
                    );
                }
            }
            Family::Beale => {
                let (x1, x2) = (x[0], x[1]);
                for (c, p) in [(1.5, 1), (2.25, 2), (2.625, 3)] {
                    let pf = p as f64;
                    let x2p = x2.powi(p);
                    let dx2p = pf * x2.powi(p - 1);
                    let ddx2p = if p >= 2 {
                        pf * (pf - 1.0) * x2.powi(p - 2)
                    } else {
                        0.0
                    };
                    acc.residual(
                        c - x1 * (1.0 - x2p),
                        &[(0, x2p - 1.0), (1, x1 * dx2p)],
                        &[(0, 1, dx2p), (1, 1, x1 * ddx2p)],
                    );
                }
            }
            Family::Box3 => {
                for i in 1..=10 {
                    let t = 0.1 * i as f64;
                    let e1 = (-t * x[0]).exp();
                    let e2 = (-t * x[1]).exp();
                    let c = (-t).exp() - (-10.0 * t).exp();
                    acc.residual(
                        e1 - e2 - x[2] * c,
                        &[(0, -t * e1), (1, t * e2), (2, -c)],
                        &[(0, 0, t * t * e1), (1, 1, -t * t * e2)],
                    );
                }
            }
            Family::Cube => {
                acc.residual(x[0] - 1.0, &[(0, 1.0)], &[]);
                acc.residual(
                    10.0 * (x[1] - x[0].powi(3)),
                    &[(0, -30.0 * x[0] * x[0]), (1, 10.0)],
                    &[(0, 0, -60.0 * x[0])],
                );
            }
            Family::Vardim => {
                for i in 0..n {
                    acc.residual(x[i] - 1.0, &[(i, 1.0)], &[]);
                }
                let s: f64 = (0..n).map(|i| (i + 1) as f64 * (x[i] - 1.0)).sum();
                let lin: Vec<(usize, f64)> = (0..n).map(|i| (i, (i + 1) as f64)).collect();
                acc.residual(s, &lin, &[]);
                let quad_grad: Vec<(usize, f64)> =
                    lin.iter().map(|&(i, c)| (i, 2.0 * s * c)).collect();
                let mut quad_hess = Vec::with_capacity(n * (n + 1) / 2);
                for i in 0..n {
                    for j in i..n {
                        quad_hess.push((i, j, 2.0 * (i + 1) as f64 * (j + 1) as f64));
                    }
                }
                acc.residual(s * s, &quad_grad, &quad_hess);
            }
            Family::Nondquar => {
                let l = n - 1;
                acc.residual(x[0] - x[1], &[(0, 1.0), (1, -1.0)], &[]);
                for i in 0..n - 2 {
                    let t = x[i] + x[i + 1] + x[l];
                    let idx = [i, i + 1, l];
                    let grad: Vec<(usize, f64)> = idx.iter().map(|&j| (j, 2.0 * t)).collect();
                    let mut hess = Vec::with_capacity(6);
                    for a in 0..3 {
                        for b in a..3 {
                            hess.push((idx[a], idx[b], 2.0));
                        }
                    }
                    acc.residual(t * t, &grad, &hess);
                }
                acc.residual(x[n - 2] + x[l], &[(n - 2, 1.0), (l, 1.0)], &[]);
            }
            Family::Helix => {
                let (x1, x2, x3) = (x[0], x[1], x[2]);
                let rho2 = x1 * x1 + x2 * x2;
                if rho2 == 0.0 {
                    return Err(ProblemError::NonFinite);
                }
                let rho = rho2.sqrt();
                let mut theta = x2.atan2(x1) / (2.0 * PI);
                if theta < -0.25 {
                    theta += 1.0;
                }
                let c = 1.0 / (2.0 * PI * rho2);
                let (t1, t2) = (-x2 * c, x1 * c);
                let c2 = 1.0 / (2.0 * PI * rho2 * rho2);
                let (t11, t22, t12) = (
                    2.0 * x1 * x2 * c2,
                    -2.0 * x1 * x2 * c2,
                    (x2 * x2 - x1 * x1) * c2,
                );
                acc.residual(
                    10.0 * x3 - 100.0 * theta,
                    &[(0, -100.0 * t1), (1, -100.0 * t2), (2, 10.0)],
                    &[
                        (0, 0, -100.0 * t11),
                        (1, 1, -100.0 * t22),
                        (0, 1, -100.0 * t12),
                    ],
                );
                let r3 = rho2 * rho;
                acc.residual(
                    10.0 * (rho - 1.0),
                    &[(0, 10.0 * x1 / rho), (1, 10.0 * x2 / rho)],
                    &[
                        (0, 0, 10.0 * x2 * x2 / r3),
                        (1, 1, 10.0 * x1 * x1 / r3),
                        (0, 1, -10.0 * x1 * x2 / r3),
                    ],
                );
                acc.residual(x3, &[(2, 1.0)], &[]);
            }
            Family::Booth => {
                acc.residual(x[0] + 2.0 * x[1] - 7.0, &[(0, 1.0), (1, 2.0)], &[]);
                acc.residual(2.0 * x[0] + x[1] - 5.0, &[(0, 2.0), (1, 1.0)], &[]);
            }
            Family::Arglina => {
                let m = 2 * n;
                let c = 2.0 / m as f64;
                let sum: f64 = x.iter().sum();
                for i in 0..m {
                    let mut grad: Vec<(usize, f64)> = (0..n).map(|j| (j, -c)).collect();
                    let mut r = -c * sum - 1.0;
                    if i < n {
                        r += x[i];
                        grad[i].1 += 1.0;
                    }
                    acc.residual(r, &grad, &[]);
                }
            }
            Family::Dixmaana => {
                let m = n / 3;
                let (gamma, delta) = (0.125, 0.125);
                acc.element(1.0, &[], &[]);
                for i in 0..n {
                    acc.element(x[i] * x[i], &[(i, 2.0 * x[i])], &[(i, i, 2.0)]);
                }
                for i in 0..2 * m {
                    let j = i + m;
                    let (xi, xj) = (x[i], x[j]);
                    acc.element(
                        gamma * xi * xi * xj.powi(4),
                        &[
                            (i, 2.0 * gamma * xi * xj.powi(4)),
                            (j, 4.0 * gamma * xi * xi * xj.powi(3)),
                        ],
                        &[
                            (i, i, 2.0 * gamma * xj.powi(4)),
                            (j, j, 12.0 * gamma * xi * xi * xj * xj),
                            (i, j, 8.0 * gamma * xi * xj.powi(3)),
                        ],
                    );
                }
                for i in 0..m {
                    let j = i + 2 * m;
                    acc.element(
                        delta * x[i] * x[j],
                        &[(i, delta * x[j]), (j, delta * x[i])],
                        &[(i, j, delta)],
                    );
                }
            }
            Family::Nlminsurf => minimal_surface(acc, x, isqrt(n)),
        }
        Ok(())
    }
}

/// `(x_i^2 + x_l^2)^2 - 4 x_i + 3`, shared by arwhead and engval1.
fn quartic_pair(acc: &mut Accumulator, x: &[f64], i: usize, l: usize) {
    let (a, b) = (x[i], x[l]);
    let u = a * a + b * b;
    acc.element(
        u * u - 4.0 * a + 3.0,
        &[(i, 4.0 * u * a - 4.0), (l, 4.0 * u * b)],
        &[
            (i, i, 4.0 * u + 8.0 * a * a),
            (l, l, 4.0 * u + 8.0 * b * b),
            (i, l, 8.0 * a * b),
        ],
    );
}

/// Area of a p-by-p interior grid surface over the unit square with boundary `s^2 - t^2`,
/// one forward-difference triangle per cell.
fn minimal_surface(acc: &mut Accumulator, x: &[f64], p: usize) {
    let h = 1.0 / (p + 1) as f64;
    let h2 = h * h;
    // Node (i, j) of the (p+2)x(p+2) grid: variable index or fixed boundary value.
    let node = |i: usize, j: usize| -> (Option<usize>, f64) {
        if i == 0 || j == 0 || i == p + 1 || j == p + 1 {
            let (s, t) = (i as f64 * h, j as f64 * h);
            (None, s * s - t * t)
        } else {
            let k = (i - 1) * p + (j - 1);
            (Some(k), x[k])
        }
    };
    for i in 0..=p {
        for j in 0..=p {
            let (ia, ua) = node(i, j);
            let (ib, ub) = node(i + 1, j);
            let (ic, uc) = node(i, j + 1);
            let a = (ub - ua) / h;
            let c = (uc - ua) / h;
            let s = (1.0 + a * a + c * c).sqrt();
            let s3 = s * s * s;
            let (fa, fc) = (h2 * a / s, h2 * c / s);
            let (faa, fcc, fac) = (
                h2 * (1.0 + c * c) / s3,
                h2 * (1.0 + a * a) / s3,
                -h2 * a * c / s3,
            );
            // (variable, d a / d u, d c / d u)
            let mut vars: Vec<(usize, f64, f64)> = Vec::with_capacity(3);
            if let Some(k) = ia {
                vars.push((k, -1.0 / h, -1.0 / h));
            }
            if let Some(k) = ib {
                vars.push((k, 1.0 / h, 0.0));
            }
            if let Some(k) = ic {
                vars.push((k, 0.0, 1.0 / h));
            }
            let grad: Vec<(usize, f64)> = vars
                .iter()
                .map(|&(k, da, dc)| (k, fa * da + fc * dc))
                .collect();
            let mut hess = Vec::with_capacity(6);
            for (p1, &(k1, da1, dc1)) in vars.iter().enumerate() {
                for &(k2, da2, dc2) in &vars[p1..] {
                    hess.push((
                        k1,
                        k2,
                        faa * da1 * da2 + fcc * dc1 * dc2 + fac * (da1 * dc2 + dc1 * da2),
                    ));
                }
            }
            acc.element(h2 * s, &grad, &hess);
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| (u - v) * (u - v))
        .sum::<f64>()
        .sqrt()
}

/// Collects element contributions into f, g and a dense symmetric H.
struct Accumulator {
    order: Order,
    f: f64,
    g: Vec<f64>,
    h: Option<DMatrix<f64>>,
}

impl Accumulator {
    fn new(n: usize, order: Order) -> Self {
        Accumulator {
            order,
            f: 0.0,
            g: if order >= Order::Gradient {
                vec![0.0; n]
            } else {
                Vec::new()
            },
            h: (order == Order::Hessian).then(|| DMatrix::zeros(n, n)),
        }
    }

    /// Adds `value` with gradient entries and upper-triangle Hessian entries `(i, j, v)`, `i <= j`
    /// (a pair listed as `(j, i)` is treated the same way).
    fn element(&mut self, value: f64, grad: &[(usize, f64)], hess: &[(usize, usize, f64)]) {
        self.f += value;
        if self.order >= Order::Gradient {
            for &(i, v) in grad {
                self.g[i] += v;
            }
        }
        if let Some(h) = self.h.as_mut() {
            for &(i, j, v) in hess {
                h[(i, j)] += v;
                if i != j {
                    h[(j, i)] += v;
                }
            }
        }
    }

    /// Adds `r^2` for a residual with sparse gradient and Hessian.
    fn residual(&mut self, r: f64, grad: &[(usize, f64)], hess: &[(usize, usize, f64)]) {
        self.f += r * r;
        if self.order >= Order::Gradient {
            for &(i, v) in grad {
                self.g[i] += 2.0 * r * v;
            }
        }
        if let Some(h) = self.h.as_mut() {
            for &(i, vi) in grad {
                for &(j, vj) in grad {
                    h[(i, j)] += 2.0 * vi * vj;
                }
            }
            for &(i, j, v) in hess {
                h[(i, j)] += 2.0 * r * v;
                if i != j {
                    h[(j, i)] += 2.0 * r * v;
                }
            }
        }
    }

    fn finish(self) -> Result<Evaluation, ProblemError> {
        if !self.f.is_finite() || self.g.iter().any(|v| !v.is_finite()) {
            return Err(ProblemError::NonFinite);
        }
        if let Some(h) = &self.h {
            if h.iter().any(|v| !v.is_finite()) {
                return Err(ProblemError::NonFinite);
            }
        }
        Ok(Evaluation {
            f: self.f,
            g: (self.order >= Order::Gradient).then_some(self.g),
            h: self.h,
        })
    }
}

/// First- and second-order information source used by the solvers.
///
/// Methods take `&mut self` so that wrappers can count calls or advance a noise stream.
pub trait Oracle {
    fn dim(&self) -> usize;
    fn value(&mut self, x: &[f64]) -> Result<f64, ProblemError>;
    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, ProblemError>;
    fn hessian(&mut self, x: &[f64]) -> Result<DMatrix<f64>, ProblemError>;
    fn has_hessian(&self) -> bool;
}

impl Oracle for ProblemInstance {
    fn dim(&self) -> usize {
        self.n
    }
    fn value(&mut self, x: &[f64]) -> Result<f64, ProblemError> {
        ProblemInstance::value(self, x)
    }
    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, ProblemError> {
        ProblemInstance::gradient(self, x)
    }
    fn hessian(&mut self, x: &[f64]) -> Result<DMatrix<f64>, ProblemError> {
        ProblemInstance::hessian(self, x)
    }
    fn has_hessian(&self) -> bool {
        true
    }
}

impl<O: Oracle + ?Sized> Oracle for &mut O {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&mut self, x: &[f64]) -> Result<f64, ProblemError> {
        (**self).value(x)
    }
    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, ProblemError> {
        (**self).gradient(x)
    }
    fn hessian(&mut self, x: &[f64]) -> Result<DMatrix<f64>, ProblemError> {
        (**self).hessian(x)
    }
    fn has_hessian(&self) -> bool {
        (**self).has_hessian()
    }
}

/// Call counters for an oracle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub values: u64,
    pub gradients: u64,
    pub hessians: u64,
}

/// Wraps an oracle and counts every call by kind.
#[derive(Debug, Clone)]
pub struct Counted<O> {
    pub inner: O,
    pub counts: CallCounts,
}

impl<O> Counted<O> {
    pub fn new(inner: O) -> Self {
        Counted {
            inner,
            counts: CallCounts::default(),
        }
    }
}

impl<O: Oracle> Oracle for Counted<O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&mut self, x: &[f64]) -> Result<f64, ProblemError> {
        self.counts.values += 1;
        self.inner.value(x)
    }
    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, ProblemError> {
        self.counts.gradients += 1;
        self.inner.gradient(x)
    }
    fn hessian(&mut self, x: &[f64]) -> Result<DMatrix<f64>, ProblemError> {
        self.counts.hessians += 1;
        self.inner.hessian(x)
    }
    fn has_hessian(&self) -> bool {
        self.inner.has_hessian()
    }
}

/// Noise levels used by the benchmark protocol.
pub const NOISE_LEVELS: [f64; 5] = [0.0, 0.05, 0.15, 0.25, 0.50];

// Stream namespaces keep value, gradient and Hessian noise independent of each other.
const STREAM_VALUE: u64 = 0;
const STREAM_GRADIENT: u64 = 1 << 62;
const STREAM_HESSIAN: u64 = 2 << 62;

/// Multiplies every entry by `1 + level * z`, with `z` standard normal drawn
/// from the ChaCha stream selected by `(seed, position)`.
pub fn apply_noise(level: f64, seed: u64, position: u64, values: &mut [f64]) {
    if level == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(position);
    for v in values.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v *= 1.0 + level * z;
    }
}

/// A problem whose every returned scalar carries relative Gaussian noise.
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    pub inner: ProblemInstance,
    pub level: f64,
    pub seed: u64,
    value_calls: u64,
    gradient_calls: u64,
    hessian_calls: u64,
}

impl NoisyOracle {
    /// `level` must lie in `[0, 1)`.
    pub fn new(inner: ProblemInstance, level: f64, seed: u64) -> Self {
        assert!(
            (0.0..1.0).contains(&level),
            "noise level must lie in [0, 1), got {level}"
        );
        NoisyOracle {
            inner,
            level,
            seed,
            value_calls: 0,
            gradient_calls: 0,
            hessian_calls: 0,
        }
    }
}

impl Oracle for NoisyOracle {
    fn dim(&self) -> usize {
        self.inner.n
    }

    fn value(&mut self, x: &[f64]) -> Result<f64, ProblemError> {
        let mut f = [self.inner.value(x)?];
        apply_noise(
            self.level,
            self.seed,
            STREAM_VALUE | self.value_calls,
            &mut f,
        );
        self.value_calls += 1;
        Ok(f[0])
    }

    fn gradient(&mut self, x: &[f64]) -> Result<Vec<f64>, ProblemError> {
        let mut g = self.inner.gradient(x)?;
        apply_noise(
            self.level,
            self.seed,
            STREAM_GRADIENT | self.gradient_calls,
            &mut g,
        );
        self.gradient_calls += 1;
        Ok(g)
    }

    /// Noise is drawn for the upper triangle and mirrored so the matrix stays symmetric.
    fn hessian(&mut self, x: &[f64]) -> Result<DMatrix<f64>, ProblemError> {
        let mut h = self.inner.hessian(x)?;
        let n = h.nrows();
        let mut upper: Vec<f64> = (0..n)
            .flat_map(|i| (i..n).map(move |j| (i, j)))
            .map(|(i, j)| h[(i, j)])
            .collect();
        apply_noise(
            self.level,
            self.seed,
            STREAM_HESSIAN | self.hessian_calls,
            &mut upper,
        );
        self.hessian_calls += 1;
        let mut it = upper.into_iter();
        for i in 0..n {
            for j in i..n {
                let v = it.next().expect("upper triangle length");
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        Ok(h)
    }

    fn has_hessian(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_gradient(p: &ProblemInstance, x: &[f64], step: f64) -> Vec<f64> {
        (0..p.n)
            .map(|i| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[i] += step;
                b[i] -= step;
                (p.value(&a).unwrap() - p.value(&b).unwrap()) / (2.0 * step)
            })
            .collect()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    #[test]
    fn rosenbrock_start_value() {
        let p = make_problem("rosenbr", 2).unwrap();
        assert_eq!(p.x0, vec![-1.2, 1.0]);
        let f = p.value(&p.x0).unwrap();
        assert!((f - 24.2).abs() < 1e-12, "f = {f}");
    }

    #[test]
    fn rosenbrock_minimizer_is_stationary() {
        let p = make_problem("rosenbr", 2).unwrap();
        assert_eq!(p.gradient(&[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn rosenbrock_hessian_positive_definite_at_minimizer() {
        let p = make_problem("rosenbr", 2).unwrap();
        let eig = SymmetricEigen::new(p.hessian(&[1.0, 1.0]).unwrap());
        assert!(eig.eigenvalues.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn tridia_minimizer_is_stationary() {
        let p = make_problem("tridia", 10).unwrap();
        let mut x = vec![1.0; 10];
        for i in 1..10 {
            x[i] = x[i - 1] / 2.0;
        }
        assert!(norm(&p.gradient(&x).unwrap()) < 1e-14);
        assert!(p.value(&x).unwrap().abs() < 1e-28);
    }

    #[test]
    fn broyden3d_accepts_any_dimension() {
        for n in [1, 10, 37] {
            assert_eq!(make_problem("broyden3d", n).unwrap().n, n);
        }
    }

    #[test]
    fn catalog_errors() {
        assert_eq!(
            make_problem("nosuch", 2),
            Err(ProblemError::UnknownProblem("nosuch".into()))
        );
        assert!(matches!(
            make_problem("beale", 3),
            Err(ProblemError::InvalidDimension { .. })
        ));
        assert!(matches!(
            make_problem("woods", 10),
            Err(ProblemError::InvalidDimension { .. })
        ));
        assert!(matches!(
            make_problem("nlminsurf", 15),
            Err(ProblemError::InvalidDimension { .. })
        ));
    }

    #[test]
    fn gradients_match_central_differences_at_start() {
        for p in default_suite() {
            let g = p.gradient(&p.x0).unwrap();
            let fd = central_gradient(&p, &p.x0, 1e-6);
            let err = norm(&g.iter().zip(&fd).map(|(a, b)| a - b).collect::<Vec<_>>());
            assert!(err <= 1e-5 * (1.0 + norm(&g)), "{}: err {err}", p.name);
        }
    }

    #[test]
    fn overflow_is_reported() {
        let p = make_problem("rosenbr", 2).unwrap();
        assert_eq!(p.value(&[1e200, 1.0]), Err(ProblemError::NonFinite));
        assert_eq!(p.gradient(&[f64::NAN, 1.0]), Err(ProblemError::NonFinite));
    }

    #[test]
    fn quadratics_have_exact_lipschitz() {
        let p = make_problem("booth", 2).unwrap();
        let hint = p.lipschitz_hint.unwrap();
        assert!(hint.exact);
        // H = 2 [[5, 4], [4, 5]] has eigenvalues 2 and 18.
        assert!((hint.value - 18.0).abs() < 1e-12);
        assert!(!make_problem("rosenbr", 10).unwrap().lipschitz_is_exact());
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut v = [3.5];
        apply_noise(0.0, 7, 3, &mut v);
        assert_eq!(v, [3.5]);
    }

    #[test]
    fn noise_is_deterministic_per_position() {
        let mut a = [1.0, 2.0];
        let mut b = [1.0, 2.0];
        apply_noise(0.15, 42, 9, &mut a);
        apply_noise(0.15, 42, 9, &mut b);
        assert_eq!(a, b);
        let mut c = [1.0, 2.0];
        apply_noise(0.15, 42, 10, &mut c);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_moments() {
        let samples = 100_000u64;
        let mut v = vec![1.0; samples as usize];
        // One scalar per stream position, as each oracle call uses its own position.
        for (pos, x) in v.iter_mut().enumerate() {
            apply_noise(0.5, 1234, pos as u64, std::slice::from_mut(x));
        }
        let mean = v.iter().sum::<f64>() / samples as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (samples - 1) as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 0.5).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn noisy_oracle_level_zero_matches_clean() {
        let p = make_problem("helix", 3).unwrap();
        let mut noisy = NoisyOracle::new(p.clone(), 0.0, 5);
        let x = [0.3, -0.2, 0.7];
        assert_eq!(
            noisy.value(&x).unwrap().to_bits(),
            p.value(&x).unwrap().to_bits()
        );
        assert_eq!(noisy.gradient(&x).unwrap(), p.gradient(&x).unwrap());
        assert_eq!(noisy.hessian(&x).unwrap(), p.hessian(&x).unwrap());
    }

    #[test]
    fn noisy_hessian_stays_symmetric() {
        let p = make_problem("woods", 4).unwrap();
        let mut noisy = NoisyOracle::new(p.clone(), 0.25, 11);
        let h = noisy.hessian(&p.x0).unwrap();
        assert_eq!(h.clone(), h.transpose());
    }

    #[test]
    fn counting_wrapper_counts() {
        let p = make_problem("cube", 2).unwrap();
        let mut c = Counted::new(p.clone());
        c.gradient(&p.x0).unwrap();
        c.gradient(&p.x0).unwrap();
        c.value(&p.x0).unwrap();
        assert_eq!(
            c.counts,
            CallCounts {
                values: 1,
                gradients: 2,
                hessians: 0
            }
        );
    }
}
