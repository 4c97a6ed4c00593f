//! Dense SQP solver for the small NLPs each agent solves per iteration.
//!
//! Each iteration solves a QP built from the Lagrangian hessian (shifted by
//! `σI` until it factors) and linearized constraints, then backtracks on an
//! ℓ1 merit function. Multipliers follow the QP multipliers with the same
//! step length.

pub mod qp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derivative;
pub use qp::{solve_qp, QpError, QpSolution};

/// `min φ(s)` s.t. `c_e(s) = 0`, `c_i(s) <= 0`.
pub trait NlpProblem {
    fn dim(&self) -> usize;
    fn n_eq(&self) -> usize {
        0
    }
    fn n_ineq(&self) -> usize {
        0
    }
    fn objective(&self, s: &[f64]) -> f64;

    fn eq(&self, _s: &[f64]) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn ineq(&self, _s: &[f64]) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn gradient(&self, s: &[f64]) -> DVector<f64> {
        derivative::gradient(|s| self.objective(s), s)
    }

    fn eq_jacobian(&self, s: &[f64]) -> DMatrix<f64> {
        if self.n_eq() == 0 {
            return DMatrix::zeros(0, s.len());
        }
        derivative::jacobian(|s| self.eq(s), s, self.n_eq())
    }

    fn ineq_jacobian(&self, s: &[f64]) -> DMatrix<f64> {
        if self.n_ineq() == 0 {
            return DMatrix::zeros(0, s.len());
        }
        derivative::jacobian(|s| self.ineq(s), s, self.n_ineq())
    }

    /// Hessian of `φ + νᵀc_e + κᵀc_i`.
    fn hessian(&self, s: &[f64], nu: &[f64], kappa: &[f64]) -> DMatrix<f64> {
        derivative::hessian_from_gradient(|s| lagrangian_gradient(self, s, nu, kappa), s)
    }
    /// Typical size of the problem data. KKT residuals are measured relative
    /// to `max(1, magnitude)`.
    fn magnitude(&self) -> f64 {
        1.0
    }
}

pub fn lagrangian_gradient<P: NlpProblem + ?Sized>(
    p: &P,
    s: &[f64],
    nu: &[f64],
    kappa: &[f64],
) -> DVector<f64> {
    let mut g = p.gradient(s);
    if !nu.is_empty() {
        g += p.eq_jacobian(s).transpose() * DVector::from_column_slice(nu);
    }
    if !kappa.is_empty() {
        g += p.ineq_jacobian(s).transpose() * DVector::from_column_slice(kappa);
    }
    g
}

/// Lagrangian value and hessian at `(s, ν, κ)`.
pub fn eval_local_lagrangian<P: NlpProblem + ?Sized>(
    p: &P,
    s: &[f64],
    nu: &[f64],
    kappa: &[f64],
) -> (f64, DMatrix<f64>) {
    let mut value = p.objective(s);
    if !nu.is_empty() {
        value += p.eq(s).dot(&DVector::from_column_slice(nu));
    }
    if !kappa.is_empty() {
        value += p.ineq(s).dot(&DVector::from_column_slice(kappa));
    }
    (value, p.hessian(s, nu, kappa))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("hessian regularization failed to produce a positive definite matrix")]
    LinearAlgebraFailure,
    #[error("QP subproblem failed: {0}")]
    Qp(QpError),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Tolerance on the scaled KKT residual.
    pub tolerance: f64,
    pub max_iter: usize,
    /// Backtracking on the ℓ1 merit function. Off means full steps.
    pub line_search: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iter: 100, line_search: true }
    }
}

/// Components of the KKT residual, all in the ∞-norm.
///
/// Every component is divided by `max(1, magnitude)`; stationarity also by
/// `max(1, ‖∇φ‖∞)` and complementarity by `max(1, ‖κ‖∞)`. Badly scaled
/// problems can then still reach tight tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

pub fn kkt_residual<P: NlpProblem + ?Sized>(p: &P, s: &[f64], nu: &[f64], kappa: &[f64]) -> KktResidual {
    let grad = p.gradient(s);
    let stat = lagrangian_gradient(p, s, nu, kappa);
    let ce = p.eq(s);
    let ci = p.ineq(s);
    let kmax = kappa.iter().fold(0.0f64, |a, k| a.max(k.abs()));
    let scale = p.magnitude().max(1.0);
    KktResidual {
        stationarity: stat.amax() / (grad.amax().max(1.0) * scale),
        primal: ce.amax().max(ci.iter().fold(0.0f64, |a, c| a.max(*c))) / scale,
        dual: kappa.iter().fold(0.0f64, |a, k| a.max(-k)) / scale,
        complementarity: kappa
            .iter()
            .zip(ci.iter())
            .fold(0.0f64, |a, (k, c)| a.max((k * c).abs()))
            / (kmax.max(1.0) * scale),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalSolution {
    pub s: DVector<f64>,
    pub nu: DVector<f64>,
    pub kappa: DVector<f64>,
    pub kkt: KktResidual,
    pub status: SolveStatus,
    pub iterations: usize,
}

impl LocalSolution {
    pub fn kkt_residual(&self) -> f64 {
        self.kkt.max()
    }
}

/// Initial primal-dual guess. Empty multiplier vectors mean zeros.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    pub s: Option<DVector<f64>>,
    pub nu: Option<DVector<f64>>,
    pub kappa: Option<DVector<f64>>,
}

fn regularized_factorizable(h: &DMatrix<f64>) -> Result<DMatrix<f64>, NlpError> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(NlpError::NonFinite("hessian"));
    }
    if h.clone().cholesky().is_some() {
        return Ok(h.clone());
    }
    let n = h.nrows();
    let cap = 1e12 * h.amax().max(1.0);
    let mut sigma = 1e-8;
    while sigma <= cap {
        let shifted = h + DMatrix::identity(n, n) * sigma;
        if shifted.clone().cholesky().is_some() {
            return Ok(shifted);
        }
        sigma *= 2.0;
    }
    Err(NlpError::LinearAlgebraFailure)
}

fn merit<P: NlpProblem + ?Sized>(p: &P, s: &[f64], penalty: f64) -> (f64, f64) {
    let ce = p.eq(s);
    let ci = p.ineq(s);
    let viol = ce.iter().map(|c| c.abs()).sum::<f64>() + ci.iter().map(|c| c.max(0.0)).sum::<f64>();
    (p.objective(s) + penalty * viol, viol)
}

/// Solves the NLP from a zero initial guess.
pub fn solve_local<P: NlpProblem + ?Sized>(p: &P, opts: &SolverOptions) -> Result<LocalSolution, NlpError> {
    solve_local_from(p, opts, &WarmStart::default())
}

pub fn solve_local_from<P: NlpProblem + ?Sized>(
    p: &P,
    opts: &SolverOptions,
    warm: &WarmStart,
) -> Result<LocalSolution, NlpError> {
    let n = p.dim();
    let mut s = warm.s.clone().unwrap_or_else(|| DVector::zeros(n));
    let mut nu = warm.nu.clone().unwrap_or_else(|| DVector::zeros(p.n_eq()));
    let mut kappa = warm.kappa.clone().unwrap_or_else(|| DVector::zeros(p.n_ineq()));
    let mut penalty = 0.0f64;

    for iter in 0..opts.max_iter {
        let kkt = kkt_residual(p, s.as_slice(), nu.as_slice(), kappa.as_slice());
        if !kkt.max().is_finite() {
            return Err(NlpError::NonFinite("KKT residual"));
        }
        if kkt.max() <= opts.tolerance {
            return Ok(LocalSolution { s, nu, kappa, kkt, status: SolveStatus::Converged, iterations: iter });
        }
        let grad = p.gradient(s.as_slice());
        let je = p.eq_jacobian(s.as_slice());
        let ji = p.ineq_jacobian(s.as_slice());
        let ce = p.eq(s.as_slice());
        let ci = p.ineq(s.as_slice());
        let h = regularized_factorizable(&p.hessian(s.as_slice(), nu.as_slice(), kappa.as_slice()))?;
        let qp = match solve_qp(&h, &grad, &je, &ce, &ji, &ci) {
            Ok(qp) => qp,
            Err(QpError::Infeasible) => {
                return Ok(LocalSolution { s, nu, kappa, kkt, status: SolveStatus::Infeasible, iterations: iter });
            }
            Err(e) => return Err(NlpError::Qp(e)),
        };

        let mut alpha = 1.0;
        if opts.line_search {
            let mult = qp.nu.amax().max(qp.kappa.amax());
            penalty = penalty.max(1.5 * mult + 1e-8);
            let (phi0, viol0) = merit(p, s.as_slice(), penalty);
            let slope = grad.dot(&qp.d) - penalty * viol0;
            let rounding = 16.0 * f64::EPSILON * phi0.abs().max(1.0);
            let sufficient = |alpha: f64| {
                let (phi, _) = merit(p, (&s + &qp.d * alpha).as_slice(), penalty);
                phi.is_finite() && phi <= phi0 + 1e-4 * alpha * slope.min(0.0) + rounding
            };
            // Near the optimum of badly scaled objectives the merit change is
            // below the rounding of its evaluation; a full step that halves
            // the KKT residual is taken anyway.
            let full_ok = sufficient(1.0)
                || kkt_residual(p, (&s + &qp.d).as_slice(), qp.nu.as_slice(), qp.kappa.as_slice()).max() <= 0.5 * kkt.max();
            if !full_ok {
                alpha = 0.5;
                while alpha > 1e-10 && !sufficient(alpha) {
                    alpha *= 0.5;
                }
            }
        }
        s += &qp.d * alpha;
        nu = qp.nu;
        kappa = qp.kappa;
    }
    let kkt = kkt_residual(p, s.as_slice(), nu.as_slice(), kappa.as_slice());
    let status = if kkt.max() <= opts.tolerance { SolveStatus::Converged } else { SolveStatus::MaxIter };
    Ok(LocalSolution { s, nu, kappa, kkt, status, iterations: opts.max_iter })
}
