//! Dense strictly convex QP by the Goldfarb-Idnani dual active-set method.
//!
//! ```text
//! min ½ dᵀGd + cᵀd   s.t.  A_e d + b_e = 0,   A_i d + b_i <= 0
//! ```
//!
//! The iteration starts from the unconstrained minimizer, forces every
//! equality into the active set, then repeatedly adds the most violated
//! inequality. Each addition moves primal and dual variables along the
//! direction that keeps the active set satisfied; a constraint whose
//! multiplier would turn negative first is dropped instead.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("QP hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("QP constraints are inconsistent")]
    Infeasible,
    #[error("QP active-set iteration limit reached")]
    IterationLimit,
    #[error("singular active-set system")]
    Singular,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub d: DVector<f64>,
    /// Equality multipliers, stationarity `Gd + c + A_eᵀν + A_iᵀκ = 0`.
    pub nu: DVector<f64>,
    pub kappa: DVector<f64>,
    /// Active inequality indices, ascending.
    pub active: Vec<usize>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Eq { index: usize, sign: f64 },
    Ineq { index: usize },
}

struct ActiveSet {
    kinds: Vec<Kind>,
    normals: Vec<DVector<f64>>,
    u: Vec<f64>,
}

struct Work<'a> {
    ginv: DMatrix<f64>,
    d: DVector<f64>,
    set: ActiveSet,
    steps: usize,
    limit: usize,
    ai: &'a DMatrix<f64>,
}

const Z_TOL: f64 = 1e-14;
const R_TOL: f64 = 1e-12;

impl Work<'_> {
    /// Step directions for adding normal `n`: primal `z = Z n`, dual `r`.
    fn directions(&self, n: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), QpError> {
        let m = self.set.normals.len();
        let gn = &self.ginv * n;
        if m == 0 {
            return Ok((gn, DVector::zeros(0)));
        }
        let nmat = DMatrix::from_columns(&self.set.normals);
        let gnm = &self.ginv * &nmat;
        let w = nmat.transpose() * &gnm;
        let rhs = nmat.transpose() * &gn;
        let r = w.lu().solve(&rhs).ok_or(QpError::Singular)?;
        let z = gn - gnm * &r;
        Ok((z, r))
    }

    /// Adds constraint `nᵀd + b (<=|=) 0` currently violated by `v > 0`.
    fn add(&mut self, n: DVector<f64>, b: f64, kind: Kind) -> Result<(), QpError> {
        let mut u_p = 0.0;
        loop {
            self.steps += 1;
            if self.steps > self.limit {
                return Err(QpError::IterationLimit);
            }
            let v = n.dot(&self.d) + b;
            let (z, r) = self.directions(&n)?;
            let nz = n.dot(&z);
            let reference = n.dot(&(&self.ginv * &n)).max(f64::MIN_POSITIVE);
            let full = (nz > Z_TOL * reference).then(|| v / nz);

            let rscale = r.amax().max(1.0);
            let mut partial: Option<(f64, usize)> = None;
            for (k, kind) in self.set.kinds.iter().enumerate() {
                let Kind::Ineq { index } = *kind else { continue };
                if r[k] <= R_TOL * rscale {
                    continue;
                }
                let t = self.set.u[k] / r[k];
                let better = match partial {
                    None => true,
                    Some((best, bk)) => {
                        t < best
                            || (t == best
                                && matches!(self.set.kinds[bk], Kind::Ineq { index: bi } if index < bi))
                    }
                };
                if better {
                    partial = Some((t, k));
                }
            }

            match (full, partial) {
                (None, None) => {
                    if matches!(kind, Kind::Eq { .. }) && v.abs() <= 1e-12 * (1.0 + b.abs()) {
                        // linearly dependent and already satisfied
                        return Ok(());
                    }
                    return Err(QpError::Infeasible);
                }
                (Some(t1), Some((t2, _))) if t1 <= t2 => {
                    self.take(&z, &r, t1, &mut u_p);
                    self.set.kinds.push(kind);
                    self.set.normals.push(n);
                    self.set.u.push(u_p);
                    return Ok(());
                }
                (Some(t1), None) => {
                    self.take(&z, &r, t1, &mut u_p);
                    self.set.kinds.push(kind);
                    self.set.normals.push(n);
                    self.set.u.push(u_p);
                    return Ok(());
                }
                (_, Some((t2, k))) => {
                    self.take(&z, &r, t2, &mut u_p);
                    self.set.kinds.remove(k);
                    self.set.normals.remove(k);
                    self.set.u.remove(k);
                }
            }
        }
    }

    fn take(&mut self, z: &DVector<f64>, r: &DVector<f64>, t: f64, u_p: &mut f64) {
        self.d.axpy(-t, z, 1.0);
        for (u, rk) in self.set.u.iter_mut().zip(r.iter()) {
            *u -= t * rk;
        }
        for (kind, u) in self.set.kinds.iter().zip(self.set.u.iter_mut()) {
            if matches!(kind, Kind::Ineq { .. }) && *u < 0.0 {
                *u = 0.0;
            }
        }
        *u_p += t;
    }

    fn most_violated(&self, bi: &DVector<f64>) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..bi.len() {
            let active = self
                .set
                .kinds
                .iter()
                .any(|k| matches!(k, Kind::Ineq { index } if *index == j));
            if active {
                continue;
            }
            let row = self.ai.row(j);
            let v = row.dot(&self.d.transpose()) + bi[j];
            let scale = 1.0 + bi[j].abs() + row.iter().zip(self.d.iter()).map(|(a, x)| (a * x).abs()).sum::<f64>();
            if v > 1e-12 * scale && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, j));
            }
        }
        best.map(|(_, j)| j)
    }
}

/// Solves the QP. `ae`/`ai` may have zero rows.
pub fn solve_qp(
    g: &DMatrix<f64>,
    c: &DVector<f64>,
    ae: &DMatrix<f64>,
    be: &DVector<f64>,
    ai: &DMatrix<f64>,
    bi: &DVector<f64>,
) -> Result<QpSolution, QpError> {
    let n = c.len();
    let chol = g.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let ginv = chol.inverse();
    let d = -(&ginv * c);
    let mut work = Work {
        ginv,
        d,
        set: ActiveSet { kinds: Vec::new(), normals: Vec::new(), u: Vec::new() },
        steps: 0,
        limit: 50 * (n + be.len() + bi.len()) + 100,
        ai,
    };

    for e in 0..be.len() {
        let row = ae.row(e).transpose();
        let v = row.dot(&work.d) + be[e];
        let sign = if v >= 0.0 { 1.0 } else { -1.0 };
        work.add(row * sign, be[e] * sign, Kind::Eq { index: e, sign })?;
    }
    while let Some(j) = work.most_violated(bi) {
        work.add(ai.row(j).transpose(), bi[j], Kind::Ineq { index: j })?;
    }

    let mut nu = DVector::zeros(be.len());
    let mut kappa = DVector::zeros(bi.len());
    let mut active = Vec::new();
    for (kind, u) in work.set.kinds.iter().zip(&work.set.u) {
        match *kind {
            Kind::Eq { index, sign } => nu[index] = sign * u,
            Kind::Ineq { index } => {
                kappa[index] = *u;
                active.push(index);
            }
        }
    }
    active.sort_unstable();
    Ok(QpSolution { d: work.d, nu, kappa, active, iterations: work.steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn bound_becomes_active() {
        // min x² s.t. 1 - x <= 0
        let s = solve_qp(&m(1, 1, &[2.0]), &v(&[0.0]), &m(0, 1, &[]), &v(&[]), &m(1, 1, &[-1.0]), &v(&[1.0]))
            .unwrap();
        assert!((s.d[0] - 1.0).abs() < 1e-14);
        assert!((s.kappa[0] - 2.0).abs() < 1e-14);
        assert_eq!(s.active, vec![0]);
    }

    #[test]
    fn equality_and_inactive_inequality() {
        // min ½‖d‖² - d₁ s.t. d₀ + d₁ = 1, d₀ <= 5
        let s = solve_qp(
            &DMatrix::identity(2, 2),
            &v(&[0.0, -1.0]),
            &m(1, 2, &[1.0, 1.0]),
            &v(&[-1.0]),
            &m(1, 2, &[1.0, 0.0]),
            &v(&[-5.0]),
        )
        .unwrap();
        assert!((s.d[0] - 0.0).abs() < 1e-14 && (s.d[1] - 1.0).abs() < 1e-14);
        assert!(s.nu[0].abs() < 1e-14);
        assert_eq!(s.kappa[0], 0.0);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let r = solve_qp(
            &m(1, 1, &[1.0]),
            &v(&[0.0]),
            &m(0, 1, &[]),
            &v(&[]),
            &m(2, 1, &[1.0, -1.0]),
            &v(&[0.0, 1.0]),
        );
        assert_eq!(r.unwrap_err(), QpError::Infeasible);
    }

    #[test]
    fn two_active_inequalities() {
        // min ½‖d - (2, 2)‖² s.t. d₀ + d₁ <= 2, d₀ <= 0.5, -d₀ <= 0
        let s = solve_qp(
            &DMatrix::identity(2, 2),
            &v(&[-2.0, -2.0]),
            &m(0, 2, &[]),
            &v(&[]),
            &m(3, 2, &[1.0, 1.0, 1.0, 0.0, -1.0, 0.0]),
            &v(&[-2.0, -0.5, 0.0]),
        )
        .unwrap();
        assert!((s.d[0] - 0.5).abs() < 1e-12 && (s.d[1] - 1.5).abs() < 1e-12);
        assert_eq!(s.active, vec![0, 1]);
        let stat = &s.d - v(&[2.0, 2.0])
            + m(3, 2, &[1.0, 1.0, 1.0, 0.0, -1.0, 0.0]).transpose() * &s.kappa;
        assert!(stat.amax() < 1e-12);
        assert!(s.kappa.iter().all(|&k| k >= 0.0));
    }

    #[test]
    fn not_positive_definite() {
        let r = solve_qp(&m(1, 1, &[-1.0]), &v(&[0.0]), &m(0, 1, &[]), &v(&[]), &m(0, 1, &[]), &v(&[]));
        assert_eq!(r.unwrap_err(), QpError::NotPositiveDefinite);
    }
}
