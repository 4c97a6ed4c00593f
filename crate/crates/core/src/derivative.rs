//! Central finite differences and derivative checking.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Relative step used by all central differences, close to the cube root of
/// machine epsilon.
pub const FD_STEP: f64 = 6e-6;

fn step_for(x: f64) -> f64 {
    FD_STEP * x.abs().max(1.0)
}

/// Central-difference gradient of a scalar function.
pub fn gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> DVector<f64> {
    let mut probe = x.to_vec();
    DVector::from_fn(x.len(), |k, _| {
        let h = step_for(x[k]);
        probe[k] = x[k] + h;
        let up = f(&probe);
        probe[k] = x[k] - h;
        let down = f(&probe);
        probe[k] = x[k];
        (up - down) / (2.0 * h)
    })
}

/// Central-difference Jacobian of a vector function with `rows` outputs.
pub fn jacobian(f: impl Fn(&[f64]) -> DVector<f64>, x: &[f64], rows: usize) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(rows, x.len());
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        let h = step_for(x[k]);
        probe[k] = x[k] + h;
        let up = f(&probe);
        probe[k] = x[k] - h;
        let down = f(&probe);
        probe[k] = x[k];
        jac.set_column(k, &((up - down) / (2.0 * h)));
    }
    jac
}

/// Symmetrized Jacobian of a gradient map.
pub fn hessian_from_gradient(g: impl Fn(&[f64]) -> DVector<f64>, x: &[f64]) -> DMatrix<f64> {
    let h = jacobian(g, x, x.len());
    (&h + h.transpose()) * 0.5
}

/// `‖a - b‖∞ / max(1, ‖b‖∞)`.
pub fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).amax();
    diff / b.amax().max(1.0)
}

pub fn relative_error_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

/// Worst relative error of one supplied derivative against finite differences.
#[derive(Debug, Clone, Serialize)]
pub struct DerivativeEntry {
    pub name: String,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DerivativeReport {
    pub entries: Vec<DerivativeEntry>,
}

impl DerivativeReport {
    pub fn record(&mut self, name: impl Into<String>, error: f64) {
        let name = name.into();
        if let Some(e) = self.entries.iter_mut().find(|e| e.name == name) {
            e.max_relative_error = e.max_relative_error.max(error);
        } else {
            self.entries.push(DerivativeEntry { name, max_relative_error: error });
        }
    }

    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_relative_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.worst() <= tol
    }
}
