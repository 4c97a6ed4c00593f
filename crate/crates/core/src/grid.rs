//! Uniform time grids and node-sampled trajectories.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("grid needs at least one interval")]
    NoIntervals,
    #[error("expected {expected} values, got {got}")]
    Length { expected: usize, got: usize },
}

/// `intervals + 1` equidistant nodes on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    intervals: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, intervals: usize) -> Result<Self, GridError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(GridError::BadHorizon(horizon));
        }
        if intervals == 0 {
            return Err(GridError::NoIntervals);
        }
        Ok(Self { horizon, intervals })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn nodes(&self) -> usize {
        self.intervals + 1
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.intervals as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.intervals as f64
    }

    /// Trapezoid weight of node `k` (step included).
    pub fn weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.intervals {
            0.5 * self.step()
        } else {
            self.step()
        }
    }

    /// Trapezoid rule over node samples.
    pub fn integrate(&self, samples: &[f64]) -> f64 {
        debug_assert_eq!(samples.len(), self.nodes());
        samples
            .iter()
            .enumerate()
            .map(|(k, v)| self.weight(k) * v)
            .sum()
    }
}

/// Node-major samples of a `dim`-dimensional signal on a [`TimeGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    grid: TimeGrid,
    dim: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self { grid, dim, data: vec![0.0; dim * grid.nodes()] }
    }

    pub fn constant(grid: TimeGrid, value: &[f64]) -> Self {
        let mut data = Vec::with_capacity(value.len() * grid.nodes());
        for _ in 0..grid.nodes() {
            data.extend_from_slice(value);
        }
        Self { grid, dim: value.len(), data }
    }

    pub fn from_nodes(grid: TimeGrid, dim: usize, data: Vec<f64>) -> Result<Self, GridError> {
        let expected = dim * grid.nodes();
        if data.len() != expected {
            return Err(GridError::Length { expected, got: data.len() });
        }
        Ok(Self { grid, dim, data })
    }

    pub fn from_fn(grid: TimeGrid, dim: usize, mut f: impl FnMut(usize, f64) -> Vec<f64>) -> Self {
        let mut data = Vec::with_capacity(dim * grid.nodes());
        for k in 0..grid.nodes() {
            let v = f(k, grid.time(k));
            assert_eq!(v.len(), dim, "node {k} has wrong dimension");
            data.extend(v);
        }
        Self { grid, dim, data }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn node_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.node(self.grid.intervals())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Linear interpolation, clamped to the horizon.
    pub fn at(&self, tau: f64) -> Vec<f64> {
        let h = self.grid.step();
        let n = self.grid.intervals();
        let pos = (tau / h).clamp(0.0, n as f64);
        let k = (pos.floor() as usize).min(n - 1);
        let w = pos - k as f64;
        self.node(k)
            .iter()
            .zip(self.node(k + 1))
            .map(|(a, b)| (1.0 - w) * a + w * b)
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Samples at nodes `1..=N`; the shared initial node is dropped.
    pub fn without_initial(&self) -> &[f64] {
        &self.data[self.dim..]
    }

    /// `self + other`, elementwise.
    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        out
    }

    /// `(1 - alpha) * self + alpha * other`.
    pub fn blend(&self, other: &Self, alpha: f64) -> Self {
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a = (1.0 - alpha) * *a + alpha * b;
        }
        out
    }
}
