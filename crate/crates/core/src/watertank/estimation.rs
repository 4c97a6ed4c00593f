//! Least-squares identification of the cross sections `a = [a_12, a_2, a_21]`
//! from steady states of the nominal system, centrally and with the
//! distributed static scheme.
//!
//! At rest with valve A closed, tank 1 drains only into tank 2, so each
//! operating point `(u, h)` gives two balances
//!
//! ```text
//! a_12 √(2g Δh)                 = u_1
//! a_2 √(2g h_2) − a_21 √(2g Δh) = u_2,     Δh = h_1 − h_2,
//! ```
//!
//! one regressor row each. The physical constraints are `a_12 = a_21` and
//! `a ≥ 0`.
//!
//! Agent 0 owns `a_12 ≥ 0` and the tank-1 rows. Agent 1 owns `(a_2, a_21) ≥ 0`,
//! the tank-2 rows and the coupled equality `a_21 − a_12 = 0`. Intermediate
//! iterates violate the equality, so `f(a^q)` can dip below the optimum before
//! settling on it.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TankParams;
use crate::graph::CouplingGraph;
use crate::problem::{PrimalDualPoint, QuadraticAgent};
use crate::sbdp_static::{sbdp_iterate, sbdp_solve, SbdpConfig, SbdpError};

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("regressor has shape {rows}x{cols} but {obs} observations; need at least 3 rows and 3 columns")]
    DimensionMismatch { rows: usize, cols: usize, obs: usize },
    #[error("dataset: {0}")]
    Read(String),
    #[error(transparent)]
    Solver(#[from] SbdpError),
}

/// Regressor `M` (columns `a_12, a_2, a_21`) and observations `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationDataset {
    pub regressor: DMatrix<f64>,
    pub observations: DVector<f64>,
    pub provenance: String,
}

/// Steady states on a `u1_levels × u2_levels` grid of pump inputs with
/// relative Gaussian noise on the measured heights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    pub u1_range: [f64; 2],
    pub u2_range: [f64; 2],
    pub u1_levels: usize,
    pub u2_levels: usize,
    /// Standard deviation relative to the height.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self { u1_range: [15.0, 45.0], u2_range: [10.0, 40.0], u1_levels: 10, u2_levels: 10, noise: 0.01, seed: 42 }
    }
}

fn levels(range: [f64; 2], n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![range[0]];
    }
    (0..n).map(|k| range[0] + (range[1] - range[0]) * k as f64 / (n - 1) as f64).collect()
}

impl EstimationDataset {
    pub fn new(regressor: DMatrix<f64>, observations: DVector<f64>, provenance: impl Into<String>) -> Result<Self, EstimationError> {
        let (rows, cols) = regressor.shape();
        if rows < 3 || cols != 3 || observations.len() != rows {
            return Err(EstimationError::DimensionMismatch { rows, cols, obs: observations.len() });
        }
        Ok(Self { regressor, observations, provenance: provenance.into() })
    }

    /// Reads rows `m_12, m_2, m_21, y` (with a header line).
    pub fn from_csv<R: std::io::Read>(reader: R, provenance: impl Into<String>) -> Result<Self, EstimationError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut values = Vec::new();
        for (line, rec) in rdr.deserialize::<[f64; 4]>().enumerate() {
            let row = rec.map_err(|e| EstimationError::Read(format!("row {}: {e}", line + 1)))?;
            values.push(row);
        }
        let m = DMatrix::from_fn(values.len(), 3, |r, c| values[r][c]);
        let y = DVector::from_iterator(values.len(), values.iter().map(|r| r[3]));
        Self::new(m, y, provenance)
    }

    /// Two balance rows per operating point of `params` (valve A closed).
    pub fn synthetic(params: &TankParams, spec: &SyntheticData) -> Self {
        let g2 = 2.0 * params.gravity;
        let (a12, a2) = (params.coupling, params.outflow[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut rows = Vec::new();
        let mut obs = Vec::new();
        for &u1 in &levels(spec.u1_range, spec.u1_levels) {
            for &u2 in &levels(spec.u2_range, spec.u2_levels) {
                let h2 = ((u1 + u2) / a2).powi(2) / g2;
                let h1 = h2 + (u1 / a12).powi(2) / g2;
                let mut measure = |h: f64| h * (1.0 + spec.noise * normal.sample(&mut rng));
                let (m1, m2) = (measure(h1), measure(h2));
                let d = m1 - m2;
                let root_d = d.signum() * (g2 * d.abs()).sqrt();
                rows.extend([root_d, 0.0, 0.0, 0.0, (g2 * m2.max(0.0)).sqrt(), -root_d]);
                obs.extend([u1, u2]);
            }
        }
        let m = obs.len();
        Self {
            regressor: DMatrix::from_row_slice(m, 3, &rows),
            observations: DVector::from_vec(obs),
            provenance: format!("synthetic seed {} noise {}", spec.seed, spec.noise),
        }
    }

    pub fn rows(&self) -> usize {
        self.observations.len()
    }

    /// `‖M a − y‖²`.
    pub fn objective(&self, a: &[f64; 3]) -> f64 {
        (&self.regressor * DVector::from_column_slice(a) - &self.observations).norm_squared()
    }

    /// Rows touching only `a_12` and the rest.
    fn split_rows(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.rows()).partition(|&r| self.regressor[(r, 1)] == 0.0 && self.regressor[(r, 2)] == 0.0)
    }
}

/// `‖N z − w‖²` as `½ zᵀ(2NᵀN)z − 2(Nᵀw)ᵀz + wᵀw`.
fn least_squares(n: &DMatrix<f64>, w: &DVector<f64>, own: usize, nb: Vec<usize>) -> QuadraticAgent {
    QuadraticAgent::new(own, nb, 2.0 * n.transpose() * n, -2.0 * n.transpose() * w).with_offset(w.norm_squared())
}

/// The two local problems over `a_12` (agent 0) and `(a_2, a_21)` (agent 1).
pub fn build_estimation_problem(data: &EstimationDataset) -> Result<(CouplingGraph, Vec<QuadraticAgent>), EstimationError> {
    let (rows, cols) = data.regressor.shape();
    if rows < 3 || cols != 3 || data.observations.len() != rows {
        return Err(EstimationError::DimensionMismatch { rows, cols, obs: data.observations.len() });
    }
    let (first, rest) = data.split_rows();
    let pick = |idx: &[usize], cols: &[usize]| {
        DMatrix::from_fn(idx.len(), cols.len(), |r, c| data.regressor[(idx[r], cols[c])])
    };
    let obs = |idx: &[usize]| DVector::from_fn(idx.len(), |r, _| data.observations[idx[r]]);

    // z = [a_12; a_2, a_21], the neighbor block is unused
    let n0 = pick(&first, &[0]).insert_columns(1, 2, 0.0);
    let agent0 = least_squares(&n0, &obs(&first), 1, vec![2])
        .with_inequalities(DMatrix::from_row_slice(1, 3, &[-1.0, 0.0, 0.0]), DVector::zeros(1));

    // z = [a_2, a_21; a_12]
    let n1 = pick(&rest, &[1, 2, 0]);
    let agent1 = least_squares(&n1, &obs(&rest), 2, vec![1])
        .with_equalities(DMatrix::from_row_slice(1, 3, &[0.0, 1.0, -1.0]), DVector::zeros(1))
        .with_inequalities(DMatrix::from_row_slice(2, 3, &[-1.0, 0.0, 0.0, 0.0, -1.0, 0.0]), DVector::zeros(2));

    Ok((CouplingGraph::path(2).expect("two agents"), vec![agent0, agent1]))
}

/// Newton rule with a local tolerance matched to the size of `MᵀM`
/// (entries around 1e7 for flows in cm³/s).
pub fn estimation_config() -> SbdpConfig {
    let mut cfg = SbdpConfig::newton();
    cfg.local.tolerance = 1e-8;
    cfg
}

/// Central solution over `(a_12, a_2)` with `a_21 = a_12` eliminated.
pub fn central_estimate(data: &EstimationDataset) -> Result<[f64; 3], EstimationError> {
    let m = &data.regressor;
    let n = DMatrix::from_fn(m.nrows(), 2, |r, c| if c == 0 { m[(r, 0)] + m[(r, 2)] } else { m[(r, 1)] });
    let qp = least_squares(&n, &data.observations, 2, Vec::new())
        .with_inequalities(-DMatrix::<f64>::identity(2, 2), DVector::zeros(2));
    let out = sbdp_solve(&CouplingGraph::single(), std::slice::from_ref(&qp), &estimation_config())?;
    let x = &out.points[0].x;
    Ok([x[0], x[1], x[0]])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimationTraceRow {
    pub q: usize,
    /// `‖a^q − a*‖∞` against the central solution.
    pub error: f64,
    /// `f(a^q)`.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationRun {
    pub estimate: [f64; 3],
    pub objective: f64,
    pub central: [f64; 3],
    pub central_objective: f64,
    pub trace: Vec<EstimationTraceRow>,
}

impl EstimationRun {
    pub fn trace_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["q", "error", "value"]).expect("in-memory write");
        for r in &self.trace {
            w.write_record([r.q.to_string(), r.error.to_string(), r.value.to_string()]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }
}

fn parameters(points: &[PrimalDualPoint]) -> [f64; 3] {
    [points[0].x[0], points[1].x[0], points[1].x[1]]
}

/// `iterations` rounds of the static scheme from `a = 0`, recording the
/// error and objective after every round.
pub fn estimate_distributed(data: &EstimationDataset, cfg: &SbdpConfig, iterations: usize) -> Result<EstimationRun, EstimationError> {
    let (graph, agents) = build_estimation_problem(data)?;
    let central = central_estimate(data)?;
    let row = |q: usize, a: &[f64; 3]| EstimationTraceRow {
        q,
        error: a.iter().zip(&central).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
        value: data.objective(a),
    };
    let mut points: Vec<PrimalDualPoint> = agents.iter().map(PrimalDualPoint::for_agent).collect();
    let mut trace = vec![row(0, &parameters(&points))];
    for q in 1..=iterations {
        points = sbdp_iterate(&graph, &agents, points, cfg)?;
        trace.push(row(q, &parameters(&points)));
    }
    let estimate = parameters(&points);
    Ok(EstimationRun {
        estimate,
        objective: data.objective(&estimate),
        central,
        central_objective: data.objective(&central),
        trace,
    })
}
