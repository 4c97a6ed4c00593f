//! JSON run configuration of the benchmark and the summaries reported for a
//! run. Every field has a default, so `{}` is the full default profile.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::estimation::{EstimationRun, SyntheticData};
use super::scenario::{disturbance_schedule, WindowReport};
use super::{TankDesign, TankParams, TankProblem, ValveWindow};
use crate::dmpc::{ClosedLoopLog, DmpcConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub params: TankParams,
    pub design: TankDesign,
    /// Initial heights of the nominal closed loop.
    pub x0: [f64; 2],
    pub dmpc: DmpcConfig,
    pub estimation: EstimationConfig,
    pub sweep: SweepLadder,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            params: TankParams::default(),
            design: TankDesign::default(),
            x0: [30.0, 35.0],
            dmpc: DmpcConfig::default(),
            estimation: EstimationConfig::default(),
            sweep: SweepLadder::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EstimationSource {
    Synthetic(SyntheticData),
    /// CSV with columns `m_12, m_2, m_21, y`; relative paths resolve against
    /// the config file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationConfig {
    pub data: EstimationSource,
    pub iterations: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self { data: EstimationSource::Synthetic(SyntheticData::default()), iterations: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepLadder {
    pub q_max: Vec<usize>,
    pub j_max: Vec<usize>,
}

impl Default for SweepLadder {
    fn default() -> Self {
        Self { q_max: vec![1, 3, 5], j_max: vec![1, 3, 5] }
    }
}

/// Valve windows applied to the plant, starting from `start` (the reference
/// when absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub windows: Vec<ValveWindow>,
    /// Recovery band in cm.
    pub tolerance: f64,
    pub start: Option<[f64; 2]>,
    /// Overrides the simulation length of the DMPC config.
    pub t_sim: Option<f64>,
}

impl Default for ScenarioConfig {
    /// The three disturbances, 10 s each, 150 s apart.
    fn default() -> Self {
        Self { windows: disturbance_schedule(10.0, 10.0, 150.0), tolerance: 0.5, start: None, t_sim: Some(460.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(rename = "J_cl")]
    pub j_cl: f64,
    #[serde(rename = "max_terminal_V")]
    pub max_terminal_v: f64,
    pub floats_per_step: usize,
    pub wall_clock_per_step: Option<f64>,
    pub degraded_steps: usize,
    pub plant_clamps: usize,
    pub samples: usize,
    pub final_state: Vec<f64>,
}

impl RunSummary {
    pub fn from_log(log: &ClosedLoopLog) -> Self {
        Self {
            j_cl: log.j_cl(),
            max_terminal_v: log.max_terminal_value(),
            floats_per_step: log.floats_per_step(),
            wall_clock_per_step: log.wall_clock_per_step,
            degraded_steps: log.degraded_steps(),
            plant_clamps: log.plant_clamps,
            samples: log.entries.len(),
            final_state: log.entries.last().map(|e| e.x.clone()).unwrap_or_default(),
        }
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmpcSummary {
    #[serde(flatten)]
    pub run: RunSummary,
    pub beta: f64,
    pub u_ref: [f64; 2],
    pub u_eq: [f64; 2],
    pub u_ref_nominal: [f64; 2],
    pub config: DmpcConfig,
    pub central: Option<RunSummary>,
    pub windows: Option<Vec<WindowReport>>,
    /// Step after which the plant state became non-finite.
    pub diverged_at: Option<usize>,
}

impl DmpcSummary {
    pub fn new(log: &ClosedLoopLog, problem: &TankProblem, design: &TankDesign, config: DmpcConfig) -> Self {
        Self {
            run: RunSummary::from_log(log),
            beta: problem.beta,
            u_ref: problem.u_ref,
            u_eq: problem.u_eq,
            u_ref_nominal: design.u_ref_nominal,
            config,
            central: None,
            windows: None,
            diverged_at: None,
        }
    }
}

/// Contents of `estimate.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationSummary {
    /// `[a_12, a_2, a_21]`.
    pub estimate: [f64; 3],
    pub objective: f64,
    pub central: [f64; 3],
    pub central_objective: f64,
    pub iterations: usize,
    pub final_error: f64,
    pub rows: usize,
    pub provenance: String,
}

impl EstimationSummary {
    pub fn new(run: &EstimationRun, rows: usize, provenance: &str) -> Self {
        Self {
            estimate: run.estimate,
            objective: run.objective,
            central: run.central,
            central_objective: run.central_objective,
            iterations: run.trace.len().saturating_sub(1),
            final_error: run.trace.last().map_or(f64::NAN, |r| r.error),
            rows,
            provenance: provenance.to_string(),
        }
    }
}
