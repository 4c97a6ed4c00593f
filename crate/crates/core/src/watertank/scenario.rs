//! Valve disturbances applied to the plant while the controller keeps the
//! nominal model.

use serde::{Deserialize, Serialize};

use super::{TankParams, TankPlant, TankProblem, ValveWindow, Valves};
use crate::dmpc::{run_closed_loop, ClosedLoopLog, DmpcConfig, DmpcError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Disturbance {
    /// All valves open.
    I,
    /// Tank 2 outflow closed.
    II,
    /// Coupling closed.
    III,
}

impl Disturbance {
    pub const ALL: [Disturbance; 3] = [Disturbance::I, Disturbance::II, Disturbance::III];

    pub fn valves(self) -> Valves {
        match self {
            Disturbance::I => Valves { a: true, b: true, c: true },
            Disturbance::II => Valves { a: false, b: true, c: false },
            Disturbance::III => Valves { a: false, b: false, c: true },
        }
    }

    pub fn window(self, start: f64, duration: f64) -> ValveWindow {
        ValveWindow { name: format!("{self:?}"), valves: self.valves(), start, end: start + duration }
    }
}

/// The three disturbances one after another: each held for `duration`
/// seconds, the first starting at `lead`, consecutive starts `period` apart.
pub fn disturbance_schedule(lead: f64, duration: f64, period: f64) -> Vec<ValveWindow> {
    Disturbance::ALL
        .iter()
        .enumerate()
        .map(|(k, d)| d.window(lead + k as f64 * period, duration))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub name: String,
    pub start: f64,
    pub end: f64,
    /// Largest `‖x − x_ref‖∞` from the window start until the next one.
    pub peak_deviation: f64,
    /// Seconds after `end` until the states stay within the tolerance up to
    /// the next window (or the end of the run).
    pub recovery: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub log: ClosedLoopLog,
    pub windows: Vec<WindowReport>,
}

fn deviation(x: &[f64], x_ref: &[f64; 2]) -> f64 {
    x.iter().zip(x_ref).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Closed loop from `x0` with the valve `schedule` applied to the plant.
pub fn run_scenario(
    problem: &TankProblem,
    params: &TankParams,
    schedule: &[ValveWindow],
    x0: [f64; 2],
    cfg: &DmpcConfig,
    tolerance: f64,
) -> Result<ScenarioRun, DmpcError> {
    let mut sorted = schedule.to_vec();
    sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
    for w in &sorted {
        if !(w.start < w.end) {
            return Err(DmpcError::Config(format!("window {} is empty", w.name)));
        }
    }
    if sorted.windows(2).any(|p| p[1].start < p[0].end) {
        return Err(DmpcError::Config("valve windows overlap".into()));
    }
    let plant = TankPlant { params: *params, schedule: sorted.clone() };
    let log = run_closed_loop(&problem.graph, &problem.agents, &plant, &x0, cfg, problem.beta)?;

    let windows = sorted
        .iter()
        .enumerate()
        .map(|(k, w)| {
            let until = sorted.get(k + 1).map_or(f64::INFINITY, |n| n.start);
            let span: Vec<_> = log.entries.iter().filter(|e| e.t >= w.start - 1e-9 && e.t < until - 1e-9).collect();
            let peak_deviation = span.iter().map(|e| deviation(&e.x, &problem.x_ref)).fold(0.0, f64::max);
            let mut settled = None;
            for e in span.iter().filter(|e| e.t >= w.end - 1e-9) {
                if deviation(&e.x, &problem.x_ref) <= tolerance {
                    settled.get_or_insert(e.t - w.end);
                } else {
                    settled = None;
                }
            }
            WindowReport { name: w.name.clone(), start: w.start, end: w.end, peak_deviation, recovery: settled }
        })
        .collect();
    Ok(ScenarioRun { log, windows })
}
