//! Two coupled water tanks.
//!
//! Tank heights `h = [h_1, h_2]` in cm evolve by the mass balance
//!
//! ```text
//! ḣ_i = u_i / A − (a_i / A) √(2 g h_i) + (a_12 / A) φ(h_j − h_i)
//! ```
//!
//! with the signed root `φ(d) = sign(d) √(2 g |d|)`. Near `d = 0` the root has
//! an unbounded slope, so on `|d| ≤ δ_s` it is replaced by the odd cubic
//! `c₁ d + c₃ d³` that matches value and slope at `|d| = δ_s`.
//!
//! Valve A opens the outflow of tank 1, valve B the coupling pipe and valve C
//! the outflow of tank 2. The nominal configuration has A closed.

pub mod config;
pub mod estimation;
pub mod scenario;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmpc::{DmpcAgent, Plant};
use crate::graph::CouplingGraph;
use crate::ocp::AgentOcp;
use crate::problem::Block;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TankError {
    #[error("negative height {height} cm in tank {tank}")]
    NegativeHeight { tank: usize, height: f64 },
    #[error("invalid tank parameters: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TankParams {
    /// Base area `A`, cm².
    pub area: f64,
    /// Outflow cross sections `a_1, a_2` with the valve open, cm².
    pub outflow: [f64; 2],
    /// Coupling cross section `a_12 = a_21`, cm².
    pub coupling: f64,
    /// cm/s².
    pub gravity: f64,
    /// Pump bounds, cm³/s.
    pub u_min: f64,
    pub u_max: f64,
    /// Half-width of the smoothed coupling region, cm.
    pub smoothing: f64,
}

impl Default for TankParams {
    fn default() -> Self {
        Self {
            area: 144.0,
            outflow: [0.354, 0.354],
            coupling: 0.216,
            gravity: 981.0,
            u_min: 8.333,
            u_max: 100.0,
            smoothing: 0.5,
        }
    }
}

impl TankParams {
    pub fn validate(&self) -> Result<(), TankError> {
        let bad = |m: String| Err(TankError::Invalid(m));
        if !(self.area > 0.0) {
            return bad(format!("area must be positive, got {}", self.area));
        }
        if !(self.outflow.iter().all(|a| *a >= 0.0) && self.coupling >= 0.0) {
            return bad("cross sections must be nonnegative".into());
        }
        if !(self.gravity > 0.0) {
            return bad(format!("gravity must be positive, got {}", self.gravity));
        }
        if !(self.u_min < self.u_max) {
            return bad(format!("empty input range [{}, {}]", self.u_min, self.u_max));
        }
        if !(self.smoothing > 0.0) {
            return bad(format!("smoothing width must be positive, got {}", self.smoothing));
        }
        Ok(())
    }

    /// Effective cross sections `(a_1, a_2, a_12)` under `valves`.
    pub fn sections(&self, valves: Valves) -> ([f64; 2], f64) {
        let open = |v: bool, a: f64| if v { a } else { 0.0 };
        ([open(valves.a, self.outflow[0]), open(valves.c, self.outflow[1])], open(valves.b, self.coupling))
    }

    fn cubic(&self) -> (f64, f64) {
        let d = self.smoothing;
        let v = (2.0 * self.gravity * d).sqrt();
        (5.0 * v / (4.0 * d), -v / (4.0 * d.powi(3)))
    }

    /// Smoothed signed root `φ(d)`.
    pub fn signed_root(&self, d: f64) -> f64 {
        let m = d.abs();
        let r = if m <= self.smoothing {
            let (c1, c3) = self.cubic();
            c1 * m + c3 * m.powi(3)
        } else {
            (2.0 * self.gravity * m).sqrt()
        };
        if d < 0.0 {
            -r
        } else {
            r
        }
    }

    /// `φ'(d)`.
    pub fn signed_root_slope(&self, d: f64) -> f64 {
        let m = d.abs();
        if m <= self.smoothing {
            let (c1, c3) = self.cubic();
            c1 + 3.0 * c3 * m * m
        } else {
            self.gravity / (2.0 * self.gravity * m).sqrt()
        }
    }

    /// Flow into tank `i` from tank `j`, cm/s of height.
    pub fn coupling_flow(&self, h_i: f64, h_j: f64, valves: Valves) -> f64 {
        let (_, a) = self.sections(valves);
        a / self.area * self.signed_root(h_j - h_i)
    }

    fn outflow_rate(&self, a: f64, h: f64) -> f64 {
        a / self.area * (2.0 * self.gravity * h.max(0.0)).sqrt()
    }

    fn outflow_slope(&self, a: f64, h: f64) -> f64 {
        if a == 0.0 {
            return 0.0;
        }
        a / self.area * self.gravity / (2.0 * self.gravity * h.max(1e-9)).sqrt()
    }

    /// Height rate without the pump term.
    fn drift(&self, h: [f64; 2], valves: Valves) -> [f64; 2] {
        let (out, _) = self.sections(valves);
        [
            -self.outflow_rate(out[0], h[0]) + self.coupling_flow(h[0], h[1], valves),
            -self.outflow_rate(out[1], h[1]) + self.coupling_flow(h[1], h[0], valves),
        ]
    }

    /// Pump inputs that hold `h` at rest.
    pub fn equilibrium_input(&self, h: [f64; 2], valves: Valves) -> [f64; 2] {
        let f = self.drift(h, valves);
        [-self.area * f[0], -self.area * f[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Valves {
    /// Tank 1 drain.
    pub a: bool,
    /// Coupling pipe.
    pub b: bool,
    /// Tank 2 drain.
    pub c: bool,
}

impl Valves {
    pub const NOMINAL: Valves = Valves { a: false, b: true, c: true };
}

impl Default for Valves {
    fn default() -> Self {
        Self::NOMINAL
    }
}

/// `ḣ` in cm/s.
pub fn tank_rhs(h: [f64; 2], u: [f64; 2], params: &TankParams, valves: Valves) -> Result<[f64; 2], TankError> {
    for (tank, &height) in h.iter().enumerate() {
        if !(height >= 0.0) {
            return Err(TankError::NegativeHeight { tank, height });
        }
    }
    let f = params.drift(h, valves);
    Ok([f[0] + u[0] / params.area, f[1] + u[1] / params.area])
}

/// Controller design data. `u_ref = None` uses the equilibrium input of the
/// nominal model at `x_ref`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TankDesign {
    pub x_ref: [f64; 2],
    pub u_ref: Option<[f64; 2]>,
    /// Design-sheet input reference, kept for reports; the controller uses `u_ref`.
    pub u_ref_nominal: [f64; 2],
    /// Stage weights in `Q Δx² + R Δu²`.
    pub q: [f64; 2],
    pub r: [f64; 2],
    /// Terminal cost `P Δx²`.
    pub p: [f64; 2],
    /// Terminal law `u = u_ref − K Δx_i − K_cross Δx_j`.
    pub k: [f64; 2],
    pub k_cross: [f64; 2],
    /// Terminal region level.
    pub beta: f64,
}

impl Default for TankDesign {
    fn default() -> Self {
        Self {
            x_ref: [40.0, 20.0],
            u_ref: None,
            u_ref_nominal: [44.27, 27.24],
            q: [1.0, 1.0],
            r: [0.1, 0.1],
            p: [48.30, 30.87],
            k: [3.06, 1.97],
            k_cross: [0.0, 0.0],
            beta: 6.334e3,
        }
    }
}

/// One tank as an agent of the distributed OCP. State `[h_i]`, control
/// `[u_i]`, one neighbor `[h_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TankAgent {
    pub index: usize,
    pub params: TankParams,
    pub valves: Valves,
    pub x_ref: f64,
    pub u_ref: f64,
    pub q: f64,
    pub r: f64,
    pub p: f64,
    pub k: f64,
    pub k_cross: f64,
    pub x_ref_neighbor: f64,
}

impl TankAgent {
    fn outflow(&self) -> f64 {
        self.params.sections(self.valves).0[self.index]
    }
}

impl AgentOcp for TankAgent {
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn neighbor_dims(&self) -> Vec<usize> {
        vec![1]
    }

    fn drift(&self, x: &[f64], nb: &[&[f64]]) -> DVector<f64> {
        let p = &self.params;
        let v = -p.outflow_rate(self.outflow(), x[0]) + p.coupling_flow(x[0], nb[0][0], self.valves);
        DVector::from_element(1, v)
    }

    fn drift_jacobian(&self, x: &[f64], nb: &[&[f64]], wrt: Block) -> DMatrix<f64> {
        let p = &self.params;
        let c = p.sections(self.valves).1 / p.area * p.signed_root_slope(nb[0][0] - x[0]);
        let v = match wrt {
            Block::Own => -p.outflow_slope(self.outflow(), x[0]) - c,
            Block::Neighbor(_) => c,
        };
        DMatrix::from_element(1, 1, v)
    }

    fn input_matrix(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0 / self.params.area)
    }

    fn input_gradient(&self, _x: &[f64], _u: &[f64], _lambda: &[f64]) -> DVector<f64> {
        DVector::zeros(1)
    }

    fn stage_cost(&self, x: &[f64], _nb: &[&[f64]]) -> f64 {
        self.q * (x[0] - self.x_ref).powi(2)
    }

    fn stage_cost_gradient(&self, x: &[f64], _nb: &[&[f64]], wrt: Block) -> DVector<f64> {
        match wrt {
            Block::Own => DVector::from_element(1, 2.0 * self.q * (x[0] - self.x_ref)),
            Block::Neighbor(_) => DVector::zeros(1),
        }
    }

    // ½ R' Δu² with R' = 2R
    fn control_weight(&self) -> DVector<f64> {
        DVector::from_element(1, 2.0 * self.r)
    }
    fn u_ref(&self) -> DVector<f64> {
        DVector::from_element(1, self.u_ref)
    }
    fn u_min(&self) -> DVector<f64> {
        DVector::from_element(1, self.params.u_min)
    }
    fn u_max(&self) -> DVector<f64> {
        DVector::from_element(1, self.params.u_max)
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.p * (x[0] - self.x_ref).powi(2)
    }

    fn terminal_gradient(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_element(1, 2.0 * self.p * (x[0] - self.x_ref))
    }
}

impl DmpcAgent for TankAgent {
    fn x_ref(&self) -> DVector<f64> {
        DVector::from_element(1, self.x_ref)
    }

    fn terminal_control(&self, x: &[f64], nb: &[&[f64]]) -> DVector<f64> {
        let u = self.u_ref - self.k * (x[0] - self.x_ref) - self.k_cross * (nb[0][0] - self.x_ref_neighbor);
        DVector::from_element(1, u)
    }

    fn closed_loop_stage(&self, x: &[f64], u: &[f64]) -> f64 {
        self.q * (x[0] - self.x_ref).powi(2) + self.r * (u[0] - self.u_ref).powi(2)
    }
}

/// Assembled controller problem.
#[derive(Debug, Clone, PartialEq)]
pub struct TankProblem {
    pub graph: CouplingGraph,
    pub agents: Vec<TankAgent>,
    pub x_ref: [f64; 2],
    /// Input reference used by the controller.
    pub u_ref: [f64; 2],
    /// Equilibrium input of the nominal model at `x_ref`.
    pub u_eq: [f64; 2],
    pub beta: f64,
}

pub fn build_dmpc_problem(params: &TankParams, design: &TankDesign) -> Result<TankProblem, TankError> {
    params.validate()?;
    let u_eq = params.equilibrium_input(design.x_ref, Valves::NOMINAL);
    let u_ref = design.u_ref.unwrap_or(u_eq);
    for u in u_ref {
        if !(u >= params.u_min && u <= params.u_max) {
            return Err(TankError::Invalid(format!("input reference {u} outside the pump range")));
        }
    }
    let agents = (0..2)
        .map(|i| TankAgent {
            index: i,
            params: *params,
            valves: Valves::NOMINAL,
            x_ref: design.x_ref[i],
            u_ref: u_ref[i],
            q: design.q[i],
            r: design.r[i],
            p: design.p[i],
            k: design.k[i],
            k_cross: design.k_cross[i],
            x_ref_neighbor: design.x_ref[1 - i],
        })
        .collect();
    Ok(TankProblem {
        graph: CouplingGraph::path(2).expect("two agents"),
        agents,
        x_ref: design.x_ref,
        u_ref,
        u_eq,
        beta: design.beta,
    })
}

impl TankProblem {
    /// `Σ P_i Δx_i²`.
    pub fn terminal_value(&self, x: [f64; 2]) -> f64 {
        self.agents.iter().map(|a| a.terminal_cost(&[x[a.index]])).sum()
    }
}

/// A valve configuration held over `[start, end)` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValveWindow {
    pub name: String,
    pub valves: Valves,
    pub start: f64,
    pub end: f64,
}

/// Simulated tanks with a valve schedule; nominal valves outside all windows.
#[derive(Debug, Clone, PartialEq)]
pub struct TankPlant {
    pub params: TankParams,
    pub schedule: Vec<ValveWindow>,
}

impl TankPlant {
    pub fn nominal(params: TankParams) -> Self {
        Self { params, schedule: Vec::new() }
    }

    pub fn valves_at(&self, t: f64) -> Valves {
        self.schedule
            .iter()
            .find(|w| t >= w.start && t < w.end)
            .map(|w| w.valves)
            .unwrap_or(Valves::NOMINAL)
    }
}

impl Plant for TankPlant {
    fn state_dim(&self) -> usize {
        2
    }

    fn rhs(&self, t: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
        let h = [x[0].max(0.0), x[1].max(0.0)];
        let r = tank_rhs(h, [u[0], u[1]], &self.params, self.valves_at(t)).expect("heights clamped at zero");
        DVector::from_column_slice(&r)
    }

    fn floor(&self) -> Option<f64> {
        Some(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_matches_root_at_the_boundary() {
        let p = TankParams::default();
        let d = p.smoothing;
        let root = (2.0 * p.gravity * d).sqrt();
        let slope = p.gravity / root;
        let (c1, c3) = p.cubic();
        assert!((c1 * d + c3 * d.powi(3) - root).abs() < 1e-12);
        assert!((c1 + 3.0 * c3 * d * d - slope).abs() < 1e-12);
        assert_eq!(p.signed_root(-0.3), -p.signed_root(0.3));
    }

    #[test]
    fn nominal_valves_close_tank_one_outflow() {
        let p = TankParams::default();
        assert_eq!(p.sections(Valves::NOMINAL), ([0.0, 0.354], 0.216));
        assert_eq!(p.sections(Valves { a: true, b: false, c: true }), ([0.354, 0.354], 0.0));
    }

    #[test]
    fn negative_height_is_rejected() {
        let p = TankParams::default();
        assert_eq!(
            tank_rhs([1.0, -0.5], [0.0, 0.0], &p, Valves::NOMINAL),
            Err(TankError::NegativeHeight { tank: 1, height: -0.5 })
        );
    }
}
