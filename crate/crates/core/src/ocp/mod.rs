//! Input-affine optimal control problems of one agent on a fixed grid.
//!
//! An agent has dynamics `ẋ = f⁰(x, x_N) + B(x) u`, stage cost
//! `l⁰(x, x_N) + ½ (u - u_ref)ᵀ R (u - u_ref)` with diagonal `R`, terminal
//! cost `V(x)` and a control box. Frozen neighbor trajectories and the
//! summed sensitivity signals form a [`HamiltonianContext`]; the fixed-point
//! solver alternates a forward state sweep and a backward adjoint sweep, both
//! with Heun's method on the grid nodes, and recovers controls by projecting
//! the unconstrained Hamiltonian minimizer onto the box.

pub mod stacked;
pub mod transcription;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derivative::{self, DerivativeReport};
use crate::grid::{TimeGrid, Trajectory};
use crate::problem::{fd_block_gradient, fd_block_jacobian, Block};

/// One agent's optimal control problem. Derivatives default to central
/// differences.
pub trait AgentOcp: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn neighbor_dims(&self) -> Vec<usize>;

    fn drift(&self, x: &[f64], nb: &[&[f64]]) -> DVector<f64>;

    fn drift_jacobian(&self, x: &[f64], nb: &[&[f64]], wrt: Block) -> DMatrix<f64> {
        fd_block_jacobian(x, nb, wrt, self.state_dim(), |x, nb| self.drift(x, nb))
    }

    /// `B(x)`, `n_x × n_u`.
    fn input_matrix(&self, x: &[f64]) -> DMatrix<f64>;

    /// `∇_x (λᵀ B(x) u)`.
    fn input_gradient(&self, x: &[f64], u: &[f64], lambda: &[f64]) -> DVector<f64> {
        let u = DVector::from_column_slice(u);
        let l = DVector::from_column_slice(lambda);
        derivative::gradient(|x| l.dot(&(self.input_matrix(x) * &u)), x)
    }

    /// Control-independent part `l⁰` of the stage cost.
    fn stage_cost(&self, x: &[f64], nb: &[&[f64]]) -> f64;

    fn stage_cost_gradient(&self, x: &[f64], nb: &[&[f64]], wrt: Block) -> DVector<f64> {
        fd_block_gradient(x, nb, wrt, |x, nb| self.stage_cost(x, nb))
    }

    /// Diagonal of `R` in `½ (u - u_ref)ᵀ R (u - u_ref)`.
    fn control_weight(&self) -> DVector<f64>;
    fn u_ref(&self) -> DVector<f64>;
    fn u_min(&self) -> DVector<f64>;
    fn u_max(&self) -> DVector<f64>;

    fn terminal_cost(&self, x: &[f64]) -> f64;

    fn terminal_gradient(&self, x: &[f64]) -> DVector<f64> {
        derivative::gradient(|x| self.terminal_cost(x), x)
    }
}

impl<T: AgentOcp + ?Sized> AgentOcp for Box<T> {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn control_dim(&self) -> usize {
        (**self).control_dim()
    }
    fn neighbor_dims(&self) -> Vec<usize> {
        (**self).neighbor_dims()
    }
    fn drift(&self, x: &[f64], nb: &[&[f64]]) -> DVector<f64> {
        (**self).drift(x, nb)
    }
    fn drift_jacobian(&self, x: &[f64], nb: &[&[f64]], wrt: Block) -> DMatrix<f64> {
        (**self).drift_jacobian(x, nb, wrt)
    }
    fn input_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        (**self).input_matrix(x)
    }
    fn input_gradient(&self, x: &[f64], u: &[f64], lambda: &[f64]) -> DVector<f64> {
        (**self).input_gradient(x, u, lambda)
    }
    fn stage_cost(&self, x: &[f64], nb: &[&[f64]]) -> f64 {
        (**self).stage_cost(x, nb)
    }
    fn stage_cost_gradient(&self, x: &[f64], nb: &[&[f64]], wrt: Block) -> DVector<f64> {
        (**self).stage_cost_gradient(x, nb, wrt)
    }
    fn control_weight(&self) -> DVector<f64> {
        (**self).control_weight()
    }
    fn u_ref(&self) -> DVector<f64> {
        (**self).u_ref()
    }
    fn u_min(&self) -> DVector<f64> {
        (**self).u_min()
    }
    fn u_max(&self) -> DVector<f64> {
        (**self).u_max()
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        (**self).terminal_cost(x)
    }
    fn terminal_gradient(&self, x: &[f64]) -> DVector<f64> {
        (**self).terminal_gradient(x)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("non-finite value in the {sweep} sweep of fixed-point iteration {iteration}")]
    NonFiniteState { sweep: &'static str, iteration: usize },
    #[error("trajectories live on different grids")]
    GridMismatch,
    #[error("missing trajectory for neighbor slot {slot}")]
    MissingNeighborData { slot: usize },
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension { what: String, expected: usize, got: usize },
    #[error("invalid problem: {0}")]
    Invalid(String),
}

/// Checks bounds and weights of an agent.
pub fn validate_ocp<A: AgentOcp + ?Sized>(agent: &A) -> Result<(), OcpError> {
    let nu = agent.control_dim();
    for (what, v) in [
        ("control weight", agent.control_weight()),
        ("u_ref", agent.u_ref()),
        ("u_min", agent.u_min()),
        ("u_max", agent.u_max()),
    ] {
        if v.len() != nu {
            return Err(OcpError::Dimension { what: what.into(), expected: nu, got: v.len() });
        }
    }
    if agent.control_weight().iter().any(|r| !(*r > 0.0)) {
        return Err(OcpError::Invalid("control weights must be positive".into()));
    }
    if agent.u_min().iter().zip(agent.u_max().iter()).any(|(lo, hi)| !(lo < hi)) {
        return Err(OcpError::Invalid("control bounds must satisfy u_min < u_max".into()));
    }
    Ok(())
}

/// States, adjoints and controls of one agent at the grid nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrajectorySet {
    pub x: Trajectory,
    pub lambda: Trajectory,
    pub u: Trajectory,
}

impl AgentTrajectorySet {
    pub fn grid(&self) -> &TimeGrid {
        self.x.grid()
    }

    /// Largest change over all three series.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.x
            .max_abs_diff(&other.x)
            .max(self.lambda.max_abs_diff(&other.lambda))
            .max(self.u.max_abs_diff(&other.u))
    }

    pub fn blend(&self, other: &Self, alpha: f64) -> Self {
        Self {
            x: self.x.blend(&other.x, alpha),
            lambda: self.lambda.blend(&other.lambda, alpha),
            u: self.u.blend(&other.u, alpha),
        }
    }

    /// Columns `tau, x_0.., lambda_0.., u_0..`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["tau".to_string()];
        header.extend((0..self.x.dim()).map(|k| format!("x_{k}")));
        header.extend((0..self.lambda.dim()).map(|k| format!("lambda_{k}")));
        header.extend((0..self.u.dim()).map(|k| format!("u_{k}")));
        w.write_record(&header).expect("in-memory write");
        for k in 0..self.grid().nodes() {
            let mut row = vec![self.grid().time(k).to_string()];
            for series in [&self.x, &self.lambda, &self.u] {
                row.extend(series.node(k).iter().map(f64::to_string));
            }
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }
}

/// Trajectory sensitivity `g_ij(τ)` sent from agent `i` to neighbor `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySignal {
    pub from: usize,
    pub to: usize,
    pub values: Trajectory,
}

/// `ũ = clamp(u_ref - R⁻¹ B(x)ᵀ λ, u_min, u_max)`, the pointwise minimizer of
/// the Hamiltonian over the control box.
pub fn control_projection<A: AgentOcp + ?Sized>(agent: &A, x: &[f64], lambda: &[f64]) -> DVector<f64> {
    let bt_l = agent.input_matrix(x).transpose() * DVector::from_column_slice(lambda);
    let r = agent.control_weight();
    let (lo, hi) = (agent.u_min(), agent.u_max());
    let ur = agent.u_ref();
    DVector::from_fn(ur.len(), |k, _| (ur[k] - bt_l[k] / r[k]).clamp(lo[k], hi[k]))
}

fn check_grid(a: &Trajectory, grid: &TimeGrid, dim: usize, what: &str) -> Result<(), OcpError> {
    if a.grid() != grid {
        return Err(OcpError::GridMismatch);
    }
    if a.dim() != dim {
        return Err(OcpError::Dimension { what: what.into(), expected: dim, got: a.dim() });
    }
    Ok(())
}

/// Frozen data of one local problem: neighbor state trajectories, the summed
/// incoming sensitivity signals and the agent's previous own states.
pub struct HamiltonianContext<'a, A: AgentOcp + ?Sized> {
    pub agent: &'a A,
    grid: TimeGrid,
    neighbors: Vec<&'a Trajectory>,
    sensitivity: Option<Trajectory>,
    previous: Option<&'a Trajectory>,
}

impl<'a, A: AgentOcp + ?Sized> HamiltonianContext<'a, A> {
    pub fn new(
        agent: &'a A,
        grid: TimeGrid,
        neighbors: Vec<&'a Trajectory>,
        signals: &[&Trajectory],
        previous: Option<&'a Trajectory>,
    ) -> Result<Self, OcpError> {
        let dims = agent.neighbor_dims();
        if neighbors.len() < dims.len() {
            return Err(OcpError::MissingNeighborData { slot: neighbors.len() });
        }
        if neighbors.len() > dims.len() {
            return Err(OcpError::Dimension { what: "neighbor count".into(), expected: dims.len(), got: neighbors.len() });
        }
        for (t, &d) in neighbors.iter().zip(&dims) {
            check_grid(t, &grid, d, "neighbor trajectory")?;
        }
        let n = agent.state_dim();
        let mut sensitivity: Option<Trajectory> = None;
        for s in signals {
            check_grid(s, &grid, n, "sensitivity signal")?;
            sensitivity = Some(match sensitivity {
                None => (*s).clone(),
                Some(acc) => acc.add(s),
            });
        }
        if let Some(p) = previous {
            check_grid(p, &grid, n, "previous states")?;
        }
        validate_ocp(agent)?;
        Ok(Self { agent, grid, neighbors, sensitivity, previous })
    }

    /// Context of an agent without neighbors or signals.
    pub fn isolated(agent: &'a A, grid: TimeGrid) -> Result<Self, OcpError> {
        Self::new(agent, grid, Vec::new(), &[], None)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn neighbor_nodes(&self, k: usize) -> Vec<&[f64]> {
        self.neighbors.iter().map(|t| t.node(k)).collect()
    }

    /// `f⁰(x, x_N(τ_k)) + B(x) u`.
    pub fn dynamics(&self, k: usize, x: &[f64], u: &DVector<f64>) -> DVector<f64> {
        self.agent.drift(x, &self.neighbor_nodes(k)) + self.agent.input_matrix(x) * u
    }

    /// `∇_x H` at node `k`, including the sensitivity term.
    pub fn state_gradient(&self, k: usize, x: &[f64], u: &[f64], lambda: &[f64]) -> DVector<f64> {
        let nb = self.neighbor_nodes(k);
        let l = DVector::from_column_slice(lambda);
        let mut g = self.agent.stage_cost_gradient(x, &nb, Block::Own)
            + self.agent.drift_jacobian(x, &nb, Block::Own).transpose() * &l
            + self.agent.input_gradient(x, u, lambda);
        if let Some(s) = &self.sensitivity {
            g += DVector::from_column_slice(s.node(k));
        }
        g
    }

    /// `∇_u H = R (u - u_ref) + B(x)ᵀ λ`.
    pub fn control_gradient(&self, x: &[f64], u: &[f64], lambda: &[f64]) -> DVector<f64> {
        let r = self.agent.control_weight();
        let ur = self.agent.u_ref();
        let bt_l = self.agent.input_matrix(x).transpose() * DVector::from_column_slice(lambda);
        DVector::from_fn(u.len(), |k, _| r[k] * (u[k] - ur[k]) + bt_l[k])
    }

    /// Local Hamiltonian at node `k`.
    pub fn hamiltonian(&self, k: usize, x: &[f64], u: &[f64], lambda: &[f64]) -> f64 {
        let uv = DVector::from_column_slice(u);
        let du = &uv - self.agent.u_ref();
        let r = self.agent.control_weight();
        let quad = 0.5 * du.iter().zip(r.iter()).map(|(d, r)| r * d * d).sum::<f64>();
        let mut h = self.agent.stage_cost(x, &self.neighbor_nodes(k))
            + quad
            + DVector::from_column_slice(lambda).dot(&self.dynamics(k, x, &uv));
        if let Some(s) = &self.sensitivity {
            let prev = self.previous.map(|p| p.node(k).to_vec()).unwrap_or_else(|| vec![0.0; x.len()]);
            h += s.node(k).iter().zip(x.iter().zip(&prev)).map(|(g, (x, p))| g * (x - p)).sum::<f64>();
        }
        h
    }

    fn heun_forward(
        &self,
        x0: &[f64],
        mut control: impl FnMut(usize, &[f64]) -> DVector<f64>,
        sweep: usize,
    ) -> Result<Trajectory, OcpError> {
        let n = self.agent.state_dim();
        let h = self.grid.step();
        let mut x = Trajectory::zeros(self.grid, n);
        x.node_mut(0).copy_from_slice(x0);
        for k in 0..self.grid.intervals() {
            let xk = DVector::from_column_slice(x.node(k));
            let k1 = self.dynamics(k, xk.as_slice(), &control(k, xk.as_slice()));
            let pred = &xk + &k1 * h;
            let k2 = self.dynamics(k + 1, pred.as_slice(), &control(k + 1, pred.as_slice()));
            let next = xk + (k1 + k2) * (0.5 * h);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(OcpError::NonFiniteState { sweep: "forward", iteration: sweep });
            }
            x.node_mut(k + 1).copy_from_slice(next.as_slice());
        }
        Ok(x)
    }

    fn heun_backward(
        &self,
        x: &Trajectory,
        mut control: impl FnMut(usize, &[f64], &[f64]) -> DVector<f64>,
        sweep: usize,
    ) -> Result<Trajectory, OcpError> {
        let n = self.agent.state_dim();
        let h = self.grid.step();
        let last = self.grid.intervals();
        let mut lam = Trajectory::zeros(self.grid, n);
        lam.node_mut(last).copy_from_slice(self.agent.terminal_gradient(x.last()).as_slice());
        let g = |k: usize, l: &[f64], control: &mut dyn FnMut(usize, &[f64], &[f64]) -> DVector<f64>| {
            let u = control(k, x.node(k), l);
            -self.state_gradient(k, x.node(k), u.as_slice(), l)
        };
        for k in (0..last).rev() {
            let lk1 = DVector::from_column_slice(lam.node(k + 1));
            let k1 = g(k + 1, lk1.as_slice(), &mut control);
            let pred = &lk1 - &k1 * h;
            let k2 = g(k, pred.as_slice(), &mut control);
            let next = lk1 - (k1 + k2) * (0.5 * h);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(OcpError::NonFiniteState { sweep: "backward", iteration: sweep });
            }
            lam.node_mut(k).copy_from_slice(next.as_slice());
        }
        Ok(lam)
    }

    /// Integrates the states with `u = ũ(x, λ)` for a fixed adjoint.
    pub fn forward_sweep(&self, x0: &[f64], lambda: &Trajectory) -> Result<Trajectory, OcpError> {
        self.forward_sweep_at(x0, lambda, 0)
    }

    fn forward_sweep_at(&self, x0: &[f64], lambda: &Trajectory, sweep: usize) -> Result<Trajectory, OcpError> {
        check_grid(lambda, &self.grid, self.agent.state_dim(), "adjoint trajectory")?;
        if x0.len() != self.agent.state_dim() {
            return Err(OcpError::Dimension { what: "initial state".into(), expected: self.agent.state_dim(), got: x0.len() });
        }
        self.heun_forward(x0, |k, x| control_projection(self.agent, x, lambda.node(k)), sweep)
    }

    /// Integrates the adjoint backward from `∇V(x(T))` for fixed states.
    pub fn backward_sweep(&self, x: &Trajectory) -> Result<Trajectory, OcpError> {
        self.backward_sweep_at(x, 0)
    }

    fn backward_sweep_at(&self, x: &Trajectory, sweep: usize) -> Result<Trajectory, OcpError> {
        check_grid(x, &self.grid, self.agent.state_dim(), "state trajectory")?;
        self.heun_backward(x, |_, x, l| control_projection(self.agent, x, l), sweep)
    }

    /// Nodewise projected controls.
    pub fn controls(&self, x: &Trajectory, lambda: &Trajectory) -> Trajectory {
        let m = self.agent.control_dim();
        Trajectory::from_fn(self.grid, m, |k, _| {
            control_projection(self.agent, x.node(k), lambda.node(k)).as_slice().to_vec()
        })
    }

    /// States under prescribed nodal controls.
    pub fn simulate(&self, x0: &[f64], u: &Trajectory) -> Result<Trajectory, OcpError> {
        check_grid(u, &self.grid, self.agent.control_dim(), "control trajectory")?;
        self.heun_forward(x0, |k, _| DVector::from_column_slice(u.node(k)), 0)
    }

    /// Trapezoidal stage cost plus terminal cost along `(x, u)`.
    pub fn cost(&self, x: &Trajectory, u: &Trajectory) -> f64 {
        let r = self.agent.control_weight();
        let ur = self.agent.u_ref();
        let stage: Vec<f64> = (0..self.grid.nodes())
            .map(|k| {
                let quad: f64 =
                    u.node(k).iter().enumerate().map(|(c, v)| 0.5 * r[c] * (v - ur[c]).powi(2)).sum();
                self.agent.stage_cost(x.node(k), &self.neighbor_nodes(k)) + quad
            })
            .collect();
        self.grid.integrate(&stage) + self.agent.terminal_cost(x.last())
    }

    /// `(∂F/∂x)ᵀ v` at node `k`.
    fn state_vjp(&self, k: usize, x: &[f64], u: &[f64], v: &DVector<f64>) -> DVector<f64> {
        let nb = self.neighbor_nodes(k);
        self.agent.drift_jacobian(x, &nb, Block::Own).transpose() * v + self.agent.input_gradient(x, u, v.as_slice())
    }

    /// Exact gradient of [`cost`](Self::cost) after [`simulate`](Self::simulate)
    /// with respect to the nodal controls, by the discrete adjoint of the Heun
    /// scheme. Returns the nodal costates and the gradient.
    pub fn adjoint_control_gradient(&self, x0: &[f64], u: &Trajectory) -> Result<(Trajectory, Trajectory), OcpError> {
        let x = self.simulate(x0, u)?;
        let h = self.grid.step();
        let last = self.grid.intervals();
        let (n, m) = (self.agent.state_dim(), self.agent.control_dim());
        let stage_grad = |k: usize| {
            self.agent.stage_cost_gradient(x.node(k), &self.neighbor_nodes(k), Block::Own) * self.grid.weight(k)
        };
        let mut p = Trajectory::zeros(self.grid, n);
        let mut grad = Trajectory::zeros(self.grid, m);
        let pn = self.agent.terminal_gradient(x.last()) + stage_grad(last);
        p.node_mut(last).copy_from_slice(pn.as_slice());
        let r = self.agent.control_weight();
        let ur = self.agent.u_ref();
        for k in 0..self.grid.nodes() {
            let g = grad.node_mut(k);
            for c in 0..m {
                g[c] = self.grid.weight(k) * r[c] * (u.node(k)[c] - ur[c]);
            }
        }
        for k in (0..last).rev() {
            let xk = x.node(k);
            let uk = DVector::from_column_slice(u.node(k));
            let pred = DVector::from_column_slice(xk) + self.dynamics(k, xk, &uk) * h;
            let next = DVector::from_column_slice(p.node(k + 1));
            let a2t_p = self.state_vjp(k + 1, pred.as_slice(), u.node(k + 1), &next);
            // through the predictor: (I + h A1)ᵀ A2ᵀ p
            let via_pred = &a2t_p * h + &next;
            let a1t = self.state_vjp(k, xk, u.node(k), &via_pred);
            let pk = &next + (a1t + &a2t_p) * (0.5 * h) + stage_grad(k);
            let b1 = self.agent.input_matrix(xk);
            let b2 = self.agent.input_matrix(pred.as_slice());
            let gk = b1.transpose() * &a2t_p * (0.5 * h * h) + b1.transpose() * &next * (0.5 * h);
            let gk1 = b2.transpose() * &next * (0.5 * h);
            grad.node_mut(k).iter_mut().zip(gk.iter()).for_each(|(g, d)| *g += d);
            grad.node_mut(k + 1).iter_mut().zip(gk1.iter()).for_each(|(g, d)| *g += d);
            p.node_mut(k).copy_from_slice(pk.as_slice());
        }
        Ok((p, grad))
    }

    /// Max defect of the Heun stencils, the boundary conditions and the
    /// projection at the nodes.
    pub fn bvp_residual(&self, x0: &[f64], t: &AgentTrajectorySet) -> f64 {
        let all = t.x.as_slice().iter().chain(t.lambda.as_slice()).chain(t.u.as_slice());
        if all.into_iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        let mut res = t.x.node(0).iter().zip(x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        for k in 0..self.grid.intervals() {
            let one = self.heun_step(k, t.x.node(k), &t.lambda);
            res = res.max((one - DVector::from_column_slice(t.x.node(k + 1))).amax());
        }
        let h = self.grid.step();
        let last = self.grid.intervals();
        let vt = self.agent.terminal_gradient(t.x.last());
        res = res.max((vt - DVector::from_column_slice(t.lambda.last())).amax());
        let g = |k: usize, l: &[f64]| {
            let u = control_projection(self.agent, t.x.node(k), l);
            -self.state_gradient(k, t.x.node(k), u.as_slice(), l)
        };
        for k in (0..last).rev() {
            let lk1 = DVector::from_column_slice(t.lambda.node(k + 1));
            let k1 = g(k + 1, lk1.as_slice());
            let pred = &lk1 - &k1 * h;
            let k2 = g(k, pred.as_slice());
            let step = lk1 - (k1 + k2) * (0.5 * h);
            res = res.max((step - DVector::from_column_slice(t.lambda.node(k))).amax());
        }
        for k in 0..self.grid.nodes() {
            let u = control_projection(self.agent, t.x.node(k), t.lambda.node(k));
            res = res.max((u - DVector::from_column_slice(t.u.node(k))).amax());
        }
        res
    }

    fn heun_step(&self, k: usize, xk: &[f64], lambda: &Trajectory) -> DVector<f64> {
        let h = self.grid.step();
        let xk = DVector::from_column_slice(xk);
        let k1 = self.dynamics(k, xk.as_slice(), &control_projection(self.agent, xk.as_slice(), lambda.node(k)));
        let pred = &xk + &k1 * h;
        let k2 = self.dynamics(k + 1, pred.as_slice(), &control_projection(self.agent, pred.as_slice(), lambda.node(k + 1)));
        xk + (k1 + k2) * (0.5 * h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub j_max: usize,
    /// Stop early once one round changes states and adjoints by less.
    pub tolerance: Option<f64>,
}

impl FixedPointConfig {
    pub fn sweeps(j_max: usize) -> Self {
        Self { j_max, tolerance: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub trajectories: AgentTrajectorySet,
    pub sweeps: usize,
    /// `max(‖x^j - x^{j-1}‖∞, ‖λ^j - λ^{j-1}‖∞)` of the last round.
    pub last_change: f64,
}

/// Alternates forward and backward sweeps `j_max` times from a warm adjoint.
pub fn fixed_point_solve<A: AgentOcp + ?Sized>(
    ctx: &HamiltonianContext<'_, A>,
    x0: &[f64],
    warm_lambda: &Trajectory,
    cfg: &FixedPointConfig,
) -> Result<FixedPointResult, OcpError> {
    if cfg.j_max == 0 {
        return Err(OcpError::Invalid("j_max must be at least 1".into()));
    }
    let mut lambda = warm_lambda.clone();
    let mut x: Option<Trajectory> = None;
    let mut change = f64::INFINITY;
    let mut sweeps = 0;
    for j in 1..=cfg.j_max {
        let xn = ctx.forward_sweep_at(x0, &lambda, j)?;
        let ln = ctx.backward_sweep_at(&xn, j)?;
        change = ln.max_abs_diff(&lambda);
        if let Some(prev) = &x {
            change = change.max(xn.max_abs_diff(prev));
        }
        x = Some(xn);
        lambda = ln;
        sweeps = j;
        if cfg.tolerance.is_some_and(|tol| change <= tol) {
            break;
        }
    }
    let x = x.expect("at least one sweep");
    let u = ctx.controls(&x, &lambda);
    Ok(FixedPointResult { trajectories: AgentTrajectorySet { x, lambda, u }, sweeps, last_change: change })
}

/// `g_ij(τ_k) = ∇_{x_j} l⁰_i + (∂f⁰_i/∂x_j)ᵀ λ_i` for every neighbor slot.
pub fn mirror_gradient_ocp<A: AgentOcp + ?Sized>(
    agent: &A,
    own: &AgentTrajectorySet,
    neighbors: &[&Trajectory],
) -> Result<Vec<Trajectory>, OcpError> {
    let dims = agent.neighbor_dims();
    if neighbors.len() != dims.len() {
        return Err(OcpError::MissingNeighborData { slot: neighbors.len().min(dims.len()) });
    }
    let grid = *own.grid();
    for (t, &d) in neighbors.iter().zip(&dims) {
        check_grid(t, &grid, d, "neighbor trajectory")?;
    }
    Ok((0..dims.len())
        .map(|slot| {
            Trajectory::from_fn(grid, dims[slot], |k, _| {
                let nb: Vec<&[f64]> = neighbors.iter().map(|t| t.node(k)).collect();
                let x = own.x.node(k);
                let l = DVector::from_column_slice(own.lambda.node(k));
                let g = agent.stage_cost_gradient(x, &nb, Block::Neighbor(slot))
                    + agent.drift_jacobian(x, &nb, Block::Neighbor(slot)).transpose() * l;
                g.as_slice().to_vec()
            })
        })
        .collect())
}

/// `Σ_j ∫ g_ji(τ)ᵀ δx_i(τ) dτ` by the trapezoidal rule.
pub fn sensitivity_term(delta: &Trajectory, signals: &[&Trajectory]) -> Result<f64, OcpError> {
    let grid = *delta.grid();
    let mut total = 0.0;
    for s in signals {
        check_grid(s, &grid, delta.dim(), "sensitivity signal")?;
        let samples: Vec<f64> = (0..grid.nodes())
            .map(|k| s.node(k).iter().zip(delta.node(k)).map(|(a, b)| a * b).sum())
            .collect();
        total += grid.integrate(&samples);
    }
    Ok(total)
}

/// Compares supplied OCP derivatives with central differences at probe points
/// `(x, u, λ, neighbors)`.
pub fn check_ocp_derivatives<A: AgentOcp + ?Sized>(
    agent: &A,
    probes: &[(Vec<f64>, Vec<f64>, Vec<f64>, Vec<Vec<f64>>)],
) -> DerivativeReport {
    let mut report = DerivativeReport::default();
    let n = agent.state_dim();
    for (x, u, lam, nb) in probes {
        let nb: Vec<&[f64]> = nb.iter().map(Vec::as_slice).collect();
        for wrt in std::iter::once(Block::Own).chain((0..nb.len()).map(Block::Neighbor)) {
            let tag = match wrt {
                Block::Own => "own".to_string(),
                Block::Neighbor(k) => format!("neighbor {k}"),
            };
            let fd = fd_block_jacobian(x, &nb, wrt, n, |x, nb| agent.drift(x, nb));
            report.record(format!("drift jacobian ({tag})"), derivative::relative_error(&agent.drift_jacobian(x, &nb, wrt), &fd));
            let fd = fd_block_gradient(x, &nb, wrt, |x, nb| agent.stage_cost(x, nb));
            report.record(
                format!("stage cost gradient ({tag})"),
                derivative::relative_error_vec(&agent.stage_cost_gradient(x, &nb, wrt), &fd),
            );
        }
        let uv = DVector::from_column_slice(u);
        let lv = DVector::from_column_slice(lam);
        let fd = derivative::gradient(|x| lv.dot(&(agent.input_matrix(x) * &uv)), x);
        report.record("input gradient", derivative::relative_error_vec(&agent.input_gradient(x, u, lam), &fd));
        let fd = derivative::gradient(|x| agent.terminal_cost(x), x);
        report.record("terminal gradient", derivative::relative_error_vec(&agent.terminal_gradient(x), &fd));
    }
    report
}
