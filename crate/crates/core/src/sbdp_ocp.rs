//! Distributed iteration on trajectories.
//!
//! Each outer iteration exchanges one trajectory sensitivity and one state
//! trajectory per directed channel:
//!
//! 1. every agent evaluates `g_ij(·)` for each neighbor `j` and posts it;
//! 2. every agent sums its incoming signals, solves its local OCP by the
//!    fixed-point sweeps warm-started from its previous adjoint and posts the
//!    new state trajectory;
//! 3. every agent stores the received neighbor states.
//!
//! [`sbdp_ocp_exact`] runs the same iteration with exact local solves on the
//! dense transcription. The `central_*` functions are centralized references.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::{run_phase, BusError, MessageBus, PayloadKind, RoundTag, SchedulerMode};
use crate::graph::CouplingGraph;
use crate::grid::{TimeGrid, Trajectory};
use crate::joint::JointNlp;
use crate::ocp::stacked::StackedOcp;
use crate::ocp::transcription::TranscribedOcp;
use crate::ocp::{
    fixed_point_solve, mirror_gradient_ocp, AgentOcp, AgentTrajectorySet, FixedPointConfig, HamiltonianContext,
    OcpError,
};
use crate::problem::PrimalDualPoint;
use crate::sbdp_static::{sbdp_solve, sbdp_solve_on, SbdpConfig, SbdpError, StopReason};

/// How trajectory payloads are charged to a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeCounting {
    /// `N` samples per message; node 0 is not charged.
    #[default]
    ExcludeInitial,
    AllNodes,
}

impl NodeCounting {
    pub fn floats(self, grid: &TimeGrid, dim: usize) -> usize {
        match self {
            NodeCounting::ExcludeInitial => grid.intervals() * dim,
            NodeCounting::AllNodes => grid.nodes() * dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcpConfig {
    pub q_max: usize,
    pub fixed_point: FixedPointConfig,
    /// Blend `new ← (1-α) old + α new` of states, adjoints and controls.
    /// Experimental; 1 disables it.
    pub alpha: f64,
    pub counting: NodeCounting,
}

impl OcpConfig {
    pub fn new(q_max: usize, j_max: usize) -> Self {
        Self { q_max, fixed_point: FixedPointConfig::sweeps(j_max), alpha: 1.0, counting: NodeCounting::default() }
    }
}

#[derive(Debug, Error)]
pub enum SbdpOcpError {
    #[error("agent {agent}: {source}")]
    Ocp { agent: usize, source: OcpError },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Static(#[from] SbdpError),
}

/// Everything one agent holds between iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpAgentState {
    pub x0: DVector<f64>,
    pub traj: AgentTrajectorySet,
    /// Latest received neighbor state trajectories, by neighbor slot.
    pub neighbor_x: Vec<Trajectory>,
    /// Signals `g_ji` received in the latest iteration, by neighbor slot.
    pub signals: Vec<Trajectory>,
    /// `‖·‖∞` change of the own trajectories in the latest iteration.
    pub last_change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpIterationState {
    pub step: usize,
    pub iteration: usize,
    pub agents: Vec<OcpAgentState>,
}

impl OcpIterationState {
    /// Initial state where every agent knows its neighbors' current guesses.
    pub fn new(graph: &CouplingGraph, x0: Vec<DVector<f64>>, trajectories: Vec<AgentTrajectorySet>) -> Self {
        assert_eq!(x0.len(), trajectories.len());
        let agents = (0..trajectories.len())
            .map(|i| OcpAgentState {
                x0: x0[i].clone(),
                traj: trajectories[i].clone(),
                neighbor_x: graph.neighbors(i).iter().map(|&j| trajectories[j].x.clone()).collect(),
                signals: Vec::new(),
                last_change: f64::INFINITY,
            })
            .collect();
        Self { step: 0, iteration: 0, agents }
    }

    pub fn trajectories(&self) -> Vec<AgentTrajectorySet> {
        self.agents.iter().map(|a| a.traj.clone()).collect()
    }

    pub fn max_change(&self) -> f64 {
        self.agents.iter().map(|a| a.last_change).fold(0.0, f64::max)
    }
}

fn nodes_of(grid: TimeGrid, dim: usize, data: Vec<f64>, agent: usize) -> Result<Trajectory, SbdpOcpError> {
    Trajectory::from_nodes(grid, dim, data).map_err(|e| SbdpOcpError::Ocp {
        agent,
        source: OcpError::Invalid(format!("received payload: {e}")),
    })
}

/// One outer iteration on `bus`, tagged with `(state.step, state.iteration)`.
pub fn sbdp_ocp_iterate<A: AgentOcp>(
    bus: &MessageBus,
    agents: &[A],
    state: &mut OcpIterationState,
    cfg: &OcpConfig,
) -> Result<(), SbdpOcpError> {
    if !(cfg.alpha > 0.0 && cfg.alpha <= 1.0) {
        return Err(SbdpOcpError::Config(format!("alpha must lie in (0, 1], got {}", cfg.alpha)));
    }
    let tag = RoundTag::new(state.step as u64, state.iteration as u64);

    run_phase(bus, &mut state.agents, |i, st, port| -> Result<bool, SbdpOcpError> {
        let nb: Vec<&Trajectory> = st.neighbor_x.iter().collect();
        let signals = mirror_gradient_ocp(&agents[i], &st.traj, &nb).map_err(|source| SbdpOcpError::Ocp { agent: i, source })?;
        for (&j, g) in port.neighbors().iter().zip(signals) {
            let floats = cfg.counting.floats(g.grid(), g.dim());
            port.post(j, tag, PayloadKind::OcpGradient, g.into_vec(), floats)?;
        }
        Ok(true)
    })?;

    run_phase(bus, &mut state.agents, |i, st, port| -> Result<bool, SbdpOcpError> {
        let agent = &agents[i];
        let grid = *st.traj.grid();
        let n = agent.state_dim();
        st.signals = port
            .neighbors()
            .iter()
            .map(|&j| nodes_of(grid, n, port.receive(j, PayloadKind::OcpGradient, tag)?, i))
            .collect::<Result<_, _>>()?;
        let fresh = {
            let signals: Vec<&Trajectory> = st.signals.iter().collect();
            let ctx = HamiltonianContext::new(agent, grid, st.neighbor_x.iter().collect(), &signals, Some(&st.traj.x))
                .map_err(|source| SbdpOcpError::Ocp { agent: i, source })?;
            fixed_point_solve(&ctx, st.x0.as_slice(), &st.traj.lambda, &cfg.fixed_point)
                .map_err(|source| SbdpOcpError::Ocp { agent: i, source })?
                .trajectories
        };
        let fresh = if cfg.alpha < 1.0 { st.traj.blend(&fresh, cfg.alpha) } else { fresh };
        st.last_change = fresh.max_abs_diff(&st.traj);
        st.traj = fresh;
        for &j in port.neighbors() {
            let floats = cfg.counting.floats(&grid, n);
            port.post(j, tag, PayloadKind::OcpState, st.traj.x.as_slice().to_vec(), floats)?;
        }
        Ok(true)
    })?;

    run_phase(bus, &mut state.agents, |i, st, port| -> Result<bool, SbdpOcpError> {
        let grid = *st.traj.grid();
        for (slot, &j) in port.neighbors().iter().enumerate() {
            let dim = agents[i].neighbor_dims()[slot];
            st.neighbor_x[slot] = nodes_of(grid, dim, port.receive(j, PayloadKind::OcpState, tag)?, i)?;
        }
        Ok(true)
    })?;

    state.iteration += 1;
    Ok(())
}

/// Runs `cfg.q_max` iterations and returns the per-iteration change.
pub fn sbdp_ocp_run<A: AgentOcp>(
    bus: &MessageBus,
    agents: &[A],
    state: &mut OcpIterationState,
    cfg: &OcpConfig,
) -> Result<Vec<f64>, SbdpOcpError> {
    let mut changes = Vec::with_capacity(cfg.q_max);
    for _ in 0..cfg.q_max {
        sbdp_ocp_iterate(bus, agents, state, cfg)?;
        changes.push(state.max_change());
    }
    Ok(changes)
}

/// Trajectories of every agent after isolated forward integration at the
/// reference input and a backward sweep with neighbors frozen at `neighbor_ref`.
pub fn cold_start<A: AgentOcp>(
    graph: &CouplingGraph,
    agents: &[A],
    grid: TimeGrid,
    x0: &[DVector<f64>],
    x_ref: &[DVector<f64>],
) -> Result<Vec<AgentTrajectorySet>, SbdpOcpError> {
    agents
        .iter()
        .enumerate()
        .map(|(i, agent)| {
            let err = |source| SbdpOcpError::Ocp { agent: i, source };
            let frozen: Vec<Trajectory> =
                graph.neighbors(i).iter().map(|&j| Trajectory::constant(grid, x_ref[j].as_slice())).collect();
            let ctx = HamiltonianContext::new(agent, grid, frozen.iter().collect(), &[], None).map_err(err)?;
            let u = Trajectory::constant(grid, agent.u_ref().as_slice());
            let x = ctx.simulate(x0[i].as_slice(), &u).map_err(err)?;
            let lambda = ctx.backward_sweep(&x).map_err(err)?;
            Ok(AgentTrajectorySet { x, lambda, u })
        })
        .collect()
}

fn transcribed_agents<'a, A: AgentOcp>(
    graph: &CouplingGraph,
    agents: &'a [A],
    grid: TimeGrid,
    x0: &[DVector<f64>],
) -> Vec<TranscribedOcp<'a, A>> {
    agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let nb = graph.neighbors(i);
            TranscribedOcp::new(
                a,
                grid,
                x0[i].clone(),
                nb.iter().map(|&j| x0[j].clone()).collect(),
                nb.iter().map(|&j| agents[j].control_dim()).collect(),
            )
        })
        .collect()
}

fn initial_point<A: AgentOcp>(t: &TranscribedOcp<'_, A>, set: &AgentTrajectorySet) -> PrimalDualPoint {
    let nu: Vec<f64> = set.lambda.without_initial().iter().map(|v| -v).collect();
    let x = DVector::from_vec(t.pack(set));
    let n_ineq = crate::problem::AgentNlp::n_ineq(t);
    PrimalDualPoint { x, lambda: DVector::from_vec(nu), mu: DVector::zeros(n_ineq) }
}

/// Outer iterations with exact local solves: the static scheme (newton rule)
/// on the transcribed agents, at most `iterations` rounds.
pub fn sbdp_ocp_exact<A: AgentOcp>(
    graph: &CouplingGraph,
    agents: &[A],
    grid: TimeGrid,
    x0: &[DVector<f64>],
    init: &[AgentTrajectorySet],
    iterations: usize,
    mode: SchedulerMode,
) -> Result<Vec<AgentTrajectorySet>, SbdpOcpError> {
    let transcribed = transcribed_agents(graph, agents, grid, x0);
    let points = transcribed.iter().zip(init).map(|(t, s)| initial_point(t, s)).collect();
    let cfg = SbdpConfig { q_max: iterations, mode, ..SbdpConfig::newton() };
    let bus = MessageBus::new(graph.clone(), mode);
    let out = match sbdp_solve_on(&bus, &transcribed, points, &cfg) {
        Ok(o) => o,
        Err(SbdpError::NotConverged(o)) if o.stop == StopReason::IterationCap => *o,
        Err(e) => return Err(e.into()),
    };
    Ok(transcribed.iter().zip(&out.points).map(|(t, p)| t.unpack(p.x.as_slice(), p.lambda.as_slice())).collect())
}

/// Joint problem of the transcribed agents solved in one piece: the limit
/// [`sbdp_ocp_exact`] converges to. Neighbors enter the second Heun stage at
/// their node values, which makes this discretization first order at the
/// end nodes; compare the fixed-point sweeps with
/// [`central_stacked_transcribed`] instead.
pub fn central_joint_transcribed<A: AgentOcp>(
    graph: &CouplingGraph,
    agents: &[A],
    grid: TimeGrid,
    x0: &[DVector<f64>],
) -> Result<Vec<AgentTrajectorySet>, SbdpOcpError> {
    let transcribed = transcribed_agents(graph, agents, grid, x0);
    let joint = JointNlp::new(graph, &transcribed);
    let out = sbdp_solve(&CouplingGraph::single(), std::slice::from_ref(&joint), &SbdpConfig::newton())?;
    let points = joint.split(&out.points[0]);
    Ok(transcribed.iter().zip(&points).map(|(t, p)| t.unpack(p.x.as_slice(), p.lambda.as_slice())).collect())
}

/// Transcription of the stacked dynamics, where the second Heun stage sees the
/// neighbors' predictor states. Second-order consistent with the
/// fixed-point sweeps.
pub fn central_stacked_transcribed<A: AgentOcp>(
    graph: &CouplingGraph,
    agents: &[A],
    grid: TimeGrid,
    x0: &[DVector<f64>],
) -> Result<Vec<AgentTrajectorySet>, SbdpOcpError> {
    let stacked = StackedOcp::new(graph, agents);
    let x0s = DVector::from_vec(x0.iter().flat_map(|v| v.iter().copied()).collect());
    let t = TranscribedOcp::new(&stacked, grid, x0s, Vec::new(), Vec::new());
    let out = sbdp_solve(&CouplingGraph::single(), std::slice::from_ref(&t), &SbdpConfig::newton())?;
    let p = &out.points[0];
    Ok(stacked.split(&t.unpack(p.x.as_slice(), p.lambda.as_slice())))
}

/// Stacked dynamics solved by the fixed-point sweeps from a warm adjoint.
/// Unlike the distributed iteration, the second Heun stage sees the
/// neighbors' predictor states rather than their node values.
pub fn central_fixed_point<A: AgentOcp>(
    graph: &CouplingGraph,
    agents: &[A],
    grid: TimeGrid,
    x0: &[DVector<f64>],
    warm: &[AgentTrajectorySet],
    cfg: &FixedPointConfig,
) -> Result<(Vec<AgentTrajectorySet>, f64), SbdpOcpError> {
    let stacked = StackedOcp::new(graph, agents);
    let x0s: Vec<f64> = x0.iter().flat_map(|v| v.iter().copied()).collect();
    let warm = stacked.stack_sets(warm);
    let err = |source| SbdpOcpError::Ocp { agent: 0, source };
    let ctx = HamiltonianContext::isolated(&stacked, grid).map_err(err)?;
    let res = fixed_point_solve(&ctx, &x0s, &warm.lambda, cfg).map_err(err)?;
    Ok((stacked.split(&res.trajectories), res.last_change))
}
