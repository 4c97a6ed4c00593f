//! Receding-horizon control with a fixed number of distributed iterations per
//! sample.
//!
//! At every sample the [`Controller`] re-anchors each agent's prediction at
//! the measured state, runs `q_max` outer iterations (each with `j_max`
//! fixed-point sweeps), applies the first `Δt` of the predicted controls to
//! the plant and shifts all trajectories by `Δt`. The shifted-out tail is
//! filled by integrating the model under the terminal control law.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::{MessageBus, SchedulerMode};
use crate::graph::CouplingGraph;
use crate::grid::{GridError, TimeGrid, Trajectory};
use crate::ocp::{AgentOcp, AgentTrajectorySet, FixedPointConfig};
use crate::sbdp_ocp::{
    central_fixed_point, cold_start, sbdp_ocp_run, NodeCounting, OcpConfig, OcpIterationState, SbdpOcpError,
};

/// An OCP agent with the data a receding-horizon loop needs.
pub trait DmpcAgent: AgentOcp {
    fn x_ref(&self) -> DVector<f64>;

    /// Terminal control law `r_i(x_i, x_N)`, before clamping to the box.
    fn terminal_control(&self, x: &[f64], nb: &[&[f64]]) -> DVector<f64>;

    /// Integrand of the closed-loop cost.
    fn closed_loop_stage(&self, x: &[f64], u: &[f64]) -> f64;
}

/// The simulated system. States and inputs are stacked in agent order.
pub trait Plant {
    fn state_dim(&self) -> usize;
    fn rhs(&self, t: f64, x: &[f64], u: &[f64]) -> DVector<f64>;
    /// Componentwise lower bound enforced after each substep.
    fn floor(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Solver {
    /// `q_max` outer iterations with `j_max` sweeps each.
    Distributed,
    /// Fixed-point sweeps on the stacked problem until the change drops
    /// below `tolerance`.
    Central { max_sweeps: usize, tolerance: f64 },
}

impl Solver {
    pub fn central() -> Self {
        Solver::Central { max_sweeps: 500, tolerance: 1e-10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmpcConfig {
    /// Sampling time, s.
    pub dt: f64,
    /// Prediction horizon, s.
    pub horizon: f64,
    pub intervals: usize,
    pub q_max: usize,
    pub j_max: usize,
    /// Simulated time, s.
    pub t_sim: f64,
    /// Heun substeps of the plant per sample.
    pub plant_substeps: usize,
    pub mode: SchedulerMode,
    pub counting: NodeCounting,
    pub solver: Solver,
    /// `false` replaces the shifted warm start by a cold start every sample.
    pub warm_start: bool,
}

impl Default for DmpcConfig {
    fn default() -> Self {
        Self {
            dt: 0.2,
            horizon: 6.0,
            intervals: 30,
            q_max: 3,
            j_max: 5,
            t_sim: 150.0,
            plant_substeps: 10,
            mode: SchedulerMode::Deterministic,
            counting: NodeCounting::ExcludeInitial,
            solver: Solver::Distributed,
            warm_start: true,
        }
    }
}

impl DmpcConfig {
    pub fn grid(&self) -> Result<TimeGrid, DmpcError> {
        Ok(TimeGrid::new(self.horizon, self.intervals)?)
    }

    /// Grid nodes per sample.
    pub fn shift_nodes(&self) -> Result<usize, DmpcError> {
        let grid = self.grid()?;
        shift_nodes(&grid, self.dt)
    }

    /// Number of samples after the initial one.
    pub fn samples(&self) -> usize {
        (self.t_sim / self.dt + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<(), DmpcError> {
        let s = self.shift_nodes()?;
        if s == 0 {
            return Err(DmpcError::Config(format!("sampling time must be positive, got {}", self.dt)));
        }
        if !(self.t_sim >= 0.0) {
            return Err(DmpcError::Config(format!("simulation length must be nonnegative, got {}", self.t_sim)));
        }
        if self.plant_substeps == 0 {
            return Err(DmpcError::Config("plant needs at least one substep".into()));
        }
        if self.j_max == 0 {
            return Err(DmpcError::Config("j_max must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DmpcError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("shift {dt} s is not a multiple of the grid step {step} s within the horizon")]
    GridMisalignment { dt: f64, step: f64 },
    #[error(transparent)]
    Solver(#[from] SbdpOcpError),
    #[error("plant state became non-finite in step {step}")]
    Diverged { step: usize, log: Box<ClosedLoopLog> },
}

fn shift_nodes(grid: &TimeGrid, dt: f64) -> Result<usize, DmpcError> {
    let h = grid.step();
    let s = (dt / h).round();
    if !(dt >= 0.0) || (s * h - dt).abs() > 1e-9 * h.max(dt) || s as usize > grid.intervals() {
        return Err(DmpcError::GridMisalignment { dt, step: h });
    }
    Ok(s as usize)
}

fn clamp(agent: &impl AgentOcp, u: DVector<f64>) -> DVector<f64> {
    let (lo, hi) = (agent.u_min(), agent.u_max());
    DVector::from_iterator(u.len(), u.iter().enumerate().map(|(k, v)| v.clamp(lo[k], hi[k])))
}

fn model_rate<A: AgentOcp>(agent: &A, x: &[f64], nb: &[&[f64]], u: &DVector<f64>) -> DVector<f64> {
    agent.drift(x, nb) + agent.input_matrix(x) * u
}

/// Shifts every agent's trajectories left by `dt`. The state and control
/// tail is integrated jointly under the clamped terminal laws with Heun's
/// method; the adjoint tail repeats `λ(T)`.
pub fn warm_shift<A: DmpcAgent>(
    graph: &CouplingGraph,
    agents: &[A],
    sets: &[AgentTrajectorySet],
    dt: f64,
) -> Result<Vec<AgentTrajectorySet>, DmpcError> {
    let grid = *sets[0].grid();
    let s = shift_nodes(&grid, dt)?;
    if s == 0 {
        return Ok(sets.to_vec());
    }
    let n = grid.intervals();
    let h = grid.step();
    let m = agents.len();

    let mut x: Vec<Vec<Vec<f64>>> = sets.iter().map(|t| (s..=n).map(|k| t.x.node(k).to_vec()).collect()).collect();
    let mut u: Vec<Vec<Vec<f64>>> = sets.iter().map(|t| (s..=n).map(|k| t.u.node(k).to_vec()).collect()).collect();
    let law = |xs: &[Vec<f64>]| -> Vec<DVector<f64>> {
        (0..m)
            .map(|i| {
                let nb: Vec<&[f64]> = graph.neighbors(i).iter().map(|&j| xs[j].as_slice()).collect();
                clamp(&agents[i], agents[i].terminal_control(&xs[i], &nb))
            })
            .collect()
    };
    let rates = |xs: &[Vec<f64>], us: &[DVector<f64>]| -> Vec<DVector<f64>> {
        (0..m)
            .map(|i| {
                let nb: Vec<&[f64]> = graph.neighbors(i).iter().map(|&j| xs[j].as_slice()).collect();
                model_rate(&agents[i], &xs[i], &nb, &us[i])
            })
            .collect()
    };
    for _ in 0..s {
        let cur: Vec<Vec<f64>> = x.iter().map(|xi| xi.last().unwrap().clone()).collect();
        let u0 = law(&cur);
        let f0 = rates(&cur, &u0);
        let pred: Vec<Vec<f64>> = (0..m).map(|i| cur[i].iter().zip(f0[i].iter()).map(|(a, b)| a + h * b).collect()).collect();
        let f1 = rates(&pred, &law(&pred));
        let next: Vec<Vec<f64>> = (0..m)
            .map(|i| (0..cur[i].len()).map(|c| cur[i][c] + 0.5 * h * (f0[i][c] + f1[i][c])).collect())
            .collect();
        let un = law(&next);
        for i in 0..m {
            x[i].push(next[i].clone());
            u[i].push(un[i].as_slice().to_vec());
        }
    }

    Ok((0..m)
        .map(|i| {
            let lam_end = sets[i].lambda.last().to_vec();
            let lambda = Trajectory::from_fn(grid, lam_end.len(), |k, _| {
                if k + s <= n {
                    sets[i].lambda.node(k + s).to_vec()
                } else {
                    lam_end.clone()
                }
            });
            AgentTrajectorySet {
                x: Trajectory::from_fn(grid, agents[i].state_dim(), |k, _| x[i][k].clone()),
                lambda,
                u: Trajectory::from_fn(grid, agents[i].control_dim(), |k, _| u[i][k].clone()),
            }
        })
        .collect())
}

/// Value of `Σ V_i(x_i)` against the level `β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalCheck {
    pub value: f64,
    pub margin: f64,
    pub inside: bool,
}

pub fn terminal_region_check<A: AgentOcp>(agents: &[A], terminal_states: &[&[f64]], beta: f64) -> TerminalCheck {
    let value: f64 = agents.iter().zip(terminal_states).map(|(a, x)| a.terminal_cost(x)).sum();
    TerminalCheck { value, margin: beta - value, inside: value <= beta }
}

/// Result of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// Stacked controls held over each grid interval of the sample.
    pub applied: Vec<Vec<f64>>,
    pub terminal: TerminalCheck,
    /// Floats posted per directed channel, in `graph.directed_channels()` order.
    pub channel_floats: Vec<usize>,
    /// Change of the last outer iteration (or the central sweeps).
    pub change: f64,
    /// The solver failed and the warm start was applied unchanged.
    pub degraded: Option<String>,
}

/// Per-agent solver state carried from sample to sample.
pub struct Controller<'a, A: DmpcAgent> {
    graph: CouplingGraph,
    agents: &'a [A],
    cfg: DmpcConfig,
    grid: TimeGrid,
    shift: usize,
    beta: f64,
    bus: MessageBus,
    state: OcpIterationState,
}

impl<'a, A: DmpcAgent> Controller<'a, A> {
    /// Cold-starts all agents from `x0`.
    pub fn new(graph: &CouplingGraph, agents: &'a [A], cfg: DmpcConfig, beta: f64, x0: &[DVector<f64>]) -> Result<Self, DmpcError> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let shift = cfg.shift_nodes()?;
        let init = Self::cold(graph, agents, grid, x0)?;
        Ok(Self {
            graph: graph.clone(),
            agents,
            cfg,
            grid,
            shift,
            beta,
            bus: MessageBus::new(graph.clone(), cfg.mode),
            state: OcpIterationState::new(graph, x0.to_vec(), init),
        })
    }

    fn cold(graph: &CouplingGraph, agents: &[A], grid: TimeGrid, x0: &[DVector<f64>]) -> Result<Vec<AgentTrajectorySet>, DmpcError> {
        let refs: Vec<DVector<f64>> = agents.iter().map(|a| a.x_ref()).collect();
        Ok(cold_start(graph, agents, grid, x0, &refs)?)
    }

    pub fn state(&self) -> &OcpIterationState {
        &self.state
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    fn channel_floats(&self) -> Vec<usize> {
        let stats = self.bus.stats();
        self.graph
            .directed_channels()
            .iter()
            .map(|&(f, t)| stats.channel(f, t).map_or(0, |c| c.floats))
            .collect()
    }

    fn solve(&mut self) -> Result<f64, DmpcError> {
        match self.cfg.solver {
            Solver::Distributed => {
                let ocp = OcpConfig { counting: self.cfg.counting, ..OcpConfig::new(self.cfg.q_max, self.cfg.j_max) };
                let changes = sbdp_ocp_run(&self.bus, self.agents, &mut self.state, &ocp)?;
                Ok(changes.last().copied().unwrap_or(0.0))
            }
            Solver::Central { max_sweeps, tolerance } => {
                let x0: Vec<DVector<f64>> = self.state.agents.iter().map(|a| a.x0.clone()).collect();
                let fp = FixedPointConfig { j_max: max_sweeps, tolerance: Some(tolerance) };
                let (sets, change) =
                    central_fixed_point(&self.graph, self.agents, self.grid, &x0, &self.state.trajectories(), &fp)?;
                self.install(sets);
                Ok(change)
            }
        }
    }

    fn install(&mut self, sets: Vec<AgentTrajectorySet>) {
        for (i, st) in self.state.agents.iter_mut().enumerate() {
            st.neighbor_x = self.graph.neighbors(i).iter().map(|&j| sets[j].x.clone()).collect();
            st.traj = sets[i].clone();
        }
    }

    /// Re-anchors at `measurements`, optimizes and returns what to apply.
    /// Trajectories stay unshifted until [`Controller::advance`].
    pub fn step(&mut self, k: usize, measurements: &[DVector<f64>]) -> StepResult {
        self.state.step = k;
        self.state.iteration = 0;
        for (st, m) in self.state.agents.iter_mut().zip(measurements) {
            st.x0 = m.clone();
        }
        self.bus.begin_step(k);
        let before = self.channel_floats();
        let backup = self.state.clone();

        let outcome = self.solve().and_then(|change| {
            let finite = self.state.agents.iter().all(|a| a.traj.u.as_slice().iter().all(|v| v.is_finite()));
            if finite {
                Ok(change)
            } else {
                Err(DmpcError::Config("non-finite controls".into()))
            }
        });
        let (change, degraded, channel_floats) = match outcome {
            Ok(c) => {
                let after = self.channel_floats();
                (c, None, after.iter().zip(&before).map(|(a, b)| a - b).collect())
            }
            Err(e) => {
                self.state = backup;
                self.bus = MessageBus::new(self.graph.clone(), self.cfg.mode);
                (f64::NAN, Some(e.to_string()), vec![0; before.len()])
            }
        };

        let applied = (0..self.shift)
            .map(|m| self.state.agents.iter().flat_map(|a| a.traj.u.node(m).to_vec()).collect())
            .collect();
        let ends: Vec<&[f64]> = self.state.agents.iter().map(|a| a.traj.x.last()).collect();
        let terminal = terminal_region_check(self.agents, &ends, self.beta);
        StepResult { applied, terminal, channel_floats, change, degraded }
    }

    /// Prepares the warm start of the next sample at `next_x0`.
    pub fn advance(&mut self, next_x0: &[DVector<f64>]) -> Result<(), DmpcError> {
        let sets = if self.cfg.warm_start {
            warm_shift(&self.graph, self.agents, &self.state.trajectories(), self.cfg.dt)?
        } else {
            Self::cold(&self.graph, self.agents, self.grid, next_x0)?
        };
        self.install(sets);
        Ok(())
    }
}

/// Heun integration of the plant over one sample with piecewise constant
/// inputs. Returns the end state and the number of floor clamps.
pub fn integrate_plant<P: Plant + ?Sized>(
    plant: &P,
    t0: f64,
    x: &[f64],
    inputs: &[Vec<f64>],
    dt: f64,
    substeps: usize,
) -> (Vec<f64>, usize) {
    let pieces = inputs.len().max(1);
    let per = substeps.div_ceil(pieces).max(1);
    let h = dt / (pieces * per) as f64;
    let mut x = DVector::from_column_slice(x);
    let mut clamps = 0;
    let mut t = t0;
    for u in inputs {
        for _ in 0..per {
            let k1 = plant.rhs(t, x.as_slice(), u);
            let pred = &x + h * &k1;
            let k2 = plant.rhs(t + h, pred.as_slice(), u);
            x += 0.5 * h * (k1 + k2);
            if let Some(lo) = plant.floor() {
                for v in x.iter_mut() {
                    if *v < lo {
                        *v = lo;
                        clamps += 1;
                    }
                }
            }
            t += h;
        }
    }
    (x.as_slice().to_vec(), clamps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    /// Closed-loop integrand at `t`.
    pub stage: f64,
    /// Contribution to `J_cl` of the interval ending at `t`.
    pub j_increment: f64,
    pub channel_floats: Vec<usize>,
    pub terminal_value: f64,
    pub terminal_margin: f64,
    pub in_terminal_region: bool,
    pub change: f64,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopLog {
    pub dt: f64,
    pub t_sim: f64,
    pub channels: Vec<(usize, usize)>,
    pub entries: Vec<LogEntry>,
    pub plant_clamps: usize,
    /// Mean solver time per sample in parallel mode.
    pub wall_clock_per_step: Option<f64>,
}

impl ClosedLoopLog {
    pub fn j_cl(&self) -> f64 {
        self.entries.iter().map(|e| e.j_increment).sum()
    }

    pub fn max_terminal_value(&self) -> f64 {
        self.entries.iter().map(|e| e.terminal_value).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest number of floats any directed channel carried in one sample.
    pub fn floats_per_step(&self) -> usize {
        self.entries.iter().flat_map(|e| e.channel_floats.iter().copied()).max().unwrap_or(0)
    }

    pub fn degraded_steps(&self) -> usize {
        self.entries.iter().filter(|e| e.degraded).count()
    }

    pub fn to_csv(&self) -> String {
        let n = self.entries.first().map_or(0, |e| e.x.len());
        let m = self.entries.first().map_or(0, |e| e.u.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("x_{i}")));
        header.extend((0..m).map(|i| format!("u_{i}")));
        header.extend(["j_increment", "floats_this_step", "terminal_value", "terminal_margin", "degraded"].map(String::from));
        w.write_record(&header).expect("in-memory write");
        for e in &self.entries {
            let mut row = vec![e.t.to_string()];
            row.extend(e.x.iter().map(f64::to_string));
            row.extend(e.u.iter().map(f64::to_string));
            row.push(e.j_increment.to_string());
            row.push(e.channel_floats.iter().max().copied().unwrap_or(0).to_string());
            row.push(e.terminal_value.to_string());
            row.push(e.terminal_margin.to_string());
            row.push(e.degraded.to_string());
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }
}

fn stacked_stage<A: DmpcAgent>(agents: &[A], x: &[f64], u: &[f64]) -> f64 {
    let (mut xo, mut uo) = (0, 0);
    agents
        .iter()
        .map(|a| {
            let (n, m) = (a.state_dim(), a.control_dim());
            let v = a.closed_loop_stage(&x[xo..xo + n], &u[uo..uo + m]);
            xo += n;
            uo += m;
            v
        })
        .sum()
}

/// `J_cl = (1/T_sim) ∫ Σ_i stage_i dt` by the trapezoid rule over the samples.
pub fn closed_loop_cost<A: DmpcAgent>(log: &ClosedLoopLog, agents: &[A]) -> f64 {
    if !(log.t_sim > 0.0) {
        return 0.0;
    }
    let s: Vec<f64> = log.entries.iter().map(|e| stacked_stage(agents, &e.x, &e.u)).collect();
    s.windows(2).map(|w| 0.5 * log.dt * (w[0] + w[1])).sum::<f64>() / log.t_sim
}

fn split_state<A: AgentOcp>(agents: &[A], x: &[f64]) -> Vec<DVector<f64>> {
    let mut off = 0;
    agents
        .iter()
        .map(|a| {
            let v = DVector::from_column_slice(&x[off..off + a.state_dim()]);
            off += a.state_dim();
            v
        })
        .collect()
}

/// Simulates `floor(t_sim/dt) + 1` samples of the closed loop from the stacked
/// plant state `x0`.
pub fn run_closed_loop<A: DmpcAgent, P: Plant + ?Sized>(
    graph: &CouplingGraph,
    agents: &[A],
    plant: &P,
    x0: &[f64],
    cfg: &DmpcConfig,
    beta: f64,
) -> Result<ClosedLoopLog, DmpcError> {
    let n: usize = agents.iter().map(|a| a.state_dim()).sum();
    if x0.len() != n || plant.state_dim() != n {
        return Err(DmpcError::Config(format!("plant and agents disagree on the state dimension {n}")));
    }
    let mut ctrl = Controller::new(graph, agents, *cfg, beta, &split_state(agents, x0))?;
    let mut log = ClosedLoopLog {
        dt: cfg.dt,
        t_sim: cfg.t_sim,
        channels: graph.directed_channels(),
        entries: Vec::new(),
        plant_clamps: 0,
        wall_clock_per_step: None,
    };
    let timed = cfg.mode == SchedulerMode::Parallel;
    let mut elapsed = 0.0;
    let mut x = x0.to_vec();
    let samples = cfg.samples();
    for k in 0..=samples {
        let t = k as f64 * cfg.dt;
        let start = Instant::now();
        let res = ctrl.step(k, &split_state(agents, &x));
        if timed {
            elapsed += start.elapsed().as_secs_f64();
        }
        let u = res.applied[0].clone();
        let stage = stacked_stage(agents, &x, &u);
        let j_increment = match log.entries.last() {
            Some(prev) if cfg.t_sim > 0.0 => 0.5 * cfg.dt * (prev.stage + stage) / cfg.t_sim,
            _ => 0.0,
        };
        log.entries.push(LogEntry {
            t,
            x: x.clone(),
            u,
            stage,
            j_increment,
            channel_floats: res.channel_floats,
            terminal_value: res.terminal.value,
            terminal_margin: res.terminal.margin,
            in_terminal_region: res.terminal.inside,
            change: res.change,
            degraded: res.degraded.is_some(),
        });
        if k == samples {
            break;
        }
        let (next, clamps) = integrate_plant(plant, t, &x, &res.applied, cfg.dt, cfg.plant_substeps);
        log.plant_clamps += clamps;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(DmpcError::Diverged { step: k, log: Box::new(log) });
        }
        x = next;
        ctrl.advance(&split_state(agents, &x))?;
    }
    if timed {
        log.wall_clock_per_step = Some(elapsed / (samples + 1) as f64);
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub q_max: usize,
    pub j_max: usize,
    pub j_cl: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    pub central: Option<f64>,
}

impl SweepTable {
    pub fn cell(&self, q_max: usize, j_max: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.q_max == q_max && c.j_max == j_max)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["q_max", "j_max", "j_cl"]).expect("in-memory write");
        let fmt = |v: Option<f64>| v.map_or_else(|| "NaN".to_string(), |v| v.to_string());
        for c in &self.cells {
            w.write_record([c.q_max.to_string(), c.j_max.to_string(), fmt(c.j_cl)]).expect("in-memory write");
        }
        w.write_record(["central", "central", &fmt(self.central)]).expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }

    /// Largest increase along a row or column of the ladder.
    pub fn worst_increase(&self, qs: &[usize], js: &[usize]) -> f64 {
        let get = |q, j| self.cell(q, j).and_then(|c| c.j_cl);
        let mut worst = f64::NEG_INFINITY;
        for (a, b) in qs.iter().flat_map(|&q| js.windows(2).map(move |w| ((q, w[0]), (q, w[1]))))
            .chain(js.iter().flat_map(|&j| qs.windows(2).map(move |w| ((w[0], j), (w[1], j)))))
        {
            if let (Some(x), Some(y)) = (get(a.0, a.1), get(b.0, b.1)) {
                worst = worst.max(y - x);
            }
        }
        worst
    }
}

/// Closed-loop cost over a `(q_max, j_max)` ladder plus the central run.
/// Cells are simulated on scoped threads; a failing cell records its error.
pub fn sweep<A: DmpcAgent, P: Plant + Sync + ?Sized>(
    graph: &CouplingGraph,
    agents: &[A],
    plant: &P,
    x0: &[f64],
    base: &DmpcConfig,
    beta: f64,
    qs: &[usize],
    js: &[usize],
) -> SweepTable {
    let mut jobs: Vec<(usize, usize, DmpcConfig)> =
        qs.iter().flat_map(|&q| js.iter().map(move |&j| (q, j, DmpcConfig { q_max: q, j_max: j, ..*base }))).collect();
    jobs.push((0, 0, DmpcConfig { solver: Solver::central(), ..*base }));
    let results: Vec<Result<f64, String>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(_, _, cfg)| {
                scope.spawn(move || run_closed_loop(graph, agents, plant, x0, cfg, beta).map(|l| l.j_cl()).map_err(|e| e.to_string()))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep thread panicked")).collect()
    });
    let central = results.last().and_then(|r| r.as_ref().ok().copied());
    let cells = jobs
        .iter()
        .zip(&results)
        .take(jobs.len() - 1)
        .map(|(&(q_max, j_max, _), r)| SweepCell {
            q_max,
            j_max,
            j_cl: r.as_ref().ok().copied(),
            error: r.as_ref().err().cloned(),
        })
        .collect();
    SweepTable { cells, central }
}
