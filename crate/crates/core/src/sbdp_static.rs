//! Distributed solution of a graph-structured NLP by sensitivity exchange.
//!
//! Each iteration has two communication rounds. First every agent sends
//! each neighbor `j` the gradient of its own Lagrangian with respect to
//! `x_j`. Then every agent solves its local problem in the step `s_i`
//!
//! ```text
//! min  f_i(x_i + s, x_N) + ρ/2 ‖s‖² + (Σ_j ∇_{x_i} L_j)ᵀ s
//! s.t. g_i(x_i + s, x_N) = 0,  h_i(x_i + s, x_N) <= 0
//! ```
//!
//! with neighbor variables frozen, applies one of the update rules and
//! broadcasts the new `x_i`. The run stops once every agent moved less than
//! `epsilon` (∞-norm over `x`, `λ`, `μ`) in the same iteration.
//!
//! ```
//! use nalgebra::{DMatrix, DVector};
//! use sbdp::graph::CouplingGraph;
//! use sbdp::problem::QuadraticAgent;
//! use sbdp::sbdp_static::{sbdp_solve, SbdpConfig};
//!
//! // f_0 = ½x₀² + 0.2x₀x₁ - x₀,  f_1 = ½x₁² - x₁
//! let a0 = QuadraticAgent::new(1, vec![1],
//!     DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.0]), DVector::from_vec(vec![-1.0, 0.0]));
//! let a1 = QuadraticAgent::new(1, vec![1],
//!     DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), DVector::from_vec(vec![-1.0, 0.0]));
//! let graph = CouplingGraph::path(2).unwrap();
//! let out = sbdp_solve(&graph, &[a0, a1], &SbdpConfig::newton()).unwrap();
//! assert!(out.converged);
//! assert!((out.points[0].x[0] - 0.8 / 0.96).abs() < 1e-9);
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::{run_phase, BusError, MessageBus, PayloadKind, RoundTag, SchedulerMode};
use crate::graph::CouplingGraph;
use crate::local_nlp::{self, NlpProblem, SolveStatus, SolverOptions, WarmStart};
use crate::problem::{lagrangian_gradient, validate_agent, AgentNlp, Block, PrimalDualPoint, SpecError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Take the full local step and multipliers.
    Newton,
    /// Convex combination of old and new primal-dual values.
    Damped,
    /// Transformed primal-dual update for coupled constraints.
    Plus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SbdpConfig {
    pub rule: UpdateRule,
    /// Step size; must be 1 for the newton rule.
    pub alpha: f64,
    /// Dual scaling of the plus rule.
    pub beta: f64,
    /// Proximal weight on the local step.
    pub rho: f64,
    pub epsilon: f64,
    pub q_max: usize,
    /// Abort once any `‖p_i‖∞` exceeds this bound.
    pub divergence_bound: f64,
    pub local: SolverOptions,
    pub mode: SchedulerMode,
}

impl SbdpConfig {
    pub fn newton() -> Self {
        Self {
            rule: UpdateRule::Newton,
            alpha: 1.0,
            beta: 1.0,
            rho: 0.0,
            epsilon: 1e-10,
            q_max: 200,
            divergence_bound: 1e8,
            local: SolverOptions::default(),
            mode: SchedulerMode::Deterministic,
        }
    }

    pub fn damped(alpha: f64) -> Self {
        Self { rule: UpdateRule::Damped, alpha, ..Self::newton() }
    }

    pub fn plus(alpha: f64, beta: f64) -> Self {
        Self { rule: UpdateRule::Plus, alpha, beta, rho: 1.0, ..Self::newton() }
    }

    pub fn validate(&self) -> Result<(), SbdpError> {
        let bad = |m: &str| Err(SbdpError::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if self.rule == UpdateRule::Newton && self.alpha != 1.0 {
            return bad("the newton rule uses alpha = 1");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if !(self.rho >= 0.0) {
            return bad("rho must be nonnegative");
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub max_step_inf_norm: f64,
    pub central_kkt_residual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
}

impl ConvergenceTrace {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iteration", "max_step_inf_norm", "central_kkt_residual"])
            .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.iteration.to_string(),
                r.max_step_inf_norm.to_string(),
                r.central_kkt_residual.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    IterationCap,
    DivergenceGuard,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SbdpOutcome {
    pub points: Vec<PrimalDualPoint>,
    pub trace: ConvergenceTrace,
    pub iterations: usize,
    pub converged: bool,
    pub stop: StopReason,
}

#[derive(Debug, Error)]
pub enum SbdpError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("agent {agent}: {source}")]
    Spec { agent: usize, source: SpecError },
    #[error("agent {agent} has {got} neighbor blocks but the graph lists {expected}")]
    GraphMismatch { agent: usize, expected: usize, got: usize },
    #[error("local solve of agent {agent} failed in iteration {iteration}: {reason}")]
    LocalSolveFailure { agent: usize, iteration: usize, reason: String },
    #[error("no convergence after {} iterations ({:?})", .0.iterations, .0.stop)]
    NotConverged(Box<SbdpOutcome>),
    #[error(transparent)]
    Bus(#[from] BusError),
}

impl<T: AgentNlp + ?Sized> AgentNlp for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn neighbor_dims(&self) -> Vec<usize> {
        (**self).neighbor_dims()
    }
    fn n_eq(&self) -> usize {
        (**self).n_eq()
    }
    fn n_ineq(&self) -> usize {
        (**self).n_ineq()
    }
    fn cost(&self, x: &[f64], nb: &[&[f64]]) -> f64 {
        (**self).cost(x, nb)
    }
    fn eq(&self, x: &[f64], nb: &[&[f64]]) -> DVector<f64> {
        (**self).eq(x, nb)
    }
    fn ineq(&self, x: &[f64], nb: &[&[f64]]) -> DVector<f64> {
        (**self).ineq(x, nb)
    }
    fn cost_gradient(&self, x: &[f64], nb: &[&[f64]], wrt: Block) -> DVector<f64> {
        (**self).cost_gradient(x, nb, wrt)
    }
    fn eq_jacobian(&self, x: &[f64], nb: &[&[f64]], wrt: Block) -> DMatrix<f64> {
        (**self).eq_jacobian(x, nb, wrt)
    }
    fn ineq_jacobian(&self, x: &[f64], nb: &[&[f64]], wrt: Block) -> DMatrix<f64> {
        (**self).ineq_jacobian(x, nb, wrt)
    }
    fn lagrangian_hessian(&self, x: &[f64], nb: &[&[f64]], l: &[f64], m: &[f64]) -> DMatrix<f64> {
        (**self).lagrangian_hessian(x, nb, l, m)
    }
}

/// Local problem of one agent in step coordinates.
pub struct LocalNlp<'a, A: AgentNlp + ?Sized> {
    agent: &'a A,
    x: &'a [f64],
    nb: Vec<&'a [f64]>,
    rho: f64,
    sensitivity: DVector<f64>,
}

impl<'a, A: AgentNlp + ?Sized> LocalNlp<'a, A> {
    fn shifted(&self, s: &[f64]) -> Vec<f64> {
        self.x.iter().zip(s).map(|(x, s)| x + s).collect()
    }
}

impl<A: AgentNlp + ?Sized> NlpProblem for LocalNlp<'_, A> {
    fn dim(&self) -> usize {
        self.agent.dim()
    }
    fn n_eq(&self) -> usize {
        self.agent.n_eq()
    }
    fn n_ineq(&self) -> usize {
        self.agent.n_ineq()
    }
    fn objective(&self, s: &[f64]) -> f64 {
        let sv = DVector::from_column_slice(s);
        self.agent.cost(&self.shifted(s), &self.nb) + 0.5 * self.rho * sv.norm_squared() + self.sensitivity.dot(&sv)
    }
    fn eq(&self, s: &[f64]) -> DVector<f64> {
        self.agent.eq(&self.shifted(s), &self.nb)
    }
    fn ineq(&self, s: &[f64]) -> DVector<f64> {
        self.agent.ineq(&self.shifted(s), &self.nb)
    }
    fn gradient(&self, s: &[f64]) -> DVector<f64> {
        self.agent.cost_gradient(&self.shifted(s), &self.nb, Block::Own)
            + DVector::from_column_slice(s) * self.rho
            + &self.sensitivity
    }
    fn eq_jacobian(&self, s: &[f64]) -> DMatrix<f64> {
        self.agent.eq_jacobian(&self.shifted(s), &self.nb, Block::Own)
    }
    fn ineq_jacobian(&self, s: &[f64]) -> DMatrix<f64> {
        self.agent.ineq_jacobian(&self.shifted(s), &self.nb, Block::Own)
    }
    fn hessian(&self, s: &[f64], nu: &[f64], kappa: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        self.agent.lagrangian_hessian(&self.shifted(s), &self.nb, nu, kappa) + DMatrix::identity(n, n) * self.rho
    }
    fn magnitude(&self) -> f64 {
        let data = self.nb.iter().chain([&self.x]).flat_map(|v| v.iter());
        data.chain(self.sensitivity.iter()).fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Builds the step-coordinate local problem from the agent's own iterate,
/// frozen neighbor vectors and the summed incoming sensitivities.
pub fn build_local_problem<'a, A: AgentNlp + ?Sized>(
    agent: &'a A,
    x: &'a [f64],
    nb: Vec<&'a [f64]>,
    rho: f64,
    sensitivity: DVector<f64>,
) -> LocalNlp<'a, A> {
    LocalNlp { agent, x, nb, rho, sensitivity }
}

/// `∇_{x_j} L_i` for every neighbor slot of agent `i`.
pub fn mirror_gradients<A: AgentNlp + ?Sized>(
    agent: &A,
    point: &PrimalDualPoint,
    nb: &[&[f64]],
) -> Vec<DVector<f64>> {
    (0..nb.len())
        .map(|k| {
            lagrangian_gradient(
                agent,
                point.x.as_slice(),
                nb,
                point.lambda.as_slice(),
                point.mu.as_slice(),
                Block::Neighbor(k),
            )
        })
        .collect()
}

/// Applies the configured update rule to the local solution `y = (s, ν, κ)`.
pub fn apply_update<A: AgentNlp + ?Sized>(
    cfg: &SbdpConfig,
    local: &LocalNlp<'_, A>,
    point: &PrimalDualPoint,
    s: &DVector<f64>,
    nu: &DVector<f64>,
    kappa: &DVector<f64>,
) -> PrimalDualPoint {
    let a = cfg.alpha;
    match cfg.rule {
        UpdateRule::Newton => PrimalDualPoint { x: &point.x + s, lambda: nu.clone(), mu: kappa.clone() },
        UpdateRule::Damped => PrimalDualPoint {
            x: &point.x + s * a,
            lambda: &point.lambda + (nu - &point.lambda) * a,
            mu: &point.mu + (kappa - &point.mu) * a,
        },
        UpdateRule::Plus => {
            let b = cfg.beta;
            let sl = s.as_slice();
            let h = local.hessian(sl, nu.as_slice(), kappa.as_slice());
            let jg = local.eq_jacobian(sl);
            let jh = local.ineq_jacobian(sl);
            let hbar = local.ineq(sl);
            let dnu = nu - &point.lambda;
            let dkappa = kappa - &point.mu;
            let dx = &h * s + jg.transpose() * &dnu + jh.transpose() * &dkappa;
            let dl = -(&jg * s) * b;
            let jhs = &jh * s;
            let dm = DVector::from_fn(kappa.len(), |k, _| -b * (kappa[k] * jhs[k] + hbar[k] * dkappa[k]));
            PrimalDualPoint { x: &point.x + dx * a, lambda: &point.lambda + dl * a, mu: &point.mu + dm * a }
        }
    }
}

/// Unscaled KKT residual of the central problem, assembled from all agents.
/// Only used for monitoring; agents never see it.
pub fn central_kkt_residual<A: AgentNlp>(graph: &CouplingGraph, agents: &[A], points: &[PrimalDualPoint]) -> f64 {
    let mut res = 0.0f64;
    for (i, agent) in agents.iter().enumerate() {
        let p = &points[i];
        let nb: Vec<&[f64]> = graph.neighbors(i).iter().map(|&j| points[j].x.as_slice()).collect();
        let mut stat = lagrangian_gradient(agent, p.x.as_slice(), &nb, p.lambda.as_slice(), p.mu.as_slice(), Block::Own);
        for &j in graph.neighbors(i) {
            let nbj: Vec<&[f64]> = graph.neighbors(j).iter().map(|&l| points[l].x.as_slice()).collect();
            let slot = graph.slot(j, i).expect("symmetric graph");
            stat += lagrangian_gradient(
                &agents[j],
                points[j].x.as_slice(),
                &nbj,
                points[j].lambda.as_slice(),
                points[j].mu.as_slice(),
                Block::Neighbor(slot),
            );
        }
        res = res.max(stat.amax());
        let g = agent.eq(p.x.as_slice(), &nb);
        let h = agent.ineq(p.x.as_slice(), &nb);
        res = res.max(g.amax());
        for (hk, mk) in h.iter().zip(p.mu.iter()) {
            res = res.max(hk.max(0.0)).max((-mk).max(0.0)).max((hk * mk).abs());
        }
    }
    res
}

struct AgentState {
    point: PrimalDualPoint,
    neighbor_x: Vec<DVector<f64>>,
    step: f64,
}

fn check_setup<A: AgentNlp>(graph: &CouplingGraph, agents: &[A], init: &[PrimalDualPoint]) -> Result<(), SbdpError> {
    if agents.len() != graph.agent_count() || init.len() != agents.len() {
        return Err(SbdpError::Config(format!(
            "graph has {} agents, got {} specs and {} initial points",
            graph.agent_count(),
            agents.len(),
            init.len()
        )));
    }
    for (i, a) in agents.iter().enumerate() {
        let dims = a.neighbor_dims();
        let nbrs = graph.neighbors(i);
        if dims.len() != nbrs.len() {
            return Err(SbdpError::GraphMismatch { agent: i, expected: nbrs.len(), got: dims.len() });
        }
        for (&j, &d) in nbrs.iter().zip(&dims) {
            if agents[j].dim() != d {
                return Err(SbdpError::Spec {
                    agent: i,
                    source: SpecError::Dimension { what: format!("neighbor {j} block"), expected: agents[j].dim(), got: d },
                });
            }
        }
        let nb: Vec<&[f64]> = nbrs.iter().map(|&j| init[j].x.as_slice()).collect();
        validate_agent(a, init[i].x.as_slice(), &nb).map_err(|source| SbdpError::Spec { agent: i, source })?;
        if init[i].lambda.len() != a.n_eq() || init[i].mu.len() != a.n_ineq() {
            return Err(SbdpError::Config(format!("initial multipliers of agent {i} have the wrong size")));
        }
    }
    Ok(())
}

/// Runs the scheme from `p⁰ = 0` on a fresh bus.
pub fn sbdp_solve<A: AgentNlp>(graph: &CouplingGraph, agents: &[A], cfg: &SbdpConfig) -> Result<SbdpOutcome, SbdpError> {
    let init: Vec<_> = agents.iter().map(PrimalDualPoint::for_agent).collect();
    let bus = MessageBus::new(graph.clone(), cfg.mode);
    sbdp_solve_on(&bus, agents, init, cfg)
}

/// Runs the scheme on an existing bus from the given initial points.
pub fn sbdp_solve_on<A: AgentNlp>(
    bus: &MessageBus,
    agents: &[A],
    init: Vec<PrimalDualPoint>,
    cfg: &SbdpConfig,
) -> Result<SbdpOutcome, SbdpError> {
    cfg.validate()?;
    let graph = bus.graph().clone();
    check_setup(&graph, agents, &init)?;

    let mut states: Vec<AgentState> = init
        .into_iter()
        .map(|point| AgentState { point, neighbor_x: Vec::new(), step: f64::INFINITY })
        .collect();

    // initial primal exchange
    run_phase(bus, &mut states, |i, st, port| -> Result<bool, SbdpError> {
        for &j in port.neighbors() {
            let x = st.point.x.as_slice().to_vec();
            let n = x.len();
            port.post(j, RoundTag::new(0, 0), PayloadKind::StaticPrimal, x, n)?;
        }
        let _ = i;
        Ok(true)
    })?;

    let mut trace = ConvergenceTrace::default();
    for q in 0..cfg.q_max {
        let tag = RoundTag::new(0, q as u64);
        run_phase(bus, &mut states, |i, st, port| -> Result<bool, SbdpError> {
            st.neighbor_x = port
                .neighbors()
                .iter()
                .map(|&j| port.receive(j, PayloadKind::StaticPrimal, tag).map(DVector::from_vec))
                .collect::<Result<_, _>>()?;
            let nb: Vec<&[f64]> = st.neighbor_x.iter().map(|v| v.as_slice()).collect();
            let grads = mirror_gradients(&agents[i], &st.point, &nb);
            for (&j, g) in port.neighbors().iter().zip(grads) {
                let n = g.len();
                port.post(j, tag, PayloadKind::StaticGradient, g.as_slice().to_vec(), n)?;
            }
            Ok(true)
        })?;

        let next = RoundTag::new(0, q as u64 + 1);
        let all_small = run_phase(bus, &mut states, |i, st, port| -> Result<bool, SbdpError> {
            let agent = &agents[i];
            let mut sens = DVector::zeros(agent.dim());
            for &j in port.neighbors() {
                sens += DVector::from_vec(port.receive(j, PayloadKind::StaticGradient, tag)?);
            }
            let nb: Vec<&[f64]> = st.neighbor_x.iter().map(|v| v.as_slice()).collect();
            let local = build_local_problem(agent, st.point.x.as_slice(), nb, cfg.rho, sens);
            let warm = WarmStart { s: None, nu: Some(st.point.lambda.clone()), kappa: Some(st.point.mu.clone()) };
            let sol = local_nlp::solve_local_from(&local, &cfg.local, &warm).map_err(|e| {
                SbdpError::LocalSolveFailure { agent: i, iteration: q, reason: e.to_string() }
            })?;
            if sol.status != SolveStatus::Converged {
                return Err(SbdpError::LocalSolveFailure {
                    agent: i,
                    iteration: q,
                    reason: format!("{:?} with KKT residual {:.3e}", sol.status, sol.kkt_residual()),
                });
            }
            let updated = apply_update(cfg, &local, &st.point, &sol.s, &sol.nu, &sol.kappa);
            st.step = updated.inf_distance(&st.point);
            st.point = updated;
            for &j in port.neighbors() {
                let x = st.point.x.as_slice().to_vec();
                let n = x.len();
                port.post(j, next, PayloadKind::StaticPrimal, x, n)?;
            }
            Ok(st.step <= cfg.epsilon)
        })?;

        let points: Vec<PrimalDualPoint> = states.iter().map(|s| s.point.clone()).collect();
        trace.rows.push(TraceRow {
            iteration: q + 1,
            max_step_inf_norm: states.iter().map(|s| s.step).fold(0.0, f64::max),
            central_kkt_residual: central_kkt_residual(&graph, agents, &points),
        });
        let diverged = points.iter().any(|p| !(p.inf_norm() <= cfg.divergence_bound));
        if all_small || diverged {
            let outcome = SbdpOutcome {
                points,
                trace,
                iterations: q + 1,
                converged: all_small && !diverged,
                stop: if diverged { StopReason::DivergenceGuard } else { StopReason::Converged },
            };
            drain_primal(bus, &mut states, next)?;
            return if outcome.converged { Ok(outcome) } else { Err(SbdpError::NotConverged(Box::new(outcome))) };
        }
    }
    drain_primal(bus, &mut states, RoundTag::new(0, cfg.q_max as u64))?;
    Err(SbdpError::NotConverged(Box::new(SbdpOutcome {
        points: states.iter().map(|s| s.point.clone()).collect(),
        trace,
        iterations: cfg.q_max,
        converged: false,
        stop: StopReason::IterationCap,
    })))
}

/// Collects the final primal broadcast so no message is left in flight.
fn drain_primal(bus: &MessageBus, states: &mut [AgentState], tag: RoundTag) -> Result<(), SbdpError> {
    run_phase(bus, states, |_, st, port| -> Result<bool, SbdpError> {
        st.neighbor_x = port
            .neighbors()
            .iter()
            .map(|&j| port.receive(j, PayloadKind::StaticPrimal, tag).map(DVector::from_vec))
            .collect::<Result<_, _>>()?;
        Ok(true)
    })?;
    Ok(())
}

/// One iteration of the scheme from arbitrary points.
pub fn sbdp_iterate<A: AgentNlp>(
    graph: &CouplingGraph,
    agents: &[A],
    points: Vec<PrimalDualPoint>,
    cfg: &SbdpConfig,
) -> Result<Vec<PrimalDualPoint>, SbdpError> {
    let cfg = SbdpConfig { q_max: 1, epsilon: 0.0, divergence_bound: f64::INFINITY, ..cfg.clone() };
    let bus = MessageBus::new(graph.clone(), cfg.mode);
    match sbdp_solve_on(&bus, agents, points, &cfg) {
        Ok(out) => Ok(out.points),
        Err(SbdpError::NotConverged(out)) => Ok(out.points),
        Err(e) => Err(e),
    }
}
