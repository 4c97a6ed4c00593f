mod common;

use common::{lq_pair, Lq};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbdp::coordination::{MessageBus, SchedulerMode};
use sbdp::graph::CouplingGraph;
use sbdp::grid::{TimeGrid, Trajectory};
use sbdp::ocp::stacked::StackedOcp;
use sbdp::ocp::transcription::TranscribedOcp;
use sbdp::ocp::{
    check_ocp_derivatives, control_projection, fixed_point_solve, AgentOcp, AgentTrajectorySet, FixedPointConfig,
    HamiltonianContext,
};
use sbdp::problem::{check_agent_derivatives, Block};
use sbdp::sbdp_ocp::{
    central_fixed_point, central_joint_transcribed, central_stacked_transcribed, cold_start, sbdp_ocp_exact, sbdp_ocp_run, OcpConfig, OcpIterationState,
};

/// `ẋ = -x³ + 0.3 sin x_j + (1 + 0.1 x²) u`, `l⁰ = ½ x² + 0.1 x x_j`, `V = x²`.
struct Bent;

impl AgentOcp for Bent {
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
        DVector::from_element(1, -x[0].powi(3) + 0.3 * nb[0][0].sin())
    }
    fn input_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0 + 0.1 * x[0] * x[0])
    }
    fn stage_cost(&self, x: &[f64], nb: &[&[f64]]) -> f64 {
        0.5 * x[0] * x[0] + 0.1 * x[0] * nb[0][0]
    }
    fn control_weight(&self) -> DVector<f64> {
        DVector::from_element(1, 0.5)
    }
    fn u_ref(&self) -> DVector<f64> {
        DVector::from_element(1, 0.1)
    }
    fn u_min(&self) -> DVector<f64> {
        DVector::from_element(1, -1.0)
    }
    fn u_max(&self) -> DVector<f64> {
        DVector::from_element(1, 1.0)
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        x[0] * x[0]
    }
}

fn grid(t: f64) -> TimeGrid {
    TimeGrid::new(t, 30).unwrap()
}

fn states_and_controls_diff(a: &[AgentTrajectorySet], b: &[AgentTrajectorySet]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a.x.max_abs_diff(&b.x).max(a.u.max_abs_diff(&b.u))).fold(0.0, f64::max)
}

#[test]
fn transcription_derivatives_match_finite_differences() {
    let g = grid(1.0);
    let agent = Bent;
    let t = TranscribedOcp::new(&agent, g, DVector::from_element(1, 0.4), vec![DVector::from_element(1, -0.2)], vec![1]);
    let dim = sbdp::problem::AgentNlp::dim(&t);
    let nb_dim = sbdp::problem::AgentNlp::neighbor_dims(&t)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let probes: Vec<_> = (0..3)
        .map(|_| {
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let nb: Vec<f64> = (0..nb_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (x, vec![nb])
        })
        .collect();
    let report = check_agent_derivatives(&t, &probes);
    assert!(report.passed(1e-5), "{report:?}");
}

#[test]
fn stacked_problem_concatenates_agents() {
    let graph = CouplingGraph::path(2).unwrap();
    let agents = lq_pair();
    let stacked = StackedOcp::new(&graph, &agents);
    let x = [0.7, -0.4];
    let f = stacked.drift(&x, &[]);
    assert_eq!(f[0], agents[0].drift(&x[..1], &[&x[1..]])[0]);
    assert_eq!(f[1], agents[1].drift(&x[1..], &[&x[..1]])[0]);
    let probes = vec![(x.to_vec(), vec![0.3, -0.1], vec![1.5, 0.2], vec![])];
    let report = check_ocp_derivatives(&stacked, &probes);
    assert!(report.passed(1e-6), "{report:?}");
    assert!(stacked.stage_cost_gradient(&x, &[], Block::Own).len() == 2);
}

#[test]
fn adjoint_gradient_matches_finite_differences() {
    let g = grid(1.5);
    let agent = Bent;
    let frozen = Trajectory::from_fn(g, 1, |_, t| vec![0.5 * t.cos()]);
    let ctx = HamiltonianContext::new(&agent, g, vec![&frozen], &[], None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let x0 = [rng.gen_range(-1.0..1.0)];
        let u = Trajectory::from_fn(g, 1, |_, _| vec![rng.gen_range(-1.0..1.0)]);
        let (_, grad) = ctx.adjoint_control_gradient(&x0, &u).unwrap();
        let cost = |u: &Trajectory| ctx.cost(&ctx.simulate(&x0, u).unwrap(), u);
        for k in 0..g.nodes() {
            let h = 1e-6;
            let (mut up, mut dn) = (u.clone(), u.clone());
            up.node_mut(k)[0] += h;
            dn.node_mut(k)[0] -= h;
            let fd = (cost(&up) - cost(&dn)) / (2.0 * h);
            let scale = fd.abs().max(1e-3);
            assert!((grad.node(k)[0] - fd).abs() / scale < 1e-6, "node {k}: {} vs {fd}", grad.node(k)[0]);
        }
    }
}

#[test]
fn projection_minimizes_the_hamiltonian() {
    let g = grid(1.0);
    let agent = Bent;
    let frozen = Trajectory::constant(g, &[0.2]);
    let ctx = HamiltonianContext::new(&agent, g, vec![&frozen], &[], None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let x = [rng.gen_range(-2.0..2.0)];
        let lam = [rng.gen_range(-3.0..3.0)];
        let u = control_projection(&agent, &x, &lam)[0];
        let k = rng.gen_range(0..g.nodes());
        let samples = 20_001;
        let (best_u, best_h) = (0..samples)
            .map(|s| {
                let v = -1.0 + 2.0 * s as f64 / (samples - 1) as f64;
                (v, ctx.hamiltonian(k, &x, &[v], &lam))
            })
            .fold((0.0, f64::INFINITY), |acc, c| if c.1 < acc.1 { c } else { acc });
        assert!(ctx.hamiltonian(k, &x, &[u], &lam) <= best_h + 1e-12);
        assert!((u - best_u).abs() <= 1e-4);
    }
}

#[test]
fn fixed_point_matches_transcribed_oracle() {
    let g = grid(1.0);
    let agent = Lq { a: -1.0, b: 1.0, c: 0.0, q: 0.5, w: 0.0, p: 0.5, r: 1.0, lo: -0.1, hi: 1.0, coupled: false };
    let x0 = [0.5];
    let ctx = HamiltonianContext::isolated(&agent, g).unwrap();
    let res = fixed_point_solve(&ctx, &x0, &Trajectory::zeros(g, 1), &FixedPointConfig::sweeps(50)).unwrap();
    assert!(ctx.bvp_residual(&x0, &res.trajectories) < 1e-6);

    let oracle =
        central_stacked_transcribed(&CouplingGraph::single(), std::slice::from_ref(&agent), g, &[DVector::from_element(1, 0.5)])
            .unwrap();
    // the bound u >= -0.1 is active at the start
    assert!((oracle[0].u.node(0)[0] + 0.1).abs() < 1e-8);
    let diff = states_and_controls_diff(&[res.trajectories], &oracle);
    assert!(diff < 1e-4, "diff {diff}");
}

#[test]
fn converged_bvp_solution_is_a_fixed_point() {
    // longer horizons push the sweep gain above one for this agent
    let g = grid(0.5);
    let agent = Bent;
    let frozen = Trajectory::constant(g, &[0.3]);
    let signal = Trajectory::from_fn(g, 1, |_, t| vec![0.1 * t]);
    let ctx = HamiltonianContext::new(&agent, g, vec![&frozen], &[&signal], None).unwrap();
    let x0 = [0.8];
    let cfg = FixedPointConfig { j_max: 200, tolerance: Some(1e-13) };
    let res = fixed_point_solve(&ctx, &x0, &Trajectory::zeros(g, 1), &cfg).unwrap();
    assert!(ctx.bvp_residual(&x0, &res.trajectories) < 1e-10);
    let again = fixed_point_solve(&ctx, &x0, &res.trajectories.lambda, &FixedPointConfig::sweeps(1)).unwrap();
    assert!(again.trajectories.max_abs_diff(&res.trajectories) < 1e-8);
}

#[test]
fn decoupled_agents_solve_their_own_problem_in_one_iteration() {
    let g = grid(1.0);
    let graph = CouplingGraph::path(2).unwrap();
    let agents: Vec<Lq> = lq_pair().into_iter().map(|a| Lq { c: 0.0, w: 0.0, ..a }).collect();
    let x0 = vec![DVector::from_element(1, 1.0), DVector::from_element(1, -0.5)];
    let init = cold_start(&graph, &agents, g, &x0, &[DVector::zeros(1), DVector::zeros(1)]).unwrap();
    let bus = MessageBus::new(graph.clone(), SchedulerMode::Deterministic);
    let mut state = OcpIterationState::new(&graph, x0.clone(), init.clone());
    sbdp_ocp_run(&bus, &agents, &mut state, &OcpConfig::new(1, 7)).unwrap();
    for (i, agent) in agents.iter().enumerate() {
        let frozen = Trajectory::zeros(g, 1);
        let ctx = HamiltonianContext::new(agent, g, vec![&frozen], &[], None).unwrap();
        let own = fixed_point_solve(&ctx, x0[i].as_slice(), &init[i].lambda, &FixedPointConfig::sweeps(7)).unwrap();
        assert_eq!(state.agents[i].traj, own.trajectories);
        assert!(state.agents[i].signals[0].max_abs() == 0.0);
    }
}

#[test]
fn two_agent_lq_matches_central_oracle() {
    // the sweep limit differs from the oracle by O(h²), largest at the first control node
    let g = TimeGrid::new(1.0, 50).unwrap();
    let graph = CouplingGraph::path(2).unwrap();
    let agents = lq_pair();
    let x0 = vec![DVector::from_element(1, 1.0), DVector::from_element(1, -0.7)];
    let refs = [DVector::zeros(1), DVector::zeros(1)];
    let joint = central_joint_transcribed(&graph, &agents, g, &x0).unwrap();
    let oracle = central_stacked_transcribed(&graph, &agents, g, &x0).unwrap();
    for o in [&joint, &oracle] {
        assert!(o[0].u.as_slice().iter().any(|&u| (u + 0.4).abs() < 1e-9), "lower bound of agent 0 should be active");
    }
    let init = cold_start(&graph, &agents, g, &x0, &refs).unwrap();

    let exact = sbdp_ocp_exact(&graph, &agents, g, &x0, &init, 30, SchedulerMode::Deterministic).unwrap();
    let d_exact = states_and_controls_diff(&exact, &joint);
    let d_lambda = exact.iter().zip(&joint).map(|(a, b)| a.lambda.max_abs_diff(&b.lambda)).fold(0.0, f64::max);
    assert!(d_exact < 1e-5 && d_lambda < 1e-5, "exact {d_exact}, adjoint {d_lambda}");

    let bus = MessageBus::new(graph.clone(), SchedulerMode::Deterministic);
    let mut state = OcpIterationState::new(&graph, x0.clone(), init);
    let changes = sbdp_ocp_run(&bus, &agents, &mut state, &OcpConfig::new(30, 5)).unwrap();
    let d_fp = states_and_controls_diff(&state.trajectories(), &oracle);
    assert!(d_fp < 1e-3, "fixed point {d_fp}");
    assert!(changes[29] < 1e-8);

    let (central, _) =
        central_fixed_point(&graph, &agents, g, &x0, &state.trajectories(), &FixedPointConfig::sweeps(50)).unwrap();
    assert!(states_and_controls_diff(&central, &state.trajectories()) < 1e-3);
    assert!(states_and_controls_diff(&central, &oracle) < 1e-3);
}

#[test]
fn ocp_traffic_and_scheduler_equivalence() {
    let g = grid(1.0);
    let graph = CouplingGraph::path(2).unwrap();
    let agents = lq_pair();
    let x0 = vec![DVector::from_element(1, 1.5), DVector::from_element(1, -1.0)];
    let init = cold_start(&graph, &agents, g, &x0, &[DVector::zeros(1), DVector::zeros(1)]).unwrap();
    let run = |mode| {
        let bus = MessageBus::new(graph.clone(), mode);
        let mut state = OcpIterationState::new(&graph, x0.clone(), init.clone());
        sbdp_ocp_run(&bus, &agents, &mut state, &OcpConfig::new(4, 3)).unwrap();
        (state, bus)
    };
    let (det, bus) = run(SchedulerMode::Deterministic);
    let (par, _) = run(SchedulerMode::Parallel);
    assert_eq!(det, par);
    let stats = bus.stats();
    for (from, to) in graph.directed_channels() {
        assert_eq!(stats.channel(from, to).unwrap().floats, 4 * 2 * 30);
    }
    assert_eq!(bus.in_flight_floats(), 0);
    assert_eq!(bus.audit_violations(), 0);
}


