use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbdp::dmpc::DmpcConfig;
use sbdp::graph::CouplingGraph;
use sbdp::grid::Trajectory;
use sbdp::ocp::{check_ocp_derivatives, AgentOcp, HamiltonianContext};
use sbdp::problem::{AgentNlp, Block, QuadraticAgent};
use sbdp::sbdp_static::sbdp_solve;
use sbdp::watertank::estimation::{
    build_estimation_problem, central_estimate, estimate_distributed, estimation_config, EstimationDataset,
    SyntheticData,
};
use sbdp::watertank::scenario::{disturbance_schedule, run_scenario, Disturbance};
use sbdp::watertank::{
    build_dmpc_problem, tank_rhs, TankDesign, TankError, TankParams, TankProblem, ValveWindow, Valves,
};

fn nominal() -> (TankParams, TankProblem) {
    let params = TankParams::default();
    let problem = build_dmpc_problem(&params, &TankDesign::default()).unwrap();
    (params, problem)
}

fn raw_coupling(p: &TankParams, d: f64) -> f64 {
    p.coupling / p.area * d.signum() * (2.0 * p.gravity * d.abs()).sqrt()
}

#[test]
fn equal_levels_with_closed_outflows_are_at_rest() {
    let p = TankParams::default();
    let closed = Valves { a: false, b: true, c: false };
    assert_eq!(tank_rhs([25.0, 25.0], [0.0, 0.0], &p, closed).unwrap(), [0.0, 0.0]);
}

#[test]
fn coupling_flow_at_reference_levels() {
    let p = TankParams::default();
    let rhs = tank_rhs([40.0, 20.0], [0.0, 0.0], &p, Valves::NOMINAL).unwrap();
    let expected = 0.216 / 144.0 * (2.0 * 981.0 * 20.0f64).sqrt();
    assert!((expected - 0.297).abs() < 1e-3);
    assert!((rhs[0] + expected).abs() < 1e-12, "{rhs:?}");
}

#[test]
fn smoothing_is_confined_and_c1() {
    let p = TankParams::default();
    let v = Valves::NOMINAL;
    for d in [0.6, 1.0, 5.0, -0.75, -20.0] {
        let flow = p.coupling_flow(20.0 + d, 20.0, v);
        assert!((flow + raw_coupling(&p, d)).abs() < 1e-15, "d = {d}");
    }
    let d = p.smoothing;
    let scaled = |x: f64| p.coupling / p.area * p.signed_root(x);
    assert!((scaled(d) - raw_coupling(&p, d)).abs() < 1e-12);
    let raw_slope = p.coupling / p.area * (2.0 * p.gravity).sqrt() * 0.5 / d.sqrt();
    let slope = p.coupling / p.area * p.signed_root_slope(d);
    assert!((slope - raw_slope).abs() < 1e-12, "{slope} vs {raw_slope}");
    // inside the band the cubic is below the root's singular slope
    assert!(p.signed_root(0.1).abs() < (2.0 * p.gravity * 0.1).sqrt());
}

#[test]
fn coupling_flow_is_antisymmetric() {
    let p = TankParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let h1 = rng.gen_range(0.0..60.0);
        let h2 = if rng.gen_bool(0.5) { h1 + rng.gen_range(-0.5..0.5) } else { rng.gen_range(0.0..60.0) };
        assert_eq!(p.coupling_flow(h1, h2, Valves::NOMINAL), -p.coupling_flow(h2, h1, Valves::NOMINAL));
    }
}

#[test]
fn negative_height_is_rejected() {
    let r = tank_rhs([-0.1, 3.0], [10.0, 10.0], &TankParams::default(), Valves::NOMINAL);
    assert!(matches!(r, Err(TankError::NegativeHeight { tank: 0, .. })));
}

#[test]
fn equilibrium_input_zeroes_the_rhs() {
    let (p, problem) = nominal();
    let rhs = tank_rhs(problem.x_ref, problem.u_eq, &p, Valves::NOMINAL).unwrap();
    assert!(rhs.iter().all(|v| v.abs() < 1e-10), "{rhs:?}");
    assert_eq!(problem.u_ref, problem.u_eq);
    assert!((problem.u_eq[0] - 42.79).abs() < 0.01);
}

#[test]
fn agent_split_reproduces_the_model() {
    let (p, problem) = nominal();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let h = [rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0)];
        let u = [rng.gen_range(p.u_min..p.u_max), rng.gen_range(p.u_min..p.u_max)];
        let rhs = tank_rhs(h, u, &p, Valves::NOMINAL).unwrap();
        for a in &problem.agents {
            let i = a.index;
            let nb = [h[1 - i]];
            let f = a.drift(&[h[i]], &[&nb]) + a.input_matrix(&[h[i]]) * DVector::from_element(1, u[i]);
            assert!((f[0] - rhs[i]).abs() < 1e-12, "agent {i} at {h:?}");
        }
    }
}

#[test]
fn terminal_cost_values() {
    let (_, problem) = nominal();
    assert_eq!(problem.terminal_value(problem.x_ref), 0.0);
    for a in &problem.agents {
        assert_eq!(a.terminal_gradient(&[a.x_ref])[0], 0.0);
    }
    let v = problem.terminal_value([30.0, 35.0]);
    assert!((v - 11_775.75).abs() < 1e-9, "{v}");
    assert!(v > problem.beta);
}

#[test]
fn tank_agent_derivatives() {
    let (_, problem) = nominal();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for a in &problem.agents {
        let probes: Vec<_> = (0..20)
            .map(|k| {
                let x = rng.gen_range(5.0..60.0);
                // half the probes inside the smoothing band
                let nb = if k % 2 == 0 { x + rng.gen_range(-0.45..0.45) } else { rng.gen_range(5.0..60.0) };
                (vec![x], vec![rng.gen_range(10.0..90.0)], vec![rng.gen_range(-50.0..50.0)], vec![vec![nb]])
            })
            .collect();
        let report = check_ocp_derivatives(a, &probes);
        assert!(report.passed(1e-6), "agent {}: {report:?}", a.index);
        assert_eq!(a.stage_cost_gradient(&[a.x_ref], &[&[0.0]], Block::Neighbor(0))[0], 0.0);
    }
}

#[test]
fn tank_adjoint_gradient_matches_finite_differences() {
    let (p, problem) = nominal();
    let grid = DmpcConfig::default().grid().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for a in &problem.agents {
        let nb_ref = problem.x_ref[1 - a.index];
        let frozen = Trajectory::from_fn(grid, 1, |_, t| vec![nb_ref + 3.0 * (0.4 * t).sin()]);
        let ctx = HamiltonianContext::new(a, grid, vec![&frozen], &[], None).unwrap();
        for _ in 0..10 {
            let x0 = [rng.gen_range(10.0..50.0)];
            let u = Trajectory::from_fn(grid, 1, |_, _| vec![rng.gen_range(p.u_min..p.u_max)]);
            let (_, grad) = ctx.adjoint_control_gradient(&x0, &u).unwrap();
            let cost = |u: &Trajectory| ctx.cost(&ctx.simulate(&x0, u).unwrap(), u);
            let fd = Trajectory::from_fn(grid, 1, |k, _| {
                let h = 1e-4;
                let (mut up, mut dn) = (u.clone(), u.clone());
                up.node_mut(k)[0] += h;
                dn.node_mut(k)[0] -= h;
                vec![(cost(&up) - cost(&dn)) / (2.0 * h)]
            });
            let rel = grad.max_abs_diff(&fd) / fd.max_abs();
            assert!(rel < 1e-4, "agent {}: relative error {rel:e}", a.index);
        }
    }
}

fn noiseless(params: &TankParams) -> EstimationDataset {
    EstimationDataset::synthetic(params, &SyntheticData { noise: 0.0, ..Default::default() })
}

#[test]
fn noiseless_data_recovers_the_parameters() {
    let p = TankParams::default();
    let a = central_estimate(&noiseless(&p)).unwrap();
    let truth = [p.coupling, p.outflow[1], p.coupling];
    for (x, y) in a.iter().zip(truth) {
        assert!((x - y).abs() < 1e-10, "{a:?}");
    }
}

#[test]
fn zero_start_is_feasible() {
    let (_, agents) = build_estimation_problem(&noiseless(&TankParams::default())).unwrap();
    for a in &agents {
        let own = vec![0.0; a.dim()];
        let nb: Vec<Vec<f64>> = a.neighbor_dims().iter().map(|&d| vec![0.0; d]).collect();
        let nb: Vec<&[f64]> = nb.iter().map(Vec::as_slice).collect();
        assert!(AgentNlp::eq(a, &own, &nb).iter().all(|v| *v == 0.0));
        assert!(a.ineq(&own, &nb).iter().all(|v| *v <= 0.0));
    }
}

/// Minimizes `‖N z − y‖²` over `z ≥ 0` (two variables) by trying every active set.
fn enumerate_nonnegative_ls(n: &DMatrix<f64>, y: &DVector<f64>) -> ([f64; 2], [f64; 2]) {
    let h = 2.0 * n.transpose() * n;
    let c = -2.0 * n.transpose() * y;
    let mut best: Option<(f64, [f64; 2], [f64; 2])> = None;
    for mask in 0..4u8 {
        let free: Vec<usize> = (0..2).filter(|&k| mask & (1 << k) == 0).collect();
        let mut z = DVector::zeros(2);
        if !free.is_empty() {
            let hf = DMatrix::from_fn(free.len(), free.len(), |r, s| h[(free[r], free[s])]);
            let cf = DVector::from_fn(free.len(), |r, _| -c[free[r]]);
            let zf = hf.lu().solve(&cf).unwrap();
            free.iter().enumerate().for_each(|(r, &k)| z[k] = zf[r]);
        }
        let grad = &h * &z + &c;
        // bound z_k ≥ 0 written as −z_k ≤ 0, multiplier κ_k = ∂f/∂z_k
        let kappa = [if free.contains(&0) { 0.0 } else { grad[0] }, if free.contains(&1) { 0.0 } else { grad[1] }];
        let feasible = z.iter().all(|v| *v >= -1e-12) && kappa.iter().all(|k| *k >= -1e-9);
        let val = (n * &z - y).norm_squared();
        if feasible && best.as_ref().is_none_or(|b| val < b.0) {
            best = Some((val, [z[0], z[1]], kappa));
        }
    }
    let (_, z, kappa) = best.expect("one active set is optimal");
    (z, kappa)
}

#[test]
fn negative_forcing_pins_the_outflow_at_zero() {
    let p = TankParams::default();
    let base = noiseless(&p);
    let forced = &base.regressor * DVector::from_column_slice(&[0.216, -0.1, 0.216]);
    let data = EstimationDataset::new(base.regressor.clone(), forced, "forced").unwrap();

    let m = &data.regressor;
    let reduced = DMatrix::from_fn(m.nrows(), 2, |r, c| if c == 0 { m[(r, 0)] + m[(r, 2)] } else { m[(r, 1)] });
    let (z, kappa) = enumerate_nonnegative_ls(&reduced, &data.observations);
    assert_eq!(z[1], 0.0);
    assert!(kappa[1] > 0.0);

    let central = central_estimate(&data).unwrap();
    assert!((central[0] - z[0]).abs() < 1e-9 && central[1].abs() < 1e-12, "{central:?} vs {z:?}");

    // multiplier of the active bound from the same reduced problem
    let qp = QuadraticAgent::new(2, Vec::new(), 2.0 * reduced.transpose() * &reduced, -2.0 * reduced.transpose() * &data.observations)
        .with_inequalities(-DMatrix::<f64>::identity(2, 2), DVector::zeros(2));
    let out = sbdp_solve(&CouplingGraph::single(), std::slice::from_ref(&qp), &estimation_config()).unwrap();
    let mu = &out.points[0].mu;
    assert!((mu[1] - kappa[1]).abs() < 1e-6 * kappa[1], "{mu:?} vs {kappa:?}");
}

#[test]
fn estimate_approaches_truth_as_noise_vanishes() {
    let p = TankParams::default();
    let truth = [p.coupling, p.outflow[1], p.coupling];
    let mut errors = Vec::new();
    for noise in [1e-2, 1e-4, 0.0] {
        let data = EstimationDataset::synthetic(&p, &SyntheticData { noise, ..Default::default() });
        let run = estimate_distributed(&data, &estimation_config(), 20).unwrap();
        assert!(run.trace.last().unwrap().error < 1e-6, "noise {noise}");
        errors.push(run.estimate.iter().zip(truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    assert!(errors[2] < 1e-10);
}

#[test]
fn noiseless_value_trace_decreases_to_zero() {
    let run = estimate_distributed(&noiseless(&TankParams::default()), &estimation_config(), 20).unwrap();
    assert_eq!(run.trace.len(), 21);
    assert!(run.trace.windows(2).all(|w| w[1].value <= w[0].value), "{:?}", run.trace);
    assert!(run.trace.last().unwrap().value < 1e-12);
}

fn scenario_cfg(t_sim: f64) -> DmpcConfig {
    DmpcConfig { t_sim, ..Default::default() }
}

#[test]
fn equilibrium_start_stays_at_reference() {
    let (p, problem) = nominal();
    let run = run_scenario(&problem, &p, &[], problem.x_ref, &scenario_cfg(150.0), 0.5).unwrap();
    for e in &run.log.entries {
        assert!((e.x[0] - 40.0).abs() < 0.2 && (e.x[1] - 20.0).abs() < 0.2, "t = {}: {:?}", e.t, e.x);
    }
}

#[test]
fn open_tank_one_outflow_drains_tank_one() {
    let (p, problem) = nominal();
    let window = Disturbance::I.window(5.0, 10.0);
    let run = run_scenario(&problem, &p, &[window], problem.x_ref, &scenario_cfg(20.0), 0.5).unwrap();
    let at = |t: f64| run.log.entries.iter().find(|e| (e.t - t).abs() < 1e-9).unwrap();
    assert!(at(15.0).x[0] < at(5.0).x[0] - 1.0);
    assert!(at(15.0).u[0] > problem.u_ref[0] + 5.0);
}

#[test]
fn closed_coupling_recovers_within_a_minute() {
    let (p, problem) = nominal();
    let window = Disturbance::III.window(5.0, 10.0);
    let run = run_scenario(&problem, &p, &[window], problem.x_ref, &scenario_cfg(90.0), 0.5).unwrap();
    let w = &run.windows[0];
    assert!(w.peak_deviation > 0.5);
    let rec = w.recovery.expect("recovers");
    assert!(rec <= 60.0, "recovery {rec}");
}

#[test]
fn heights_stay_nonnegative_under_all_disturbances() {
    let (p, problem) = nominal();
    let schedule = disturbance_schedule(5.0, 10.0, 40.0);
    let run = run_scenario(&problem, &p, &schedule, problem.x_ref, &scenario_cfg(130.0), 0.5).unwrap();
    assert!(run.log.entries.iter().flat_map(|e| &e.x).all(|h| *h >= -1e-9));
    assert_eq!(run.windows.len(), 3);
}

#[test]
fn overlapping_windows_are_rejected() {
    let (p, problem) = nominal();
    let w: Vec<ValveWindow> = vec![Disturbance::I.window(0.0, 10.0), Disturbance::II.window(5.0, 10.0)];
    assert!(run_scenario(&problem, &p, &w, problem.x_ref, &scenario_cfg(20.0), 0.5).is_err());
}

#[test]
fn estimation_graph_is_a_pair() {
    let (graph, agents) = build_estimation_problem(&noiseless(&TankParams::default())).unwrap();
    assert_eq!(graph, CouplingGraph::path(2).unwrap());
    assert_eq!((agents[0].dim(), agents[1].dim()), (1, 2));
}

#[test]
fn estimation_converges_for_many_noise_draws() {
    let p = TankParams::default();
    for seed in 0..40 {
        let data = EstimationDataset::synthetic(&p, &SyntheticData { seed, ..Default::default() });
        let run = estimate_distributed(&data, &estimation_config(), 20).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert!(run.trace.last().unwrap().error < 1e-6, "seed {seed}");
    }
}
