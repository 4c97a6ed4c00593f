mod common;

use common::*;
use nalgebra::DVector;
use proptest::prelude::*;
use sbdp::coordination::{MessageBus, SchedulerMode};
use sbdp::problem::{AgentNlp, PrimalDualPoint};
use sbdp::sbdp_static::{sbdp_iterate, sbdp_solve, sbdp_solve_on, SbdpConfig, SbdpError, StopReason};

const LADDER: [f64; 4] = [0.5, 0.2, 0.1, 0.05];

fn flatten(points: &[PrimalDualPoint]) -> DVector<f64> {
    let v: Vec<f64> = points.iter().flat_map(|p| p.stacked().iter().copied().collect::<Vec<_>>()).collect();
    DVector::from_vec(v)
}

fn unflatten(like: &[PrimalDualPoint], v: &DVector<f64>) -> Vec<PrimalDualPoint> {
    let mut k = 0;
    like.iter()
        .map(|p| {
            let mut take = |n: usize| {
                let out = v.rows(k, n).into_owned();
                k += n;
                out
            };
            PrimalDualPoint { x: take(p.x.len()), lambda: take(p.lambda.len()), mu: take(p.mu.len()) }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn newton_matches_central_oracle(seed in any::<u64>()) {
        let inst = random_weakly_coupled(seed);
        prop_assert!(jacobi_radius(&assemble(&inst.graph, &inst.agents)) < 1.0);
        let oracle = central_points(&inst.graph, &inst.agents);
        let out = sbdp_solve(&inst.graph, &inst.agents, &SbdpConfig::newton()).unwrap();
        prop_assert!(out.converged);
        prop_assert!(stacked_distance(&out.points, &oracle) < 1e-7);
    }

    #[test]
    fn central_point_is_fixed_point(seed in any::<u64>()) {
        let inst = random_weakly_coupled(seed);
        let oracle = central_points(&inst.graph, &inst.agents);
        for cfg in [SbdpConfig::newton(), SbdpConfig::damped(0.5), SbdpConfig::plus(0.2, 1.0)] {
            let next = sbdp_iterate(&inst.graph, &inst.agents, oracle.clone(), &cfg).unwrap();
            prop_assert!(stacked_distance(&next, &oracle) < 1e-9);
        }
    }
}

#[test]
fn coupled_inequality_needs_plus_rule() {
    let inst = coupled_inequality();
    let oracle = central_points(&inst.graph, &inst.agents);
    assert!((oracle[0].x[0] - 7.0 / 16.0).abs() < 1e-12);
    assert!((oracle[0].mu[0] - 35.0 / 32.0).abs() < 1e-12);

    let cfg = SbdpConfig { q_max: 2000, ..SbdpConfig::newton() };
    match sbdp_solve(&inst.graph, &inst.agents, &cfg) {
        Err(SbdpError::NotConverged(o)) => assert_eq!(o.stop, StopReason::DivergenceGuard),
        other => panic!("newton rule should diverge, got {other:?}"),
    }

    let working: Vec<f64> = LADDER
        .iter()
        .copied()
        .filter(|&a| {
            let cfg = SbdpConfig { q_max: 2000, ..SbdpConfig::plus(a, 1.0) };
            sbdp_solve(&inst.graph, &inst.agents, &cfg)
                .map(|o| stacked_distance(&o.points, &oracle) < 1e-6)
                .unwrap_or(false)
        })
        .collect();
    assert!(!working.is_empty());
    assert_eq!(working[0], 0.1);
}

#[test]
fn damping_rescues_strong_coupling() {
    let inst = strongly_coupled();
    let oracle = central_points(&inst.graph, &inst.agents);
    let newton = SbdpConfig::newton();
    let map = |v: &DVector<f64>| flatten(&sbdp_iterate(&inst.graph, &inst.agents, unflatten(&oracle, v), &newton).unwrap());
    let radius = map_radius(map, &flatten(&oracle));
    // block Jacobi on [[4, -3], [-3, 4]] after the sensitivity shift
    assert!(radius > 1.0, "radius {radius}");
    assert!(sbdp_solve(&inst.graph, &inst.agents, &newton).is_err());

    let largest = LADDER.iter().copied().find(|&a| {
        let cfg = SbdpConfig { q_max: 2000, ..SbdpConfig::damped(a) };
        sbdp_solve(&inst.graph, &inst.agents, &cfg)
            .map(|o| stacked_distance(&o.points, &oracle) < 1e-8)
            .unwrap_or(false)
    });
    assert_eq!(largest, Some(0.2));
}

#[test]
fn schedulers_agree_bitwise() {
    for seed in 0..5 {
        let inst = random_weakly_coupled(seed);
        let det = sbdp_solve(&inst.graph, &inst.agents, &SbdpConfig::newton()).unwrap();
        let cfg = SbdpConfig { mode: SchedulerMode::Parallel, ..SbdpConfig::newton() };
        let par = sbdp_solve(&inst.graph, &inst.agents, &cfg).unwrap();
        assert_eq!(det.points, par.points);
        assert_eq!(det.trace, par.trace);
    }
}

#[test]
fn traffic_matches_neighbor_dimensions() {
    let inst = random_weakly_coupled(7);
    let bus = MessageBus::new(inst.graph.clone(), SchedulerMode::Deterministic);
    let init = inst.agents.iter().map(PrimalDualPoint::for_agent).collect();
    let out = sbdp_solve_on(&bus, &inst.agents, init, &SbdpConfig::newton()).unwrap();
    let stats = bus.stats();
    for (from, to) in inst.graph.directed_channels() {
        let ch = stats.channel(from, to).unwrap();
        // one gradient of size n_to and one primal of size n_from per iteration, plus the initial primal
        let expected = out.iterations * (inst.agents[to].dim() + inst.agents[from].dim()) + inst.agents[from].dim();
        assert_eq!(ch.floats, expected);
    }
    assert_eq!(bus.in_flight_floats(), 0);
    assert_eq!(bus.audit_violations(), 0);
}

#[test]
fn trace_reports_central_residual() {
    let inst = random_weakly_coupled(3);
    let out = sbdp_solve(&inst.graph, &inst.agents, &SbdpConfig::newton()).unwrap();
    let last = out.trace.rows.last().unwrap();
    assert_eq!(last.iteration, out.iterations);
    assert!(last.max_step_inf_norm <= 1e-10);
    assert!(last.central_kkt_residual < 1e-8);
    assert!(out.trace.to_csv().starts_with("iteration,max_step_inf_norm,central_kkt_residual\n"));
}
