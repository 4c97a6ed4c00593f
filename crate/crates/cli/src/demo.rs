//! Two-agent quadratic programs that show when each update rule converges.

use nalgebra::{DMatrix, DVector};
use sbdp::coordination::SchedulerMode;
use sbdp::graph::CouplingGraph;
use sbdp::problem::QuadraticAgent;
use sbdp::sbdp_static::{sbdp_solve, SbdpConfig, SbdpError, SbdpOutcome, StopReason};
use serde::Serialize;

use crate::{CliError, Output};

/// `f_0 = ½(x_0 − 1)²`, `f_1 = ½x_1² + (w/2)(x_1 − x_0)²`.
fn cost_coupled(w: f64) -> Vec<QuadraticAgent> {
    let a0 = QuadraticAgent::new(1, vec![1], DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), DVector::from_vec(vec![-1.0, 0.0]))
        .with_offset(0.5);
    // z = [x_1; x_0]
    let a1 = QuadraticAgent::new(1, vec![1], DMatrix::from_row_slice(2, 2, &[1.0 + w, -w, -w, w]), DVector::zeros(2));
    vec![a0, a1]
}

/// `f_0 = ½(x_0 − 2)²`, `f_1 = ½(x_1 − 2)² + (3/2)(x_1 − x_0)²`, and agent 0
/// owns `x_0 + 2x_1 ≤ 1`.
fn constraint_coupled() -> Vec<QuadraticAgent> {
    let a0 = QuadraticAgent::new(1, vec![1], DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), DVector::from_vec(vec![-2.0, 0.0]))
        .with_offset(2.0)
        .with_inequalities(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), DVector::from_element(1, 1.0));
    let a1 = QuadraticAgent::new(1, vec![1], DMatrix::from_row_slice(2, 2, &[4.0, -3.0, -3.0, 3.0]), DVector::from_vec(vec![-2.0, 0.0]))
        .with_offset(2.0);
    vec![a0, a1]
}

#[derive(Serialize)]
struct DemoRun {
    instance: &'static str,
    rule: String,
    converged: bool,
    stop: Option<StopReason>,
    iterations: usize,
    x: Vec<f64>,
    central_kkt_residual: Option<f64>,
    error: Option<String>,
}

fn record(instance: &'static str, rule: String, result: Result<SbdpOutcome, SbdpError>) -> (DemoRun, Option<String>) {
    let outcome = match result {
        Ok(o) => o,
        Err(SbdpError::NotConverged(o)) => *o,
        Err(e) => {
            let run = DemoRun {
                instance,
                rule,
                converged: false,
                stop: None,
                iterations: 0,
                x: Vec::new(),
                central_kkt_residual: None,
                error: Some(e.to_string()),
            };
            return (run, None);
        }
    };
    let run = DemoRun {
        instance,
        rule,
        converged: outcome.converged,
        stop: Some(outcome.stop),
        iterations: outcome.iterations,
        x: outcome.points.iter().flat_map(|p| p.x.iter().copied()).collect(),
        central_kkt_residual: outcome.trace.rows.last().map(|r| r.central_kkt_residual),
        error: None,
    };
    (run, Some(outcome.trace.to_csv()))
}

pub fn run(mode: SchedulerMode, out: &Output) -> Result<(), CliError> {
    let graph = CouplingGraph::path(2).expect("two agents");
    let with_mode = |c: SbdpConfig| SbdpConfig { mode, q_max: 2000, ..c };
    let cases: Vec<(&'static str, Vec<QuadraticAgent>, Vec<(String, SbdpConfig)>)> = vec![
        ("weak_cost_coupling", cost_coupled(0.3), vec![("newton".into(), SbdpConfig::newton())]),
        (
            "strong_cost_coupling",
            cost_coupled(3.0),
            vec![("newton".into(), SbdpConfig::newton()), ("damped_0.2".into(), SbdpConfig::damped(0.2))],
        ),
        (
            "coupled_inequality",
            constraint_coupled(),
            vec![("newton".into(), SbdpConfig::newton()), ("plus_0.1".into(), SbdpConfig::plus(0.1, 1.0))],
        ),
    ];
    let mut runs = Vec::new();
    for (name, agents, rules) in cases {
        for (rule, cfg) in rules {
            let (run, trace) = record(name, rule, sbdp_solve(&graph, &agents, &with_mode(cfg)));
            if let Some(csv) = trace {
                out.write(&format!("static_{}_{}.csv", run.instance, run.rule), &csv)?;
            }
            println!(
                "{:<22} {:<11} {} after {} iterations",
                run.instance,
                run.rule,
                if run.converged { "converged" } else { "did not converge" },
                run.iterations
            );
            runs.push(run);
        }
    }
    out.json("static_demo.json", &runs)
}
