//! `sbdp` command-line driver.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure.

mod demo;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sbdp::coordination::SchedulerMode;
use sbdp::dmpc::{run_closed_loop, sweep, ClosedLoopLog, DmpcConfig, DmpcError, Solver};
use sbdp::watertank::config::{BenchmarkConfig, DmpcSummary, EstimationSource, EstimationSummary, RunSummary, ScenarioConfig};
use sbdp::watertank::estimation::{estimate_distributed, estimation_config, EstimationDataset, EstimationError};
use sbdp::watertank::scenario::{run_scenario, WindowReport};
use sbdp::watertank::{build_dmpc_problem, TankPlant};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "sbdp", version, about = "Distributed optimization and DMPC on the coupled water tanks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config; omitted fields take the built-in water-tank defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Seed of the synthetic estimation data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded reference scheduler instead of one thread per agent.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    q_max: Option<usize>,
    #[arg(long, global = true)]
    j_max: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Distributed least-squares estimation of the tank cross sections.
    Estimate,
    /// Closed-loop DMPC simulation.
    Dmpc {
        /// Also run the central reference controller.
        #[arg(long)]
        central: bool,
        /// JSON valve schedule applied to the plant.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Closed-loop cost over the (q_max, j_max) ladder.
    Sweep,
    /// Static scheme on small bundled problems with every update rule.
    StaticDemo,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Numerical(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

fn dmpc_error(e: DmpcError) -> CliError {
    match e {
        DmpcError::Config(_) | DmpcError::Grid(_) | DmpcError::GridMisalignment { .. } => CliError::Config(e.to_string()),
        _ => CliError::Numerical(e.to_string()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable summary");
        text.push('\n');
        self.write(name, &text)
    }
}

fn load(cli: &Cli) -> Result<BenchmarkConfig, CliError> {
    let mut cfg: BenchmarkConfig = match &cli.config {
        Some(path) => read_json(path)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(seed) = cli.seed {
        if let EstimationSource::Synthetic(d) = &mut cfg.estimation.data {
            d.seed = seed;
        }
    }
    cfg.dmpc.mode = if cli.deterministic { SchedulerMode::Deterministic } else { SchedulerMode::Parallel };
    if let Some(q) = cli.q_max {
        cfg.dmpc.q_max = q;
    }
    if let Some(j) = cli.j_max {
        cfg.dmpc.j_max = j;
    }
    cfg.dmpc.validate().map_err(dmpc_error)?;
    cfg.params.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn estimate(cli: &Cli, cfg: &BenchmarkConfig, out: &Output) -> Result<(), CliError> {
    let data = match &cfg.estimation.data {
        EstimationSource::Synthetic(spec) => EstimationDataset::synthetic(&cfg.params, spec),
        EstimationSource::File { path } => {
            let base = cli.config.as_deref().and_then(Path::parent).unwrap_or(Path::new("."));
            let full = base.join(path);
            let file = fs::File::open(&full).map_err(|e| CliError::Config(format!("cannot read {}: {e}", full.display())))?;
            EstimationDataset::from_csv(file, full.display().to_string()).map_err(|e| CliError::Config(e.to_string()))?
        }
    };
    let mut solver = estimation_config();
    solver.mode = cfg.dmpc.mode;
    let run = estimate_distributed(&data, &solver, cfg.estimation.iterations).map_err(|e| match e {
        EstimationError::Solver(e) => CliError::Numerical(e.to_string()),
        e => CliError::Config(e.to_string()),
    })?;
    out.write("trace.csv", &run.trace_csv())?;
    let summary = EstimationSummary::new(&run, data.rows(), &data.provenance);
    out.json("estimate.json", &summary)?;
    println!("a = {:?}, f(a) = {:e}, error vs central = {:e}", summary.estimate, summary.objective, summary.final_error);
    Ok(())
}

fn dmpc(cfg: &BenchmarkConfig, out: &Output, central: bool, scenario: Option<&Path>) -> Result<(), CliError> {
    let problem = build_dmpc_problem(&cfg.params, &cfg.design).map_err(|e| CliError::Config(e.to_string()))?;
    let scenario: Option<ScenarioConfig> = scenario.map(read_json).transpose()?;
    let mut dcfg = cfg.dmpc;
    if let Some(t) = scenario.as_ref().and_then(|s| s.t_sim) {
        dcfg.t_sim = t;
    }
    dcfg.validate().map_err(dmpc_error)?;

    let simulate = |solver: Solver| -> Result<(ClosedLoopLog, Option<Vec<WindowReport>>), DmpcError> {
        let c = DmpcConfig { solver, ..dcfg };
        match &scenario {
            Some(s) => {
                let start = s.start.unwrap_or(problem.x_ref);
                let run = run_scenario(&problem, &cfg.params, &s.windows, start, &c, s.tolerance)?;
                Ok((run.log, Some(run.windows)))
            }
            None => {
                let plant = TankPlant::nominal(cfg.params);
                Ok((run_closed_loop(&problem.graph, &problem.agents, &plant, &cfg.x0, &c, problem.beta)?, None))
            }
        }
    };

    let (log, windows) = match simulate(Solver::Distributed) {
        Ok(r) => r,
        Err(DmpcError::Diverged { step, log }) => {
            out.write("closed_loop.csv", &log.to_csv())?;
            let mut summary = DmpcSummary::new(&log, &problem, &cfg.design, dcfg);
            summary.diverged_at = Some(step);
            out.json("summary.json", &summary)?;
            return Err(CliError::Numerical(format!("plant diverged after step {step}; last good samples written")));
        }
        Err(e) => return Err(dmpc_error(e)),
    };
    out.write("closed_loop.csv", &log.to_csv())?;
    let mut summary = DmpcSummary::new(&log, &problem, &cfg.design, dcfg);
    summary.windows = windows;
    if central {
        let (clog, _) = simulate(Solver::central()).map_err(dmpc_error)?;
        out.write("closed_loop_central.csv", &clog.to_csv())?;
        summary.central = Some(RunSummary::from_log(&clog));
    }
    out.json("summary.json", &summary)?;
    println!(
        "J_cl = {:.4}, max V(x(T)) = {:.1}, floats per step = {}{}",
        summary.run.j_cl,
        summary.run.max_terminal_v,
        summary.run.floats_per_step,
        summary.central.as_ref().map_or(String::new(), |c| format!(", central J_cl = {:.4}", c.j_cl)),
    );
    Ok(())
}

fn sweep_cmd(cfg: &BenchmarkConfig, out: &Output) -> Result<(), CliError> {
    let ladder = &cfg.sweep;
    if ladder.q_max.is_empty() || ladder.j_max.is_empty() {
        return Err(CliError::Config("sweep ladders must be nonempty".into()));
    }
    let problem = build_dmpc_problem(&cfg.params, &cfg.design).map_err(|e| CliError::Config(e.to_string()))?;
    let plant = TankPlant::nominal(cfg.params);
    let table = sweep(&problem.graph, &problem.agents, &plant, &cfg.x0, &cfg.dmpc, problem.beta, &ladder.q_max, &ladder.j_max);
    out.write("table.csv", &table.to_csv())?;
    for c in &table.cells {
        match (c.j_cl, &c.error) {
            (Some(j), _) => println!("q_max = {}, j_max = {}: J_cl = {j:.4}", c.q_max, c.j_max),
            (None, e) => println!("q_max = {}, j_max = {}: failed ({})", c.q_max, c.j_max, e.as_deref().unwrap_or("?")),
        }
    }
    match table.central {
        Some(j) => println!("central: J_cl = {j:.4}"),
        None => println!("central: failed"),
    }
    let failed = table.cells.iter().filter(|c| c.j_cl.is_none()).count() + usize::from(table.central.is_none());
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} sweep runs failed; partial table written")));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load(cli)?;
    let out = Output::new(&cli.out)?;
    match &cli.command {
        Command::Estimate => estimate(cli, &cfg, &out),
        Command::Dmpc { central, scenario } => dmpc(&cfg, &out, *central, scenario.as_deref()),
        Command::Sweep => sweep_cmd(&cfg, &out),
        Command::StaticDemo => demo::run(cfg.dmpc.mode, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sbdp: {e}");
            ExitCode::from(e.code())
        }
    }
}
