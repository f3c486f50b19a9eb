use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chebplan::chebyshev::make_grid;
use chebplan::config::ConfigError;
use chebplan::executor::{run, EventKind, Mode, RunOptions};
use chebplan::metrics::RunMetrics;
use chebplan::nlp::{plan_route, NlpError, ObstacleSnapshot, PlanSolution};
use chebplan::ScenarioConfig;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const DENSE_SAMPLES: usize = 200;

#[derive(Parser)]
#[command(
    name = "chebplan",
    version,
    about = "Minimum-time trajectory planning with an APF safety layer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the closed-loop simulation and write logs and metrics.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Lockstep)]
        mode: ModeArg,
        /// Controller ticks between launching and publishing a solve (lockstep).
        /// Defaults to controller rate / planner rate.
        #[arg(long)]
        solve_ticks: Option<usize>,
        /// Randomizes the phase of circular obstacles.
        #[arg(long)]
        seed: Option<u64>,
        /// Simulated seconds, overriding the scenario.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Solve once from the scenario start and write the plan as JSON.
    Plan {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a scenario and print it with every default filled in.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Lockstep,
    Realtime,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            out,
            mode,
            solve_ticks,
            seed,
            duration,
        } => cmd_run(&scenario, &out, mode, solve_ticks, seed, duration),
        Command::Plan { scenario, out } => cmd_plan(&scenario, &out),
        Command::Validate { scenario } => cmd_validate(&scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

enum Failure {
    Config(ConfigError),
    Run(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Run(format!("{}: {e}", path.display()))
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    let scn = ScenarioConfig::load(path)?;
    print!("{}", scn.to_toml_string());
    Ok(())
}

fn cmd_run(
    path: &Path,
    out: &Path,
    mode: ModeArg,
    solve_ticks: Option<usize>,
    seed: Option<u64>,
    duration: Option<f64>,
) -> Result<(), Failure> {
    let scn = ScenarioConfig::load(path)?;
    if solve_ticks == Some(0) {
        return Err(Failure::Run("--solve-ticks must be at least 1".into()));
    }
    if duration.is_some_and(|d| !(d.is_finite() && d > 0.0)) {
        return Err(Failure::Run("--duration must be a positive number of seconds".into()));
    }
    let opts = RunOptions {
        mode: match mode {
            ModeArg::Lockstep => Mode::Lockstep {
                solve_ticks: solve_ticks.unwrap_or_else(|| scn.default_solve_ticks()),
            },
            ModeArg::Realtime => Mode::Realtime,
        },
        planner_cutoff: None,
        seed,
        duration,
    };
    let log = run(&scn, &opts).map_err(|e| Failure::Run(e.to_string()))?;
    let metrics = RunMetrics::from_log(&log);

    fs::create_dir_all(out).map_err(io_err(out))?;
    let csv_path = out.join("log.csv");
    let f = File::create(&csv_path).map_err(io_err(&csv_path))?;
    log.write_csv(BufWriter::new(f))
        .map_err(|e| Failure::Run(format!("{}: {e}", csv_path.display())))?;
    let side_path = out.join("solves.json");
    let f = File::create(&side_path).map_err(io_err(&side_path))?;
    log.write_sidecar(BufWriter::new(f))
        .map_err(|e| Failure::Run(format!("{}: {e}", side_path.display())))?;
    let metrics_path = out.join("metrics.json");
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    fs::write(&metrics_path, text + "\n").map_err(io_err(&metrics_path))?;

    println!(
        "legs {}  min separation {:.4} m ({:.3} R)  collisions {}  solves {} (median {:.1} ms, p95 {:.1} ms, {:.1}% converged)",
        metrics.legs_completed,
        metrics.min_separation,
        metrics.min_separation_ratio,
        metrics.collision_count,
        metrics.solves,
        metrics.solve_time_median * 1e3,
        metrics.solve_time_p95 * 1e3,
        metrics.solver_success_rate * 100.0,
    );

    let initial_failed = log
        .events
        .iter()
        .any(|e| e.kind == EventKind::DegradedMode && e.t == 0.0);
    if metrics.collision_count > 0 {
        return Err(Failure::Run(format!(
            "{} tick(s) inside a safety sphere",
            metrics.collision_count
        )));
    }
    if initial_failed {
        return Err(Failure::Run("initial solve did not converge".into()));
    }
    Ok(())
}

fn plan_json(sol: &PlanSolution, taus: &[f64], grid: &chebplan::chebyshev::CollocationGrid) -> serde_json::Value {
    let dense: Vec<_> = sol
        .dense_states(grid, DENSE_SAMPLES)
        .into_iter()
        .map(|(t, p)| json!({ "t": t + sol.epoch, "position": p.to_array() }))
        .collect();
    json!({
        "status": sol.status,
        "delta_t": sol.delta_t,
        "epoch": sol.epoch,
        "iterations": sol.iterations,
        "outer_iterations": sol.outer_iterations,
        "solve_time": sol.solve_time,
        "kkt": sol.kkt,
        "tau": taus,
        "node_states": sol.node_states.iter().map(|v| v.to_array()).collect::<Vec<_>>(),
        "node_controls": sol.node_controls.iter().map(|v| v.to_array()).collect::<Vec<_>>(),
        "dense": dense,
    })
}

fn cmd_plan(path: &Path, out: &Path) -> Result<(), Failure> {
    let scn = ScenarioConfig::load(path)?;
    let grid = make_grid(scn.grid_order).map_err(|e| Failure::Run(e.to_string()))?;
    let mut obstacles = Vec::with_capacity(scn.obstacles.len());
    for o in &scn.obstacles {
        obstacles.push(ObstacleSnapshot {
            position: o.position(0.0).map_err(|e| Failure::Run(e.to_string()))?,
            radius: o.safety_radius,
        });
    }
    let phases = plan_route(
        &scn.problem_setup(),
        &grid,
        scn.start,
        &scn.waypoints,
        scn.goal,
        &obstacles,
        &scn.solver,
    )
    .map_err(|e: NlpError| Failure::Run(e.to_string()))?;

    let converged = phases.iter().all(PlanSolution::converged);
    let total: f64 = phases.iter().map(|p| p.delta_t).sum();
    let doc = json!({
        "scenario": scn.name,
        "converged": converged,
        "delta_t": total,
        "phases": phases.iter().map(|p| plan_json(p, grid.nodes(), &grid)).collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&doc).expect("plan serializes");
    fs::write(out, text + "\n").map_err(io_err(out))?;
    println!("delta_t {total:.6} s over {} phase(s)", phases.len());
    if !converged {
        for (k, p) in phases.iter().enumerate().filter(|(_, p)| !p.converged()) {
            eprintln!(
                "phase {k}: {:?} after {} iterations; eq {:.2e} ineq {:.2e} stationarity {:.2e}",
                p.status, p.iterations, p.kkt.eq_violation, p.kkt.ineq_violation, p.kkt.stationarity
            );
        }
        return Err(Failure::Run("solve did not converge".into()));
    }
    Ok(())
}
