use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use influence_core::config::{Scenario, ScenarioFile};
use influence_core::sim::{fmt_sig9, run, write_barrier_csv, write_trajectory_csv, Simulator, TrajectoryLog};
use influence_core::studies::{run_trials, scenario_catalog, scenarios, CaseStudy, StudyConfigs};
use influence_core::Error;

#[derive(Parser)]
#[command(name = "influence", version, about = "Robot cars steering modeled human drivers through barrier constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its trajectory and barrier CSVs.
    Run {
        /// Catalog name (see list-scenarios) or path to a scenario JSON file.
        scenario: String,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "INFLUENCE_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Run many trials of a case study and write per-trial rows and a summary.
    CaseStudy {
        /// traffic-flow or aggression
        which: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, env = "INFLUENCE_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Print the assembled constraint system and QP solution at one step.
    Derive {
        scenario: String,
        #[arg(long, default_value_t = 0)]
        step: usize,
    },
    /// List the built-in scenarios.
    ListScenarios,
}

fn load_scenario(name: &str) -> Result<Scenario> {
    if let Ok(file) = scenarios::scenario_file(name) {
        return Ok(file.build()?);
    }
    let path = Path::new(name);
    if !path.exists() {
        return Err(Error::Config(format!("`{name}` is neither a catalog scenario nor a readable file")).into());
    }
    Ok(ScenarioFile::load(path)?.build()?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn write_logs(log: &TrajectoryLog, out: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let traj = out.join("trajectory.csv");
    let barriers = out.join("barriers.csv");
    let mut w = create(&traj)?;
    write_trajectory_csv(log, &mut w)?;
    w.flush()?;
    let mut w = create(&barriers)?;
    write_barrier_csv(log, &mut w)?;
    w.flush()?;
    Ok((traj, barriers))
}

fn cmd_run(name: &str, duration: Option<f64>, dt: Option<f64>, seed: Option<u64>, out: &Path) -> Result<()> {
    let scenario = load_scenario(name)?;
    let mut cfg = scenario.sim;
    if let Some(d) = duration {
        cfg.duration = d;
    }
    if let Some(d) = dt {
        cfg.dt = d;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    match run(scenario.world, &scenario.specs, cfg) {
        Ok(log) => {
            let (traj, barriers) = write_logs(&log, out)?;
            println!("scenario {}: {} steps", scenario.name, log.steps.len());
            for e in log.lane_events() {
                println!("lane change: car {} {} -> {} at t = {} s", e.car, e.from, e.to, fmt_sig9(e.t));
            }
            if let Some(success) = &scenario.success {
                println!("success: {}", success.evaluate(&log));
            }
            println!("wrote {} and {}", traj.display(), barriers.display());
            Ok(())
        }
        Err(fault) => {
            let (traj, _) = write_logs(&fault.log, out)?;
            Err(Error::Fault(format!("{fault} (log up to the fault in {})", traj.display())).into())
        }
    }
}

fn cmd_case_study(which: &str, trials: usize, seed: u64, jobs: Option<usize>, out: &Path) -> Result<()> {
    let study: CaseStudy = which.parse()?;
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let report = run_trials(study, trials, seed, jobs, &StudyConfigs::default())?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let csv = out.join(format!("{}_trials.csv", study.name()));
    let json = out.join(format!("{}_summary.json", study.name()));
    let mut w = create(&csv)?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let text = serde_json::to_string_pretty(&report.summary)?;
    fs::write(&json, format!("{text}\n")).with_context(|| format!("cannot write {}", json.display()))?;
    println!("{text}");
    println!("wrote {} and {}", csv.display(), json.display());
    report.check()?;
    Ok(())
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(fmt_sig9).collect::<Vec<_>>().join(", ")
}

fn cmd_derive(name: &str, step: usize) -> Result<()> {
    let scenario = load_scenario(name)?;
    let mut sim = Simulator::new(scenario.world, scenario.sim)?;
    for _ in 0..step {
        sim.step(&scenario.specs)?;
    }
    let d = sim.derive(&scenario.specs)?;
    let robots: Vec<String> = d.system.robots.iter().map(|r| r.to_string()).collect();
    println!("scenario: {}", scenario.name);
    println!("step: {step}");
    println!("t: {}", fmt_sig9(d.t));
    println!("robots: [{}]", robots.join(", "));
    println!("rows: {}", d.system.rows.len());
    for (i, row) in d.system.rows.iter().enumerate() {
        println!();
        println!("row {i}: {}", row.name);
        println!("  relative degree: {}", row.relative_degree);
        println!("  psi derivatives: [{}]", join(row.derivatives.iter().copied()));
        println!("  alpha: [{}]", join(row.ladder.iter().copied()));
        println!("  A: [{}]", join(row.coeffs.iter().copied()));
        println!("  b: {}", fmt_sig9(row.rhs));
        println!("  slack weight: {}", fmt_sig9(row.slack_weight));
    }
    println!();
    println!("box lo: [{}]", join(d.problem.lo.iter().copied()));
    println!("box hi: [{}]", join(d.problem.hi.iter().copied()));
    println!("qp status: {}", d.solution.status.as_str());
    println!("u: [{}]", join(d.solution.u.iter().copied()));
    println!("slack: [{}]", join(d.solution.slack.iter().copied()));
    Ok(())
}

fn cmd_list() -> Result<()> {
    for s in scenario_catalog() {
        println!("{:<4} {}", s.name, s.description);
    }
    Ok(())
}

/// Simulation faults exit with 2; every other failure is a usage or config error.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Fault(_) | Error::Geometry(_) | Error::Collision { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenario,
            duration,
            dt,
            seed,
            out,
        } => cmd_run(scenario, *duration, *dt, *seed, out),
        Command::CaseStudy {
            which,
            trials,
            seed,
            jobs,
            out,
        } => cmd_case_study(which, *trials, *seed, *jobs, out),
        Command::Derive { scenario, step } => cmd_derive(scenario, *step),
        Command::ListScenarios => cmd_list(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
