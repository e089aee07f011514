//! `hyst`: material verification, load steps, load cycles and solver
//! comparisons on the T-joint benchmark.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hyst_core::fem::P1Model;
use hyst_core::sim::{
    compare_strategies, run_cycle, validate_probes, write_cycle_outputs, CycleResult, LoadProgram, SimError,
};
use hyst_core::solvers::Strategy;
use hyst_core::verify::run_suite;
use serde::Serialize;
use thiserror::Error;

use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hyst", version, about = "Vector hysteresis field simulations on a T-joint")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the randomized property suite on the configured material.
    VerifyMaterial(CommonArgs),
    /// Solve one load step per refinement level.
    RunStep(CommonArgs),
    /// Run the load cycle per refinement level.
    RunCycle(CommonArgs),
    /// Run the configured program with every listed strategy and compare.
    CompareSolvers(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `solver.strategy`.
    #[arg(long)]
    strategy: Option<Strategy>,
}

impl CommonArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(o) = &self.output {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.strategy {
            cfg.solver.strategy = s;
        }
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failure(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::Failure(format!("cannot write {}: {e}", path.display())))
}

fn sim_failure(e: SimError) -> CliError {
    match e {
        SimError::ProbeOutside { .. } | SimError::InvalidProgram(_) => CliError::Config(e.to_string()),
        other => CliError::Failure(other.to_string()),
    }
}

fn verify_material(cfg: &RunConfig) -> Result<(), CliError> {
    let stack = cfg.material_stack()?;
    create_dir(&cfg.output_dir)?;
    let report = run_suite(&stack, &cfg.verify_config());
    write_json(&cfg.output_dir.join("material_report.json"), &report)?;
    for p in &report.properties {
        println!(
            "{:<22} {} violations {:>5}/{:<6} worst margin {:.3e}",
            p.name,
            if p.passed { "PASS" } else { "FAIL" },
            p.violations,
            p.samples,
            p.worst_margin
        );
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Failure("material property check failed".into()))
    }
}

#[derive(Debug, Serialize)]
struct LevelSummary {
    level: usize,
    dofs: usize,
    triangles: usize,
    steps: usize,
    iterations: Vec<usize>,
    average_iterations: f64,
    total_iterations: usize,
    factorizations: usize,
    converged: bool,
    final_merit: f64,
    worst_flux_imbalance: f64,
    dissipation: f64,
    wall_time_s: f64,
}

impl LevelSummary {
    fn new(level: usize, model: &P1Model, r: &CycleResult) -> Self {
        Self {
            level,
            dofs: model.n_free(),
            triangles: model.num_triangles(),
            steps: r.steps.len(),
            iterations: r.steps.iter().map(|s| s.report.iterations).collect(),
            average_iterations: r.average_iterations(),
            total_iterations: r.steps.iter().map(|s| s.report.iterations).sum(),
            factorizations: r.steps.iter().map(|s| s.report.factorizations).sum(),
            converged: r.steps.iter().all(|s| s.report.converged),
            final_merit: r.steps.last().map_or(0.0, |s| s.report.final_merit()),
            worst_flux_imbalance: r.worst_flux_imbalance(),
            dissipation: r.total_dissipation(),
            wall_time_s: r.wall_time_s(),
        }
    }
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    command: &'a str,
    strategy: Strategy,
    seed: u64,
    program: LoadProgram,
    levels: Vec<LevelSummary>,
    error: Option<String>,
}

fn run_program(cfg: &RunConfig, command: &str, single_step: bool) -> Result<(), CliError> {
    match (single_step, cfg.program) {
        (true, LoadProgram::SingleStep { .. }) | (false, LoadProgram::Cycle { .. }) => {}
        _ => {
            return Err(CliError::Config(format!(
                "{command} needs program.kind = \"{}\"",
                if single_step { "single_step" } else { "cycle" }
            )))
        }
    }
    let models = cfg.models()?;
    let probes = cfg.probes();
    for (_, m) in &models {
        validate_probes(m, &probes).map_err(sim_failure)?;
    }
    create_dir(&cfg.output_dir)?;
    let mut summary = RunSummary {
        command,
        strategy: cfg.solver.strategy,
        seed: cfg.seed,
        program: cfg.program,
        levels: Vec::new(),
        error: None,
    };
    let summary_path = cfg.output_dir.join("summary.json");
    for (level, model) in &models {
        let result = run_cycle(model, cfg.solver, &cfg.program, &probes)
            .and_then(|r| write_cycle_outputs(&cfg.output_dir.join(format!("level_{level}")), &r).map(|_| r));
        match result {
            Ok(r) => {
                let s = LevelSummary::new(*level, model, &r);
                println!(
                    "level {level}: {} dofs, {} steps, {:.2} iterations per step, {:.3} s",
                    s.dofs, s.steps, s.average_iterations, s.wall_time_s
                );
                summary.levels.push(s);
                write_json(&summary_path, &summary)?;
            }
            Err(e) => {
                let err = sim_failure(e);
                summary.error = Some(format!("level {level}: {err}"));
                write_json(&summary_path, &summary)?;
                return Err(err);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CompareRow {
    strategy: Strategy,
    level: usize,
    dofs: usize,
    steps: usize,
    average_iterations: f64,
    total_iterations: usize,
    wall_time_s: f64,
    final_merit: f64,
    deviation: f64,
}

fn compare_solvers(cfg: &RunConfig, strategy_override: bool) -> Result<(), CliError> {
    if strategy_override {
        return Err(CliError::Config(
            "compare-solvers takes its strategies from compare.strategies, not --strategy".into(),
        ));
    }
    let strategies = &cfg.compare.strategies;
    if strategies.len() < 2 {
        return Err(CliError::Config(format!(
            "compare-solvers needs at least two strategies, got {}",
            strategies.len()
        )));
    }
    let models = cfg.models()?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("compare.csv");
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    let mut failure = None;
    for (level, model) in &models {
        match compare_strategies(
            model,
            cfg.solver,
            &cfg.program,
            strategies,
            cfg.compare.agreement_term_rel_tol,
        ) {
            Ok(c) => {
                for r in &c.runs {
                    println!(
                        "level {level} {:>3}: {:>8.2} iterations per step, {:>8.3} s, deviation {:.2e}",
                        r.strategy.name(),
                        r.average_iterations,
                        r.wall_time_s,
                        r.deviation
                    );
                    rows.push(CompareRow {
                        strategy: r.strategy,
                        level: *level,
                        dofs: model.n_free(),
                        steps: r.steps,
                        average_iterations: r.average_iterations,
                        total_iterations: r.total_iterations,
                        wall_time_s: r.wall_time_s,
                        final_merit: r.final_merit,
                        deviation: r.deviation,
                    });
                }
                worst = worst.max(c.max_deviation);
            }
            Err(e) => {
                failure = Some(sim_failure(e));
                break;
            }
        }
    }
    write_compare_csv(&path, &rows)?;
    if let Some(e) = failure {
        return Err(e);
    }
    if worst > cfg.compare.agreement_tol {
        return Err(CliError::Failure(format!(
            "final solutions disagree: relative deviation {worst:.3e} exceeds {:.1e}",
            cfg.compare.agreement_tol
        )));
    }
    Ok(())
}

fn write_compare_csv(path: &Path, rows: &[CompareRow]) -> Result<(), CliError> {
    let fail = |e: &dyn std::fmt::Display| CliError::Failure(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(|e| fail(&e))?;
    for r in rows {
        w.serialize(r).map_err(|e| fail(&e))?;
    }
    w.flush().map_err(|e| fail(&e))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::VerifyMaterial(a) => verify_material(&a.load()?),
        Command::RunStep(a) => run_program(&a.load()?, "run-step", true),
        Command::RunCycle(a) => run_program(&a.load()?, "run-cycle", false),
        Command::CompareSolvers(a) => compare_solvers(&a.load()?, a.strategy.is_some()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
