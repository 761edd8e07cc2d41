use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use oed_core::experiments::{self, ExperimentConfig, Report};

/// Optimal sensor scheduling experiments.
#[derive(Debug, Parser)]
#[command(name = "oed", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file; built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Optimizer iterations (logistic, linear2d).
    #[arg(long, global = true)]
    iters: Option<usize>,

    /// Optimizer step size (logistic, linear2d).
    #[arg(long, global = true)]
    step: Option<f64>,

    /// Monte Carlo replicates (logistic gradient, compare, gradcheck).
    #[arg(long, global = true)]
    replicates: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize the schedule of the logistic growth model.
    Logistic,
    /// Optimize the schedule of the switching two-dimensional linear model.
    Linear2d,
    /// Rank Gaussian-shaped schedules on the logistic model.
    Compare,
    /// Split a budget between two sensors with noise levels gamma1, gamma2.
    Budget { gamma1: Option<f64>, gamma2: Option<f64> },
    /// Best single observation time of the logistic model.
    Tau {
        #[arg(long)]
        x0: Option<f64>,
        #[arg(long)]
        z0: Option<f64>,
    },
    /// Check adjoint gradients against finite differences.
    Gradcheck,
    /// Print the default config.
    DefaultConfig,
}

fn build_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.to_string_lossy().into_owned();
    }
    if let Some(n) = cli.iters {
        cfg.logistic.iterations = n;
        cfg.linear2d.iterations = n;
    }
    if let Some(h) = cli.step {
        cfg.logistic.step = h;
        cfg.linear2d.step = h;
    }
    if let Some(n) = cli.replicates {
        cfg.logistic.replicates = n;
        cfg.compare.replicates = n;
        cfg.gradcheck.nl_replicates = n;
    }
    match &cli.command {
        Command::Budget { gamma1, gamma2 } => {
            cfg.budget.gamma1 = gamma1.unwrap_or(cfg.budget.gamma1);
            cfg.budget.gamma2 = gamma2.unwrap_or(cfg.budget.gamma2);
        }
        Command::Tau { x0, z0 } => {
            cfg.logistic.x0 = x0.unwrap_or(cfg.logistic.x0);
            cfg.logistic.z0 = z0.unwrap_or(cfg.logistic.z0);
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(r: &Report) {
    println!("{} (seed {}) -> {}", r.experiment, r.seed, r.config.out_dir);
    for (k, v) in &r.metrics {
        println!("  {k:<32} {v}");
    }
    for c in &r.checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("  [{tag}] {} (value {:.6e}, bound {:.6e})", c.name, c.value, c.bound);
    }
    if let Some(why) = &r.aborted {
        println!("  aborted: {why}");
    }
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    if let Command::DefaultConfig = cli.command {
        println!("{}", ExperimentConfig::default().to_json());
        return Ok(true);
    }
    let cfg = build_config(cli).context("invalid configuration")?;
    let report = match cli.command {
        Command::Logistic => experiments::run_logistic_experiment(&cfg),
        Command::Linear2d => experiments::run_linear2d_experiment(&cfg),
        Command::Compare => experiments::run_compare(&cfg),
        Command::Budget { .. } => experiments::run_budget(&cfg),
        Command::Tau { .. } => experiments::run_tau(&cfg),
        Command::Gradcheck => experiments::run_gradcheck(&cfg),
        Command::DefaultConfig => unreachable!(),
    }
    .context("run failed")?;
    print_report(&report);
    Ok(!report.failed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: run aborted or a required check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
