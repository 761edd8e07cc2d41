//! Reproducible experiment drivers. Each runner reads an
//! [`ExperimentConfig`], writes CSV and SVG files into `config.out_dir`, and
//! returns a [`Report`] that is also saved as `report.json`.

mod compare;
pub mod config;
mod gradcheck;
mod linear2d;
mod logistic;

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::adjoint::{NonlinearProblem, NonlinearUtility};
use crate::error::{Error, Result};
use crate::optimizer::OptimizationTrace;
use crate::plot::{self, Series};
use crate::schedule::TimeGrid;
use crate::sde_sim::{ObservationModel, SignalModel};
use crate::zakai::{SpaceGrid, TruncatedGaussian};

pub use compare::{compare_schedules, run_compare, ScheduleScore};
pub use config::{ExperimentConfig, LogisticConfig, CONFIG_VERSION};
pub use gradcheck::run_gradcheck;
pub use linear2d::{linear2d_problem, run_linear2d_experiment};
pub use logistic::run_logistic_experiment;
pub use config::{CompareConfig, GradcheckConfig, Linear2dConfig, BudgetConfig};

/// Maximizer of `a1 / gamma1^2 + a2 / gamma2^2` over the 2-simplex: the whole
/// budget goes to the less noisy sensor, ties are split evenly.
pub fn run_budget_allocation(gamma1: f64, gamma2: f64) -> Result<(f64, f64)> {
    for g in [gamma1, gamma2] {
        if !(g.is_finite() && g > 0.0) {
            return Err(Error::InvalidParameter(format!("noise levels must be positive, got {g}")));
        }
    }
    Ok(if gamma1 < gamma2 {
        (1.0, 0.0)
    } else if gamma2 < gamma1 {
        (0.0, 1.0)
    } else {
        (0.5, 0.5)
    })
}

/// Single-observation design time for the logistic model: the curve through
/// `x0` reaches its midpoint `z = 1/2` at `ln(1/z0 - 1) / x0`.
pub fn optimal_tau_dopt(x0: f64, z0: f64) -> Result<f64> {
    if x0 == 0.0 || !x0.is_finite() {
        return Err(Error::InvalidParameter(format!("x0 must be finite and nonzero, got {x0}")));
    }
    if !(z0 > 0.0 && z0 < 1.0) {
        return Err(Error::InvalidParameter(format!("z0 must lie in (0, 1), got {z0}")));
    }
    Ok((1.0 / z0 - 1.0).ln() / x0)
}

/// Budget split for the configured noise levels; writes `report.json`.
pub fn run_budget(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let mut report = Report::new("budget", cfg);
    let (a1, a2) = run_budget_allocation(cfg.budget.gamma1, cfg.budget.gamma2)?;
    report.metric("alpha1", a1);
    report.metric("alpha2", a2);
    report.save(&out)?;
    Ok(report)
}

/// Single-observation design time for the configured logistic model;
/// writes `report.json`.
pub fn run_tau(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let mut report = Report::new("tau", cfg);
    report.metric("tau", optimal_tau_dopt(cfg.logistic.x0, cfg.logistic.z0)?);
    report.save(&out)?;
    Ok(report)
}

/// Logistic growth curve started at `z0`: `1 / (1 + (1/z0 - 1) e^{-xt})`.
pub fn logistic_curve(z0: f64) -> impl Fn(f64, f64) -> f64 + Send + Sync + Clone + 'static {
    let a = 1.0 / z0 - 1.0;
    move |x, t| 1.0 / (1.0 + a * (-x * t).exp())
}

/// Static logistic model with a truncated Gaussian prior on the growth rate
/// and the final KL utility.
pub fn logistic_problem(cfg: &LogisticConfig) -> Result<NonlinearProblem> {
    let grid = TimeGrid::new(cfg.t_end, cfg.n_t)?;
    let space = SpaceGrid::new(cfg.x_min, cfg.x_max, cfg.n_x)?;
    let prior = TruncatedGaussian::on_grid(cfg.prior_mean, cfg.prior_std, &space)?;
    let obs = ObservationModel::scalar(logistic_curve(cfg.z0), cfg.gamma);
    NonlinearProblem::new(
        SignalModel::constant(1, prior.sampler()),
        obs,
        space,
        grid,
        prior.density(&space)?,
        NonlinearUtility::KlFinal,
    )
}

/// A named pass/fail check recorded in a report. `fatal` checks make the
/// command-line tool exit with an error status.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
    pub fatal: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub experiment: String,
    pub seed: u64,
    /// The full configuration the run used; rerunning it reproduces the run.
    pub config: ExperimentConfig,
    pub metrics: Map<String, Value>,
    pub checks: Vec<Check>,
    pub outputs: Vec<String>,
    pub aborted: Option<String>,
}

impl Report {
    pub fn new(experiment: &str, config: &ExperimentConfig) -> Self {
        Self {
            experiment: experiment.into(),
            seed: config.seed,
            config: config.clone(),
            metrics: Map::new(),
            checks: Vec::new(),
            outputs: Vec::new(),
            aborted: None,
        }
    }

    pub fn metric(&mut self, name: &str, value: impl Into<Value>) {
        self.metrics.insert(name.into(), value.into());
    }

    pub fn check(&mut self, name: &str, value: f64, bound: f64, passed: bool, fatal: bool) {
        self.checks.push(Check {
            name: name.into(),
            value,
            bound,
            passed,
            fatal,
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// True when the run aborted or a fatal check failed.
    pub fn failed(&self) -> bool {
        self.aborted.is_some() || self.checks.iter().any(|c| c.fatal && !c.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }

    fn save(&mut self, out: &Path) -> Result<()> {
        self.outputs.push("report.json".into());
        std::fs::write(out.join("report.json"), self.to_json())?;
        Ok(())
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out)?;
    Ok(out)
}

/// Schedule evolution: one curve per iterate, blue (first) to red (last).
fn schedule_evolution_svg(trace: &OptimizationTrace, title: &str) -> String {
    let n = trace.records.len();
    let series: Vec<Series> = trace
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            Series::new(
                format!("iter {}", r.iter),
                r.schedule.grid().cell_centers(),
                r.schedule.density().to_vec(),
                plot::ramp(f),
            )
        })
        .collect();
    plot::line_chart(title, "t", "schedule density", &series)
}
