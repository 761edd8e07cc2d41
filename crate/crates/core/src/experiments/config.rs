//! Versioned JSON experiment configuration. Every field except `version` has
//! a default, so `{"version": 1}` is a complete config; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub out_dir: String,
    pub logistic: LogisticConfig,
    pub linear2d: Linear2dConfig,
    pub compare: CompareConfig,
    pub gradcheck: GradcheckConfig,
    pub budget: BudgetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 2024,
            out_dir: "out".into(),
            logistic: LogisticConfig::default(),
            linear2d: Linear2dConfig::default(),
            compare: CompareConfig::default(),
            gradcheck: GradcheckConfig::default(),
            budget: BudgetConfig::default(),
        }
    }
}

/// Static logistic-growth model observed through
/// `g(x, t) = z0 e^{xt} / (1 - z0 + z0 e^{xt})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticConfig {
    /// Reference growth rate for the single-observation optimum.
    pub x0: f64,
    pub z0: f64,
    pub gamma: f64,
    pub prior_mean: f64,
    pub prior_std: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub t_end: f64,
    pub n_t: usize,
    pub iterations: usize,
    pub step: f64,
    /// Replicates per gradient estimate.
    pub replicates: usize,
    /// Replicates per objective evaluation along the trace.
    pub eval_replicates: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            x0: 1.0,
            z0: 1.0 / (1.0 + 3f64.exp()),
            gamma: 0.1,
            prior_mean: 1.0,
            prior_std: 0.25,
            x_min: 0.0,
            x_max: 2.0,
            n_x: 401,
            t_end: 6.0,
            n_t: 60,
            iterations: 15,
            step: 0.02,
            replicates: 1,
            eval_replicates: 20,
        }
    }
}

/// Two-dimensional Brownian signal whose observed coordinate switches at
/// `t_switch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Linear2dConfig {
    pub sigma: f64,
    pub gamma: f64,
    pub c0: f64,
    pub t_switch: f64,
    pub t_end: f64,
    pub n_t: usize,
    pub iterations: usize,
    pub step: f64,
}

impl Default for Linear2dConfig {
    fn default() -> Self {
        Self {
            sigma: 0.3,
            gamma: 0.5,
            c0: 1.0,
            t_switch: 3.0,
            t_end: 6.0,
            n_t: 600,
            iterations: 100,
            step: 0.1,
        }
    }
}

/// Gaussian-shaped schedules ranked on the logistic model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub centers: Vec<f64>,
    pub width: f64,
    pub replicates: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            centers: vec![1.5, 2.5, 3.5, 4.5],
            width: 0.5,
            replicates: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Cells of the linear model grid.
    pub lg_n_t: usize,
    /// Schedule the linear check is run at: `N(mean, std)` on the grid.
    pub lg_schedule_mean: f64,
    pub lg_schedule_std: f64,
    /// Mass perturbation.
    pub lg_h: f64,
    pub lg_tolerance: f64,
    pub nl_gamma: f64,
    pub nl_n_t: usize,
    pub nl_n_x: usize,
    pub nl_h: f64,
    pub nl_replicates: usize,
    pub nl_tolerance: f64,
    /// Cells with `|eta| >= threshold * max |eta|` are compared.
    pub threshold: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            lg_n_t: 6000,
            lg_schedule_mean: 2.5,
            lg_schedule_std: 2.0,
            lg_h: 4e-7,
            lg_tolerance: 1e-3,
            nl_gamma: 2e-4,
            nl_n_t: 30,
            nl_n_x: 30001,
            nl_h: 1e-4,
            nl_replicates: 50,
            nl_tolerance: 0.05,
            threshold: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            gamma1: 1.0,
            gamma2: 2.0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite and positive, got {v}")))
    }
}

fn at_least(name: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be at least {min}, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if value.get("version").is_none() {
            return Err(Error::Config("config must declare a \"version\"".into()));
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let l = &self.logistic;
        if l.x0 == 0.0 || !l.x0.is_finite() {
            return Err(Error::Config("logistic.x0 must be finite and nonzero".into()));
        }
        if !(l.z0 > 0.0 && l.z0 < 1.0) {
            return Err(Error::Config(format!("logistic.z0 must lie in (0, 1), got {}", l.z0)));
        }
        positive("logistic.gamma", l.gamma)?;
        positive("logistic.prior_std", l.prior_std)?;
        positive("logistic.t_end", l.t_end)?;
        positive("logistic.step", l.step)?;
        if !(l.x_min < l.x_max) {
            return Err(Error::Config("logistic.x_min must be below logistic.x_max".into()));
        }
        if !(l.x_min..=l.x_max).contains(&l.prior_mean) {
            return Err(Error::Config("logistic.prior_mean must lie inside [x_min, x_max]".into()));
        }
        at_least("logistic.n_x", l.n_x, 3)?;
        at_least("logistic.n_t", l.n_t, 1)?;
        at_least("logistic.replicates", l.replicates, 1)?;
        at_least("logistic.eval_replicates", l.eval_replicates, 1)?;

        let m = &self.linear2d;
        positive("linear2d.sigma", m.sigma)?;
        positive("linear2d.gamma", m.gamma)?;
        positive("linear2d.c0", m.c0)?;
        positive("linear2d.t_end", m.t_end)?;
        positive("linear2d.step", m.step)?;
        at_least("linear2d.n_t", m.n_t, 1)?;

        let c = &self.compare;
        if c.centers.len() < 2 {
            return Err(Error::Config("compare.centers needs at least two schedules".into()));
        }
        positive("compare.width", c.width)?;
        at_least("compare.replicates", c.replicates, 1)?;

        let g = &self.gradcheck;
        positive("gradcheck.lg_h", g.lg_h)?;
        positive("gradcheck.lg_schedule_std", g.lg_schedule_std)?;
        positive("gradcheck.lg_tolerance", g.lg_tolerance)?;
        positive("gradcheck.nl_gamma", g.nl_gamma)?;
        positive("gradcheck.nl_h", g.nl_h)?;
        positive("gradcheck.nl_tolerance", g.nl_tolerance)?;
        at_least("gradcheck.lg_n_t", g.lg_n_t, 1)?;
        at_least("gradcheck.nl_n_t", g.nl_n_t, 1)?;
        at_least("gradcheck.nl_n_x", g.nl_n_x, 3)?;
        at_least("gradcheck.nl_replicates", g.nl_replicates, 1)?;
        if !(g.threshold > 0.0 && g.threshold <= 1.0) {
            return Err(Error::Config("gradcheck.threshold must lie in (0, 1]".into()));
        }

        positive("budget.gamma1", self.budget.gamma1)?;
        positive("budget.gamma2", self.budget.gamma2)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_is_default() {
        let cfg = ExperimentConfig::from_json(r#"{"version": 1}"#).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let tau = (1.0 / cfg.logistic.z0 - 1.0).ln() / cfg.logistic.x0;
        assert!((tau - 3.0).abs() < 1e-12);
        assert_eq!(cfg.logistic.t_end, 6.0);
        assert_eq!(cfg.linear2d.t_end, 6.0);
        assert_eq!(cfg.logistic.iterations, 15);
        assert_eq!(cfg.linear2d.iterations, 100);
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 99;
        cfg.logistic.gamma = 0.3;
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(ExperimentConfig::from_json(r#"{"version": 1, "sede": 3}"#), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_json(r#"{"version": 1, "logistic": {"gama": 3}}"#).is_err());
    }

    #[test]
    fn version_and_values_checked() {
        assert!(ExperimentConfig::from_json(r#"{"version": 2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version": 1, "logistic": {"z0": 1.0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version": 1, "linear2d": {"gamma": -1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"version": 1, "compare": {"centers": [1]}}"#).is_err());
        assert!(ExperimentConfig::from_json("not json").is_err());
        assert!(ExperimentConfig::from_json("{}").is_err());
    }
}
