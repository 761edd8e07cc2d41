use std::sync::Arc;

use nalgebra::DMatrix;

use super::{linear2d_problem, logistic_problem, out_dir, ExperimentConfig, Report};
use crate::adjoint::NonlinearProblem;
use crate::error::Result;
use crate::io::Table;
use crate::kalman_bucy::{LinearGaussianModel, MatrixUtility};
use crate::optimizer::{compare_with_finite_differences, finite_difference_cells, gradient, GradientComparison, LgProblem, OedProblem};
use crate::schedule::{gaussian_schedule, uniform_schedule};
use crate::sde_sim::ObservationModel;

const ZERO_TOL: f64 = 1e-10;

/// Adjoint gradients against central finite differences for the switching
/// linear model and the logistic model, plus a zero-information model for
/// each. Writes `gradcheck.csv`
/// (`model, cell, adjoint, finite_difference, relative_error`; model 0 is
/// linear, 1 is logistic). All checks are fatal.
pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let mut report = Report::new("gradcheck", cfg);
    let g = &cfg.gradcheck;
    let mut table = Table::new(["model", "cell", "adjoint", "finite_difference", "relative_error"]);

    let mut lin = cfg.linear2d.clone();
    lin.n_t = g.lg_n_t;
    let lg = OedProblem::LinearGaussian(linear2d_problem(&lin)?);
    let xi = gaussian_schedule(g.lg_schedule_mean, g.lg_schedule_std, *lg.grid())?;
    let cmp = compare_with_finite_differences(&lg, &xi, g.lg_h, cfg.seed, g.threshold)?;
    push_rows(&mut table, 0.0, &cmp);
    let e = cmp.max_relative_error();
    report.metric("linear_cells_compared", cmp.cells.len());
    report.metric("linear_max_relative_error", e);
    report.check("linear adjoint vs finite differences", e, g.lg_tolerance, e <= g.lg_tolerance, true);

    let mut lc = cfg.logistic.clone();
    lc.gamma = g.nl_gamma;
    lc.n_t = g.nl_n_t;
    lc.n_x = g.nl_n_x;
    let nl = OedProblem::Nonlinear {
        problem: logistic_problem(&lc)?,
        n_replicates: g.nl_replicates,
        eval_replicates: g.nl_replicates,
    };
    let xi = uniform_schedule(*nl.grid());
    let cmp = compare_with_finite_differences(&nl, &xi, g.nl_h, cfg.seed, g.threshold)?;
    push_rows(&mut table, 1.0, &cmp);
    let e = cmp.max_relative_error();
    report.metric("logistic_cells_compared", cmp.cells.len());
    report.metric("logistic_max_relative_error", e);
    report.check("logistic adjoint vs finite differences", e, g.nl_tolerance, e <= g.nl_tolerance, true);

    table.write(out.join("gradcheck.csv"))?;
    report.outputs.push("gradcheck.csv".into());

    let (lg0, nl0) = zero_information_problems(cfg)?;
    for (name, p, h) in [("linear", lg0, g.lg_h), ("logistic", nl0, g.nl_h)] {
        let xi = uniform_schedule(*p.grid());
        let eta = gradient(&p, &xi, cfg.seed)?;
        let n = p.grid().n_cells();
        let fd = finite_difference_cells(&p, &xi, h, cfg.seed, &[0, n / 2, n - 1])?;
        let worst = fd.iter().fold(eta.max_abs(), |m, v| m.max(v.abs()));
        report.metric(&format!("{name}_zero_information_max"), worst);
        report.check(&format!("{name} zero-information gradient vanishes"), worst, ZERO_TOL, worst <= ZERO_TOL, true);
    }
    report.save(&out)?;
    Ok(report)
}

fn push_rows(table: &mut Table, model: f64, cmp: &GradientComparison) {
    for i in 0..cmp.cells.len() {
        table.push(vec![
            model,
            cmp.cells[i] as f64,
            cmp.adjoint[i],
            cmp.finite_difference[i],
            cmp.relative_error[i],
        ]);
    }
}

/// The configured models with observations that carry no information about
/// the state: `H = 0` for the linear model, a constant `g` for the logistic.
fn zero_information_problems(cfg: &ExperimentConfig) -> Result<(OedProblem, OedProblem)> {
    let l = &cfg.linear2d;
    let (sigma, gamma, c0) = (l.sigma, l.gamma, l.c0);
    let model = LinearGaussianModel::new(
        Arc::new(|_t| DMatrix::zeros(2, 2)),
        Arc::new(move |_t| DMatrix::identity(2, 2) * (sigma * sigma)),
        Arc::new(|_t| DMatrix::zeros(1, 2)),
        Arc::new(move |_t| DMatrix::from_element(1, 1, gamma * gamma)),
        nalgebra::DVector::zeros(2),
        DMatrix::identity(2, 2) * c0,
    )?;
    let lg = LgProblem::new(model, MatrixUtility::TraceIntegrated, crate::TimeGrid::new(l.t_end, 60)?)?;

    let mut lc = cfg.logistic.clone();
    lc.n_t = 30;
    lc.n_x = 101;
    let base = logistic_problem(&lc)?;
    let z0 = lc.z0;
    let flat = NonlinearProblem::new(
        base.signal.clone(),
        ObservationModel::scalar(move |_x, _t| z0, lc.gamma),
        *base.space(),
        *base.grid(),
        base.prior.clone(),
        base.utility.clone(),
    )?;
    Ok((
        OedProblem::LinearGaussian(lg),
        OedProblem::Nonlinear {
            problem: flat,
            n_replicates: 4,
            eval_replicates: 4,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::read_table;

    #[test]
    fn small_gradcheck_passes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = dir.path().to_string_lossy().into_owned();
        cfg.gradcheck.lg_n_t = 960;
        cfg.gradcheck.lg_h = 1e-6;
        cfg.gradcheck.nl_n_x = 12001;
        cfg.gradcheck.nl_n_t = 12;
        cfg.gradcheck.nl_replicates = 8;
        let r = run_gradcheck(&cfg).unwrap();
        for c in &r.checks {
            assert!(c.passed, "{c:?}");
        }
        assert!(!r.failed());
        let t = read_table(dir.path().join("gradcheck.csv")).unwrap();
        assert!(t.rows.iter().any(|row| row[0] == 0.0));
        assert!(t.rows.iter().any(|row| row[0] == 1.0));
    }

    #[test]
    fn tight_tolerance_fails_fatally() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = dir.path().to_string_lossy().into_owned();
        cfg.gradcheck.lg_n_t = 60;
        cfg.gradcheck.lg_tolerance = 1e-14;
        cfg.gradcheck.nl_n_x = 401;
        cfg.gradcheck.nl_n_t = 6;
        cfg.gradcheck.nl_replicates = 2;
        cfg.gradcheck.nl_tolerance = 1e3;
        let r = run_gradcheck(&cfg).unwrap();
        assert!(r.failed());
        assert!(dir.path().join("report.json").exists());
    }
}
