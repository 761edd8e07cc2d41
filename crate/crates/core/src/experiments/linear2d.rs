use super::config::Linear2dConfig;
use super::{out_dir, schedule_evolution_svg, ExperimentConfig, Report};
use crate::error::Result;
use crate::io::Table;
use crate::kalman_bucy::{integrate_mean, LinearGaussianModel, MatrixUtility};
use crate::optimizer::{optimize, LgProblem, OedProblem};
use crate::plot::{self, Series};
use crate::rng::{stream, sub_seed};
use crate::schedule::{schedule_mass, uniform_schedule, SensorSchedule, TimeGrid};
use crate::sde_sim::{simulate_observations, simulate_signal};

/// Fraction of the schedule mass expected just after the start and just
/// after the switch.
const EARLY_MASS_TARGET: f64 = 0.6;

/// Switching two-dimensional model with the integrated trace utility.
pub fn linear2d_problem(cfg: &Linear2dConfig) -> Result<LgProblem> {
    let model = LinearGaussianModel::switching_2d(cfg.sigma, cfg.gamma, cfg.c0, cfg.t_switch)?;
    LgProblem::new(model, MatrixUtility::TraceIntegrated, TimeGrid::new(cfg.t_end, cfg.n_t)?)
}

fn early_mass(xi: &SensorSchedule, cfg: &Linear2dConfig) -> Result<f64> {
    let t = xi.grid().t_end();
    let s = cfg.t_switch.clamp(0.0, t);
    Ok(schedule_mass(xi, 0.0, s.min(1.0))? + schedule_mass(xi, s, (s + 1.0).min(t))?)
}

/// Deterministic descent on the integrated covariance trace from uniform.
///
/// Files: `utility.csv` (`iter, utility, grad_norm, wall_time`),
/// `schedules.csv`, `schedule_evolution.svg`, `covariance_uniform.csv` and
/// `covariance_optimized.csv` (`t, c00, c01, c10, c11, trace`),
/// `trace_curves.svg`, and `filtered_path.csv`
/// (`t, x1, x2, m1, m2, sd1, sd2`) with `filtered_path.svg`.
pub fn run_linear2d_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let mut report = Report::new("linear2d", cfg);
    let lc = &cfg.linear2d;
    let lg = linear2d_problem(lc)?;
    let grid = *lg.grid();
    let oed = OedProblem::LinearGaussian(lg.clone());
    let xi0 = uniform_schedule(grid);
    let trace = optimize(&oed, &xi0, lc.iterations, lc.step, cfg.seed)?;

    let mut ut = Table::new(["iter", "utility", "grad_norm", "wall_time"]);
    for r in &trace.records {
        ut.push(vec![r.iter as f64, r.objective, r.grad_norm, r.wall_time]);
    }
    ut.write(out.join("utility.csv"))?;
    trace.write_schedule_csv(out.join("schedules.csv"))?;
    plot::save(
        out.join("schedule_evolution.svg"),
        &schedule_evolution_svg(&trace, "Schedule iterates (blue: first, red: last)"),
    );
    plot::save(
        out.join("utility.svg"),
        &plot::line_chart(
            "Integrated covariance trace",
            "iteration",
            "utility",
            &[Series::new(
                "utility",
                ut.column("iter").unwrap_or_default(),
                ut.column("utility").unwrap_or_default(),
                plot::palette(0),
            )],
        ),
    );
    report.outputs.extend(["utility.csv", "schedules.csv", "schedule_evolution.svg", "utility.svg"].map(String::from));
    report.metric("iterations_completed", trace.records.len() - 1);
    if let Some(why) = &trace.aborted {
        report.aborted = Some(why.clone());
        report.save(&out)?;
        return Ok(report);
    }

    let objs = trace.objectives();
    let (u0, uf) = (objs[0], *objs.last().expect("trace is never empty"));
    let max_increase = objs.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let fin = trace.last().schedule.clone();
    let mass = early_mass(&fin, lc)?;
    report.metric("utility_uniform", u0);
    report.metric("utility_optimized", uf);
    report.metric("max_increase", if objs.len() > 1 { max_increase } else { 0.0 });
    report.metric("early_mass", mass);
    if lc.iterations > 0 {
        report.check("utility below uniform", uf - u0, 0.0, uf < u0, false);
        report.check("utility non-increasing", max_increase, 0.0, max_increase <= 0.0, false);
    }
    report.check("mass in [0,1] and [s,s+1]", mass, EARLY_MASS_TARGET, mass >= EARLY_MASS_TARGET, false);

    let cov_u = lg.solver().covariance(xi0.density())?;
    let cov_o = lg.solver().covariance(fin.density())?;
    cov_u.write_csv(out.join("covariance_uniform.csv"))?;
    cov_o.write_csv(out.join("covariance_optimized.csv"))?;
    let t = grid.nodes();
    plot::save(
        out.join("trace_curves.svg"),
        &plot::line_chart(
            "trace C(t)",
            "t",
            "trace",
            &[
                Series::new("uniform", t.clone(), cov_u.traces(), plot::palette(0)),
                Series::new("optimized", t.clone(), cov_o.traces(), plot::palette(3)),
            ],
        ),
    );
    report.outputs.extend(["covariance_uniform.csv", "covariance_optimized.csv", "trace_curves.svg"].map(String::from));

    // One sample path filtered under the optimized schedule.
    let model = &lg.model;
    let signal = simulate_signal(&model.signal_model(), grid, sub_seed(cfg.seed, 0, stream::SIGNAL))?;
    let obs = simulate_observations(
        &signal,
        &model.observation_model(),
        &fin,
        sub_seed(cfg.seed, 0, stream::OBSERVATION),
    )?;
    let m = integrate_mean(model, &fin, &cov_o, &obs)?;
    let mut ft = Table::new(["t", "x1", "x2", "m1", "m2", "sd1", "sd2"]);
    for k in 0..t.len() {
        let c = &cov_o.c[k];
        ft.push(vec![
            t[k],
            signal.states[k][0],
            signal.states[k][1],
            m[k][0],
            m[k][1],
            c[(0, 0)].max(0.0).sqrt(),
            c[(1, 1)].max(0.0).sqrt(),
        ]);
    }
    ft.write(out.join("filtered_path.csv"))?;
    let col = |n: &str| ft.column(n).unwrap_or_default();
    let band = |m: &str, sd: &str, s: f64| col(m).iter().zip(col(sd)).map(|(a, b)| a + s * 2.0 * b).collect::<Vec<_>>();
    plot::save(
        out.join("filtered_path.svg"),
        &plot::line_chart(
            "Filtered path with 2 sd bands",
            "t",
            "state",
            &[
                Series::new("x1", t.clone(), col("x1"), plot::palette(0)).dashed(),
                Series::new("m1", t.clone(), col("m1"), plot::palette(0)).with_band(band("m1", "sd1", -1.0), band("m1", "sd1", 1.0)),
                Series::new("x2", t.clone(), col("x2"), plot::palette(3)).dashed(),
                Series::new("m2", t.clone(), col("m2"), plot::palette(3)).with_band(band("m2", "sd2", -1.0), band("m2", "sd2", 1.0)),
            ],
        ),
    );
    report.outputs.extend(["filtered_path.csv", "filtered_path.svg"].map(String::from));
    report.save(&out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::read_table;

    #[test]
    fn uniform_baseline_is_deterministic() {
        let lg = linear2d_problem(&Linear2dConfig::default()).unwrap();
        let xi = uniform_schedule(*lg.grid());
        assert_eq!(lg.utility_value(xi.density()).unwrap(), lg.utility_value(xi.density()).unwrap());
    }

    #[test]
    fn early_mass_of_uniform() {
        let lg = linear2d_problem(&Linear2dConfig::default()).unwrap();
        let xi = uniform_schedule(*lg.grid());
        assert!((early_mass(&xi, &Linear2dConfig::default()).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn short_run_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.out_dir = dir.path().to_string_lossy().into_owned();
        cfg.linear2d.iterations = 5;
        cfg.linear2d.n_t = 120;
        let r = run_linear2d_experiment(&cfg).unwrap();
        assert!(r.aborted.is_none());
        let u = read_table(dir.path().join("utility.csv")).unwrap().column("utility").unwrap();
        assert_eq!(u.len(), 6);
        assert!(u[5] < u[0]);
        let f = read_table(dir.path().join("filtered_path.csv")).unwrap();
        assert_eq!(f.rows.len(), 121);
        assert!(f.column("sd1").unwrap().iter().all(|v| v.is_finite() && *v >= 0.0));
        let c = read_table(dir.path().join("covariance_optimized.csv")).unwrap();
        assert!(c.headers.contains(&"trace".to_string()));
    }
}
