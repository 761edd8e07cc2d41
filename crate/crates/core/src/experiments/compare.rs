use rayon::prelude::*;
use serde_json::json;

use super::{logistic_problem, out_dir, ExperimentConfig, Report};
use crate::adjoint::NonlinearProblem;
use crate::error::{Error, Result};
use crate::io::Table;
use crate::optimizer::evaluation_seed;
use crate::plot::{self, Series};
use crate::schedule::{gaussian_schedule, SensorSchedule};

/// Seed-averaged final KL of one schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleScore {
    pub mean_kl: f64,
    pub std_err: f64,
    /// 1 for the largest mean KL.
    pub rank: usize,
}

/// Final `KL(q_T || q_0)` of every schedule averaged over replicates
/// `0..n_replicates`. All schedules see the same signals and noise draws.
pub fn compare_schedules(
    problem: &NonlinearProblem,
    schedules: &[SensorSchedule],
    n_replicates: usize,
    master_seed: u64,
) -> Result<Vec<ScheduleScore>> {
    if schedules.len() < 2 {
        return Err(Error::InvalidInput("need at least two schedules to compare".into()));
    }
    if n_replicates == 0 {
        return Err(Error::InvalidParameter("need at least one replicate".into()));
    }
    let mut scores = Vec::with_capacity(schedules.len());
    for xi in schedules {
        let kls: Vec<f64> = (0..n_replicates as u64)
            .into_par_iter()
            .map(|r| problem.reward_replicate(xi, master_seed, r))
            .collect::<Result<_>>()?;
        let n = kls.len() as f64;
        let mean = kls.iter().sum::<f64>() / n;
        let var = if kls.len() > 1 {
            kls.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        scores.push(ScheduleScore {
            mean_kl: mean,
            std_err: (var / n).sqrt(),
            rank: 0,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].mean_kl.total_cmp(&scores[a].mean_kl));
    for (r, &i) in order.iter().enumerate() {
        scores[i].rank = r + 1;
    }
    Ok(scores)
}

/// Rank Gaussian-shaped schedules `N(center, width)` on the logistic model.
///
/// Writes `schedules.csv` (`t, s0, s1, ...`), `compare.csv`
/// (`index, center, width, mean_kl, std_err, rank`) and `compare.svg`.
pub fn run_compare(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let out = out_dir(cfg)?;
    let mut report = Report::new("compare", cfg);
    let c = &cfg.compare;
    let problem = logistic_problem(&cfg.logistic)?;
    let grid = *problem.grid();
    let schedules = c
        .centers
        .iter()
        .map(|&m| gaussian_schedule(m, c.width, grid))
        .collect::<Result<Vec<_>>>()?;

    let mut headers = vec!["t".to_string()];
    headers.extend((0..schedules.len()).map(|i| format!("s{i}")));
    let mut st = Table::new(headers);
    for (k, t) in grid.cell_centers().into_iter().enumerate() {
        let mut row = vec![t];
        row.extend(schedules.iter().map(|s| s.density()[k]));
        st.push(row);
    }
    st.write(out.join("schedules.csv"))?;
    report.outputs.push("schedules.csv".into());

    let scores = compare_schedules(&problem, &schedules, c.replicates, evaluation_seed(cfg.seed))?;
    let mut table = Table::new(["index", "center", "width", "mean_kl", "std_err", "rank"]);
    for (i, s) in scores.iter().enumerate() {
        table.push(vec![i as f64, c.centers[i], c.width, s.mean_kl, s.std_err, s.rank as f64]);
    }
    table.write(out.join("compare.csv"))?;
    report.outputs.push("compare.csv".into());

    let labels: Vec<String> = c.centers.iter().map(|m| format!("N({m}, {})", c.width)).collect();
    let means: Vec<f64> = scores.iter().map(|s| s.mean_kl).collect();
    let errs: Vec<f64> = scores.iter().map(|s| s.std_err).collect();
    plot::save(
        out.join("compare.svg"),
        &plot::bar_chart("Mean final KL to prior", "KL", &labels, &means, Some(&errs)),
    );
    let shapes: Vec<Series> = schedules
        .iter()
        .enumerate()
        .map(|(i, s)| Series::new(labels[i].clone(), grid.cell_centers(), s.density().to_vec(), plot::palette(i)))
        .collect();
    plot::save(out.join("schedules.svg"), &plot::line_chart("Schedules", "t", "density", &shapes));
    report.outputs.extend(["compare.svg".into(), "schedules.svg".into()]);

    report.metric(
        "scores",
        scores
            .iter()
            .zip(&c.centers)
            .map(|(s, m)| json!({"center": m, "mean_kl": s.mean_kl, "std_err": s.std_err, "rank": s.rank}))
            .collect::<Vec<_>>(),
    );
    report.save(&out)?;
    Ok(report)
}
