//! Projected gradient descent over sensor schedules.
//!
//! Both problem kinds are posed as minimization: the linear-Gaussian
//! objective is a covariance utility, the nonlinear one is minus the expected
//! KL divergence between posterior and prior.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::adjoint::{monte_carlo_gradient, NonlinearProblem};
use crate::error::{Error, Result};
use crate::io::Table;
use crate::kalman_bucy::{LinearGaussianModel, MatrixUtility, RiccatiSolver};
use crate::rng::{stream, sub_seed};
use crate::schedule::{project_mass_vector, GradientField, SensorSchedule, TimeGrid};

/// A linear-Gaussian model, a covariance utility and a time grid, with the
/// per-cell coefficients cached.
#[derive(Debug, Clone)]
pub struct LgProblem {
    pub model: LinearGaussianModel,
    pub utility: MatrixUtility,
    solver: RiccatiSolver,
}

impl LgProblem {
    pub fn new(model: LinearGaussianModel, utility: MatrixUtility, grid: TimeGrid) -> Result<Self> {
        let solver = RiccatiSolver::new(&model, &grid)?;
        Ok(Self { model, utility, solver })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.solver.grid()
    }

    pub fn solver(&self) -> &RiccatiSolver {
        &self.solver
    }

    pub fn utility_value(&self, density: &[f64]) -> Result<f64> {
        self.solver.utility(density, &self.utility)
    }

    pub fn gradient(&self, density: &[f64]) -> Result<GradientField> {
        let cov = self.solver.covariance(density)?;
        let adj = self.solver.adjoint(&cov, density, &self.utility)?;
        self.solver.gradient(&adj, &cov, density)
    }
}

#[derive(Debug, Clone)]
pub enum OedProblem {
    /// Deterministic covariance utility of a linear-Gaussian model.
    LinearGaussian(LgProblem),
    /// Monte-Carlo KL utility of a scalar nonlinear model. Gradients use
    /// `n_replicates` paths; the recorded objective uses `eval_replicates`
    /// paths from a fixed evaluation seed.
    Nonlinear {
        problem: NonlinearProblem,
        n_replicates: usize,
        eval_replicates: usize,
    },
}

impl OedProblem {
    pub fn grid(&self) -> &TimeGrid {
        match self {
            OedProblem::LinearGaussian(p) => p.grid(),
            OedProblem::Nonlinear { problem, .. } => problem.grid(),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, OedProblem::LinearGaussian(_))
    }

    fn check(&self, xi: &SensorSchedule) -> Result<()> {
        self.grid().check_same(xi.grid(), "problem vs schedule")?;
        if let OedProblem::Nonlinear {
            n_replicates,
            eval_replicates,
            ..
        } = self
        {
            if *n_replicates == 0 || *eval_replicates == 0 {
                return Err(Error::InvalidParameter("replicate counts must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Gradient of the objective at `xi`. The seed only matters for the
/// nonlinear problem.
pub fn gradient(problem: &OedProblem, xi: &SensorSchedule, seed: u64) -> Result<GradientField> {
    problem.check(xi)?;
    match problem {
        OedProblem::LinearGaussian(p) => p.gradient(xi.density()),
        OedProblem::Nonlinear {
            problem, n_replicates, ..
        } => monte_carlo_gradient(problem, xi, *n_replicates, seed),
    }
}

/// Objective at `xi` with `n` replicates (ignored for the linear-Gaussian
/// problem) drawn from `seed`.
pub fn objective_with(problem: &OedProblem, xi: &SensorSchedule, n: usize, seed: u64) -> Result<f64> {
    match problem {
        OedProblem::LinearGaussian(p) => {
            p.grid().check_same(xi.grid(), "problem vs schedule")?;
            p.utility_value(xi.density())
        }
        OedProblem::Nonlinear { problem, .. } => Ok(-problem.mean_reward(xi, n, seed)?),
    }
}

/// Objective at `xi` with the gradient's replicate count.
pub fn objective(problem: &OedProblem, xi: &SensorSchedule, seed: u64) -> Result<f64> {
    problem.check(xi)?;
    let n = match problem {
        OedProblem::Nonlinear { n_replicates, .. } => *n_replicates,
        _ => 1,
    };
    objective_with(problem, xi, n, seed)
}

/// Seed used for the recorded objective of every iterate.
pub fn evaluation_seed(master_seed: u64) -> u64 {
    sub_seed(master_seed, 0, stream::EVALUATION)
}

/// Objective as recorded in the trace: fixed evaluation seed and
/// `eval_replicates` paths.
pub fn evaluate(problem: &OedProblem, xi: &SensorSchedule, master_seed: u64) -> Result<f64> {
    problem.check(xi)?;
    let n = match problem {
        OedProblem::Nonlinear { eval_replicates, .. } => *eval_replicates,
        _ => 1,
    };
    objective_with(problem, xi, n, evaluation_seed(master_seed))
}

/// One projected gradient step on cell masses.
pub fn descent_step(xi: &SensorSchedule, eta: &GradientField, step_size: f64) -> Result<SensorSchedule> {
    xi.grid().check_same(eta.grid(), "schedule vs gradient")?;
    if eta.values().iter().all(|v| *v == 0.0) {
        return Ok(xi.clone());
    }
    let dt = xi.grid().dt();
    let masses: Vec<f64> = xi
        .masses()
        .iter()
        .zip(eta.values())
        .map(|(m, e)| m - step_size * e * dt)
        .collect();
    Ok(project_mass_vector(&masses, *xi.grid()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub schedule: SensorSchedule,
    pub objective: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationTrace {
    /// Record 0 is the starting schedule.
    pub records: Vec<IterationRecord>,
    /// Set when the run stopped early.
    pub aborted: Option<String>,
}

impl OptimizationTrace {
    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("a trace always holds the starting schedule")
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["iter", "objective", "grad_norm", "wall_time"]);
        for r in &self.records {
            t.push(vec![r.iter as f64, r.objective, r.grad_norm, r.wall_time]);
        }
        t
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_table().write(path)
    }

    /// One row per cell: `t` followed by the density of every iterate.
    pub fn schedule_table(&self) -> Table {
        let grid = self.records[0].schedule.grid();
        let mut headers = vec!["t".to_string()];
        headers.extend(self.records.iter().map(|r| format!("iter{}", r.iter)));
        let mut t = Table::new(headers);
        for (k, tc) in grid.cell_centers().into_iter().enumerate() {
            let mut row = vec![tc];
            row.extend(self.records.iter().map(|r| r.schedule.density()[k]));
            t.push(row);
        }
        t
    }

    pub fn write_schedule_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.schedule_table().write(path)
    }
}

/// `xi_{i+1} = P(mass(xi_i) - step_size * eta_i * dt)` for `n_iters`
/// iterations. The gradient at iterate `i` is drawn from
/// `sub_seed(master_seed, i, GRADIENT)`. A failing or non-finite gradient
/// stops the run and returns the trace so far with `aborted` set.
pub fn optimize(
    problem: &OedProblem,
    xi0: &SensorSchedule,
    n_iters: usize,
    step_size: f64,
    master_seed: u64,
) -> Result<OptimizationTrace> {
    if !(step_size > 0.0) || !step_size.is_finite() {
        return Err(Error::InvalidParameter(format!("step size must be positive, got {step_size}")));
    }
    problem.check(xi0)?;
    let start = Instant::now();
    let mut xi = xi0.clone();
    let mut records = Vec::with_capacity(n_iters + 1);
    let mut aborted = None;
    let mut obj = evaluate(problem, &xi, master_seed)?;
    for i in 0..=n_iters {
        let eta = match gradient(problem, &xi, sub_seed(master_seed, i as u64, stream::GRADIENT)) {
            Ok(e) if e.values().iter().all(|v| v.is_finite()) => e,
            Ok(_) => {
                aborted = Some(format!("non-finite gradient at iteration {i}"));
                records.push(record(i, &xi, obj, f64::NAN, &start));
                break;
            }
            Err(e) => {
                aborted = Some(format!("gradient failed at iteration {i}: {e}"));
                records.push(record(i, &xi, obj, f64::NAN, &start));
                break;
            }
        };
        records.push(record(i, &xi, obj, eta.norm(), &start));
        if i == n_iters {
            break;
        }
        xi = descent_step(&xi, &eta, step_size)?;
        obj = match evaluate(problem, &xi, master_seed) {
            Ok(v) => v,
            Err(e) => {
                aborted = Some(format!("evaluation failed at iteration {}: {e}", i + 1));
                break;
            }
        };
    }
    Ok(OptimizationTrace { records, aborted })
}

fn record(iter: usize, xi: &SensorSchedule, objective: f64, grad_norm: f64, start: &Instant) -> IterationRecord {
    IterationRecord {
        iter,
        schedule: xi.clone(),
        objective,
        grad_norm,
        wall_time: start.elapsed().as_secs_f64(),
    }
}

/// Central difference of the seed-fixed objective for cell `k`: the cell
/// mass is moved by `+-h` and the result re-projected. On the interior of
/// the simplex this estimates `eta_k - mean(eta)`, see
/// [`GradientField::centered`].
pub fn finite_difference_cell(problem: &OedProblem, xi: &SensorSchedule, h: f64, master_seed: u64, k: usize) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("finite-difference step must be positive, got {h}")));
    }
    let grid = *xi.grid();
    if k >= grid.n_cells() {
        return Err(Error::InvalidParameter(format!("cell {k} out of range")));
    }
    let base = xi.masses();
    let eval = |sign: f64| -> Result<f64> {
        let mut m = base.clone();
        m[k] += sign * h;
        objective(problem, &project_mass_vector(&m, grid), master_seed)
    };
    Ok((eval(1.0)? - eval(-1.0)?) / (2.0 * h))
}

/// [`finite_difference_cell`] for a list of cells.
pub fn finite_difference_cells(
    problem: &OedProblem,
    xi: &SensorSchedule,
    h: f64,
    master_seed: u64,
    cells: &[usize],
) -> Result<Vec<f64>> {
    problem.check(xi)?;
    cells
        .par_iter()
        .map(|&k| finite_difference_cell(problem, xi, h, master_seed, k))
        .collect()
}

/// Finite-difference gradient over every cell. With the same seed the
/// stochastic objective uses common random numbers.
pub fn finite_difference_gradient(problem: &OedProblem, xi: &SensorSchedule, h: f64, master_seed: u64) -> Result<GradientField> {
    let cells: Vec<usize> = (0..xi.grid().n_cells()).collect();
    GradientField::new(*xi.grid(), finite_difference_cells(problem, xi, h, master_seed, &cells)?)
}

/// Per-cell comparison of an adjoint gradient (centered) with a
/// finite-difference one on the cells whose centered magnitude is at least
/// `threshold` times the largest.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientComparison {
    pub cells: Vec<usize>,
    pub adjoint: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub relative_error: Vec<f64>,
}

impl GradientComparison {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_error.iter().cloned().fold(0.0, f64::max)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["cell", "adjoint", "finite_difference", "relative_error"]);
        for i in 0..self.cells.len() {
            t.push(vec![
                self.cells[i] as f64,
                self.adjoint[i],
                self.finite_difference[i],
                self.relative_error[i],
            ]);
        }
        t
    }
}

/// Cells whose centered adjoint gradient is at least `threshold` of the max.
pub fn dominant_cells(eta: &GradientField, threshold: f64) -> Vec<usize> {
    let c = eta.centered();
    let max = c.max_abs();
    c.values()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() >= threshold * max && max > 0.0)
        .map(|(k, _)| k)
        .collect()
}

/// Adjoint gradient against finite differences on the dominant cells.
pub fn compare_with_finite_differences(
    problem: &OedProblem,
    xi: &SensorSchedule,
    h: f64,
    master_seed: u64,
    threshold: f64,
) -> Result<GradientComparison> {
    let eta = gradient(problem, xi, master_seed)?;
    let cells = dominant_cells(&eta, threshold);
    let fd = finite_difference_cells(problem, xi, h, master_seed, &cells)?;
    let c = eta.centered();
    let adjoint: Vec<f64> = cells.iter().map(|&k| c.values()[k]).collect();
    let relative_error = adjoint.iter().zip(&fd).map(|(a, f)| (a - f).abs() / a.abs()).collect();
    Ok(GradientComparison {
        cells,
        adjoint,
        finite_difference: fd,
        relative_error,
    })
}
