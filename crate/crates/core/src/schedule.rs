//! Sensor schedules: piecewise-constant probability densities on a uniform
//! time grid, and the Euclidean projection that keeps gradient iterates on the
//! probability simplex.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_table, Table};

const MASS_TOL: f64 = 1e-9;

/// Uniform grid `t_k = k T / n` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {t_end}"
            )));
        }
        if n_steps < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 time steps, got {n_steps}"
            )));
        }
        Ok(Self { t_end, n_steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of cells, equal to `n_steps`.
    pub fn n_cells(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        self.t_end * k as f64 / self.n_steps as f64
    }

    pub fn cell_center(&self, k: usize) -> f64 {
        self.t_end * (2 * k + 1) as f64 / (2 * self.n_steps) as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.node(k)).collect()
    }

    pub fn cell_centers(&self) -> Vec<f64> {
        (0..self.n_steps).map(|k| self.cell_center(k)).collect()
    }

    pub(crate) fn check_same(&self, other: &TimeGrid, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "{what}: T={} n={} vs T={} n={}",
                self.t_end, self.n_steps, other.t_end, other.n_steps
            )));
        }
        Ok(())
    }
}

/// A probability density over `[0, T]`, constant on each grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSchedule {
    grid: TimeGrid,
    density: Vec<f64>,
}

impl SensorSchedule {
    /// Build a schedule from cell densities. The densities must be
    /// nonnegative and integrate to one up to `1e-9`; the result is rescaled
    /// to unit mass exactly.
    pub fn new(grid: TimeGrid, density: Vec<f64>) -> Result<Self> {
        if density.len() != grid.n_cells() {
            return Err(Error::GridMismatch(format!(
                "{} densities for {} cells",
                density.len(),
                grid.n_cells()
            )));
        }
        if let Some(bad) = density.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "schedule density must be finite and nonnegative, found {bad}"
            )));
        }
        let mass: f64 = density.iter().sum::<f64>() * grid.dt();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidInput(format!(
                "schedule mass is {mass}, expected 1"
            )));
        }
        let density = density.into_iter().map(|d| d / mass).collect();
        Ok(Self { grid, density })
    }

    /// Build a schedule from cell masses (`density * dt`).
    pub fn from_masses(grid: TimeGrid, masses: &[f64]) -> Result<Self> {
        let dt = grid.dt();
        Self::new(grid, masses.iter().map(|m| m / dt).collect())
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn masses(&self) -> Vec<f64> {
        let dt = self.grid.dt();
        self.density.iter().map(|d| d * dt).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.grid.dt()
    }

    /// Expected observation time under the schedule.
    pub fn mean_time(&self) -> f64 {
        let dt = self.grid.dt();
        self.density
            .iter()
            .enumerate()
            .map(|(k, d)| self.grid.cell_center(k) * d * dt)
            .sum()
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["t_cell_center", "density"]);
        for (k, d) in self.density.iter().enumerate() {
            t.push(vec![self.grid.cell_center(k), *d]);
        }
        t
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_table().write(path)
    }

    /// Read a schedule written by [`SensorSchedule::write_csv`]. The grid is
    /// recovered from the cell centers.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let t = read_table(path)?;
        let centers = t
            .column("t_cell_center")
            .ok_or_else(|| Error::InvalidInput("missing t_cell_center column".into()))?;
        let density = t
            .column("density")
            .ok_or_else(|| Error::InvalidInput("missing density column".into()))?;
        let n = centers.len();
        let dt = 2.0 * centers.first().copied().unwrap_or(0.0);
        let grid = TimeGrid::new(dt * n as f64, n)?;
        // The file stores exact densities; keep them bit-for-bit.
        Self::new(grid, density.clone()).map(|s| Self {
            grid: s.grid,
            density,
        })
    }
}

/// Density of the Fréchet derivative of an objective with respect to the
/// schedule, one value per time cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl GradientField {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::GridMismatch(format!(
                "{} gradient values for {} cells",
                values.len(),
                grid.n_cells()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Blowup {
                time: grid.cell_center(k),
                what: "non-finite gradient entry".into(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: TimeGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.n_cells()],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// `L2(0, T)` norm.
    pub fn norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.dt()).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Component tangent to the simplex: the gradient minus its cell mean.
    /// Finite differences taken through the simplex projection at an
    /// interior schedule measure exactly this quantity.
    pub fn centered(&self) -> GradientField {
        let mean = self.values.iter().sum::<f64>() / self.values.len() as f64;
        GradientField {
            grid: self.grid,
            values: self.values.iter().map(|v| v - mean).collect(),
        }
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["t", "eta"]);
        for (k, v) in self.values.iter().enumerate() {
            t.push(vec![self.grid.cell_center(k), *v]);
        }
        t
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_table().write(path)
    }
}

/// The uniform density `1 / T`.
pub fn uniform_schedule(grid: TimeGrid) -> SensorSchedule {
    SensorSchedule {
        grid,
        density: vec![1.0 / grid.t_end(); grid.n_cells()],
    }
}

/// Gaussian density sampled at cell centers and renormalized on `[0, T]`.
pub fn gaussian_schedule(mean: f64, std: f64, grid: TimeGrid) -> Result<SensorSchedule> {
    if !(std.is_finite() && std > 0.0) || !mean.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "gaussian schedule needs finite mean and std > 0, got ({mean}, {std})"
        )));
    }
    let raw: Vec<f64> = grid
        .cell_centers()
        .into_iter()
        .map(|t| (-0.5 * ((t - mean) / std).powi(2)).exp())
        .collect();
    let mass = raw.iter().sum::<f64>() * grid.dt();
    if !(mass > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gaussian N({mean}, {std}) has no mass on [0, {}]",
            grid.t_end()
        )));
    }
    Ok(SensorSchedule {
        grid,
        density: raw.into_iter().map(|v| v / mass).collect(),
    })
}

/// Euclidean projection of a vector onto `{w >= 0, sum w = 1}`
/// (sort-and-threshold).
pub fn project_masses(y: &[f64]) -> Vec<f64> {
    let mut u = y.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    y.iter().map(|&v| (v - theta).max(0.0)).collect()
}

/// Project raw cell densities onto the set of valid schedules. The cell
/// masses `raw * dt` are mapped to their Euclidean-nearest point on the
/// probability simplex.
pub fn project_to_simplex(raw: &[f64], grid: TimeGrid) -> Result<SensorSchedule> {
    if raw.len() != grid.n_cells() {
        return Err(Error::GridMismatch(format!(
            "{} values for {} cells",
            raw.len(),
            grid.n_cells()
        )));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("cannot project non-finite values".into()));
    }
    let dt = grid.dt();
    let masses: Vec<f64> = raw.iter().map(|v| v * dt).collect();
    Ok(project_mass_vector(&masses, grid))
}

pub(crate) fn project_mass_vector(masses: &[f64], grid: TimeGrid) -> SensorSchedule {
    let dt = grid.dt();
    let projected = project_masses(masses);
    SensorSchedule {
        grid,
        density: projected.into_iter().map(|m| m / dt).collect(),
    }
}

/// Fraction of the sensor budget spent in `[a, b]`.
pub fn schedule_mass(s: &SensorSchedule, a: f64, b: f64) -> Result<f64> {
    let t_end = s.grid.t_end();
    if !(a <= b) || a < 0.0 || b > t_end {
        return Err(Error::InvalidRange { a, b });
    }
    let mut total = 0.0;
    for (k, d) in s.density.iter().enumerate() {
        let lo = s.grid.node(k);
        let hi = s.grid.node(k + 1);
        let overlap = (hi.min(b) - lo.max(a)).max(0.0);
        total += d * overlap;
    }
    Ok(total.clamp(0.0, 1.0))
}
