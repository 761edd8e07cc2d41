//! Grid solver for the scheduled log-Zakai equation in one state dimension.
//!
//! The unnormalized filtering density is carried as `log p` on a uniform
//! grid. Each step adds the observation terms
//! `g^T Gamma^{-1} dZ - 1/2 |g|^2_{Gamma^{-1}} xi dt` and applies one explicit
//! Euler step of the forward operator, evaluated in log space so that it
//! stays finite in the far tails.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{blowup, Error, Result};
use crate::io::Table;
use crate::rng::SimRng;
use crate::schedule::{SensorSchedule, TimeGrid};
use crate::sde_sim::{ObservationModel, ObservationPath, SamplerFn, SignalModel};

/// Uniform grid of `n_points` nodes on `[x_min, x_max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceGrid {
    x_min: f64,
    x_max: f64,
    n_points: usize,
}

impl SpaceGrid {
    pub fn new(x_min: f64, x_max: f64, n_points: usize) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite() && x_min < x_max) {
            return Err(Error::InvalidParameter(format!(
                "space grid needs x_min < x_max, got [{x_min}, {x_max}]"
            )));
        }
        if n_points < 8 {
            return Err(Error::InvalidParameter(format!(
                "space grid needs at least 8 points, got {n_points}"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            n_points,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_points - 1) as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        if j + 1 == self.n_points {
            return self.x_max;
        }
        self.x_min + self.dx() * j as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_points).map(|j| self.node(j)).collect()
    }

    /// Trapezoid quadrature weights.
    pub fn weights(&self) -> Vec<f64> {
        let dx = self.dx();
        let mut w = vec![dx; self.n_points];
        w[0] = 0.5 * dx;
        w[self.n_points - 1] = 0.5 * dx;
        w
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min && x <= self.x_max
    }

    fn check_same(&self, other: &SpaceGrid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "space grids differ: [{}, {}]/{} vs [{}, {}]/{}",
                self.x_min, self.x_max, self.n_points, other.x_min, other.x_max, other.n_points
            )));
        }
        Ok(())
    }
}

/// `log p(x_j)` for an unnormalized density. `-inf` marks zero density.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityField {
    pub space: SpaceGrid,
    pub log_values: Vec<f64>,
}

impl LogDensityField {
    pub fn new(space: SpaceGrid, log_values: Vec<f64>) -> Result<Self> {
        if log_values.len() != space.n_points() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} grid points",
                log_values.len(),
                space.n_points()
            )));
        }
        if log_values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::InvalidInput("log density contains NaN or +inf".into()));
        }
        Ok(Self { space, log_values })
    }

    pub fn from_fn(space: SpaceGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(space, space.nodes().into_iter().map(f).collect())
    }
}

/// A normalized density on a space grid (trapezoid integral one).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub space: SpaceGrid,
    pub values: Vec<f64>,
}

impl DensityField {
    /// Normalizes the given nonnegative values.
    pub fn new(space: SpaceGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != space.n_points() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} grid points",
                values.len(),
                space.n_points()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("density values must be finite and nonnegative".into()));
        }
        let z: f64 = values.iter().zip(space.weights()).map(|(v, w)| v * w).sum();
        if z <= 0.0 {
            return Err(Error::Degenerate("density integrates to zero".into()));
        }
        Ok(Self {
            space,
            values: values.into_iter().map(|v| v / z).collect(),
        })
    }

    /// Gaussian density restricted to the grid and renormalized there.
    pub fn gaussian(space: SpaceGrid, mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::InvalidParameter(format!("std must be positive, got {std}")));
        }
        normalize(&LogDensityField::from_fn(space, |x| {
            -0.5 * ((x - mean) / std).powi(2)
        })?)
    }

    pub fn integral(&self) -> f64 {
        self.values
            .iter()
            .zip(self.space.weights())
            .map(|(v, w)| v * w)
            .sum()
    }

    pub fn log_field(&self) -> LogDensityField {
        LogDensityField {
            space: self.space,
            log_values: self.values.iter().map(|v| v.ln()).collect(),
        }
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["x", "q"]);
        for (x, q) in self.space.nodes().into_iter().zip(&self.values) {
            t.push(vec![x, *q]);
        }
        t
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_table().write(path)
    }
}

pub(crate) fn normalize_slice(space: &SpaceGrid, log_values: &[f64]) -> Result<Vec<f64>> {
    let m = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::Degenerate("log density is -inf everywhere".into()));
    }
    let w = space.weights();
    let mut q: Vec<f64> = log_values.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = q.iter().zip(&w).map(|(a, b)| a * b).sum();
    for v in &mut q {
        *v /= z;
    }
    Ok(q)
}

/// `q = p / int p`, computed from the max-shifted exponential.
pub fn normalize(logp: &LogDensityField) -> Result<DensityField> {
    Ok(DensityField {
        space: logp.space,
        values: normalize_slice(&logp.space, &logp.log_values)?,
    })
}

pub(crate) fn kl_slice(space: &SpaceGrid, q: &[f64], q0: &[f64]) -> Result<f64> {
    let mut kl = 0.0;
    for ((a, b), w) in q.iter().zip(q0).zip(space.weights()) {
        if *a == 0.0 {
            continue;
        }
        if *b <= 0.0 {
            return Err(Error::Support(
                "reference density vanishes where the density is positive".into(),
            ));
        }
        kl += w * a * (a / b).ln();
    }
    Ok(kl)
}

/// Trapezoid quadrature of `q log(q / q0)`.
pub fn kl_divergence(q: &DensityField, q0: &DensityField) -> Result<f64> {
    q.space.check_same(&q0.space)?;
    kl_slice(&q.space, &q.values, &q0.values)
}

/// Trapezoid mean and variance.
pub fn moments(q: &DensityField) -> (f64, f64) {
    let w = q.space.weights();
    let x = q.space.nodes();
    let mean: f64 = (0..x.len()).map(|j| w[j] * x[j] * q.values[j]).sum();
    let var: f64 = (0..x.len())
        .map(|j| w[j] * (x[j] - mean).powi(2) * q.values[j])
        .sum();
    (mean, var)
}

/// Gaussian prior truncated to an interval, usable both as a sampler for the
/// initial state and as a grid density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedGaussian {
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncatedGaussian {
    pub fn new(mean: f64, std: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(std > 0.0 && lo < hi && mean.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "bad truncated Gaussian N({mean}, {std}^2) on [{lo}, {hi}]"
            )));
        }
        // Rejection sampling needs a reasonable acceptance rate.
        if (mean - hi) / std > 4.0 || (lo - mean) / std > 4.0 {
            return Err(Error::InvalidParameter(
                "truncation interval lies far in the tail of the Gaussian".into(),
            ));
        }
        Ok(Self { mean, std, lo, hi })
    }

    pub fn on_grid(mean: f64, std: f64, space: &SpaceGrid) -> Result<Self> {
        Self::new(mean, std, space.x_min(), space.x_max())
    }

    pub fn sample(&self, rng: &mut SimRng) -> f64 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            let x = self.mean + self.std * z;
            if x >= self.lo && x <= self.hi {
                return x;
            }
        }
    }

    pub fn sampler(&self) -> SamplerFn {
        let me = *self;
        Arc::new(move |rng| DVector::from_element(1, me.sample(rng)))
    }

    pub fn log_density(&self, space: &SpaceGrid) -> LogDensityField {
        LogDensityField {
            space: *space,
            log_values: space
                .nodes()
                .into_iter()
                .map(|x| {
                    if x < self.lo || x > self.hi {
                        f64::NEG_INFINITY
                    } else {
                        -0.5 * ((x - self.mean) / self.std).powi(2)
                    }
                })
                .collect(),
        }
    }

    pub fn density(&self, space: &SpaceGrid) -> Result<DensityField> {
        normalize(&self.log_density(space))
    }
}

/// `M = I + dt A` for the conservative upwind/central discretization of the
/// forward operator with zero-flux boundaries. Row `j` reads
/// `lo[j] p[j-1] + di[j] p[j] + up[j] p[j+1]`.
#[derive(Debug, Clone)]
pub(crate) struct Transport {
    pub(crate) lo: Vec<f64>,
    pub(crate) di: Vec<f64>,
    pub(crate) up: Vec<f64>,
}

fn scalar_diffusion(signal: &SignalModel, t: f64) -> Result<f64> {
    let s = signal.diffusion(t);
    if s.nrows() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "grid filter needs a scalar state, got dimension {}",
            s.nrows()
        )));
    }
    Ok(s[(0, 0)])
}

pub(crate) fn build_transport(
    signal: &SignalModel,
    space: &SpaceGrid,
    t: f64,
    dt: f64,
) -> Result<Option<Transport>> {
    let n = space.n_points();
    let dx = space.dx();
    let sigma = scalar_diffusion(signal, t)?;
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(blowup(t, "diffusion coefficient"));
    }
    let x = space.nodes();
    let faces: Vec<f64> = (0..n - 1)
        .map(|j| signal.drift(&DVector::from_element(1, 0.5 * (x[j] + x[j + 1])), t)[0])
        .collect();
    if faces.iter().any(|f| !f.is_finite()) {
        return Err(blowup(t, "drift"));
    }
    if sigma == 0.0 && faces.iter().all(|f| *f == 0.0) {
        return Ok(None);
    }
    let fmax = faces.iter().fold(0.0_f64, |m, f| m.max(f.abs()));
    if fmax * dt / dx > 1.0 {
        return Err(Error::Cfl(format!(
            "max|f| dt/dx = {} > 1 at t = {t}",
            fmax * dt / dx
        )));
    }
    if sigma * dt / (dx * dx) > 0.5 {
        return Err(Error::Cfl(format!(
            "Sigma dt/dx^2 = {} > 0.5 at t = {t}",
            sigma * dt / (dx * dx)
        )));
    }
    let d = 0.5 * sigma / dx;
    // Face flux F_{j+1/2} = alpha_j p_j - beta_j p_{j+1}.
    let alpha: Vec<f64> = faces.iter().map(|f| f.max(0.0) + d).collect();
    let beta: Vec<f64> = faces.iter().map(|f| d - f.min(0.0)).collect();
    let w = space.weights();
    let mut lo = vec![0.0; n];
    let mut di = vec![1.0; n];
    let mut up = vec![0.0; n];
    for j in 0..n {
        let mut out = 0.0;
        if j > 0 {
            lo[j] = dt * alpha[j - 1] / w[j];
            out += beta[j - 1];
        }
        if j + 1 < n {
            up[j] = dt * beta[j] / w[j];
            out += alpha[j];
        }
        di[j] = 1.0 - dt * out / w[j];
    }
    if let Some(j) = di.iter().position(|v| *v < 0.0) {
        return Err(Error::Cfl(format!(
            "explicit step loses positivity at x = {} (t = {t}); reduce dt or refine dx",
            space.node(j)
        )));
    }
    Ok(Some(Transport { lo, di, up }))
}

impl Transport {
    /// `ln (M e^l)_j`, evaluated with a local max shift.
    pub(crate) fn apply_log(&self, l: &[f64], out: &mut [f64]) {
        let n = l.len();
        for j in 0..n {
            let mut m = l[j];
            if j > 0 && self.lo[j] > 0.0 {
                m = m.max(l[j - 1]);
            }
            if j + 1 < n && self.up[j] > 0.0 {
                m = m.max(l[j + 1]);
            }
            if m == f64::NEG_INFINITY {
                out[j] = m;
                continue;
            }
            let mut s = self.di[j] * (l[j] - m).exp();
            if j > 0 && self.lo[j] > 0.0 {
                s += self.lo[j] * (l[j - 1] - m).exp();
            }
            if j + 1 < n && self.up[j] > 0.0 {
                s += self.up[j] * (l[j + 1] - m).exp();
            }
            out[j] = m + s.ln();
        }
    }
}

/// Per-node observation coefficients for one time step:
/// `a_j = Gamma^{-1} g(x_j, t)` and `b_j = 1/2 g^T Gamma^{-1} g`.
fn observation_tables(
    obs: &ObservationModel,
    space: &SpaceGrid,
    t: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let gi = obs.gamma_inv(t)?;
    let d = obs.obs_dim();
    let mut a = Vec::with_capacity(space.n_points() * d);
    let mut b = Vec::with_capacity(space.n_points());
    for x in space.nodes() {
        let g = obs.g(&DVector::from_element(1, x), t);
        if g.len() != d {
            return Err(Error::ShapeMismatch(format!(
                "g returned {} components, observation dimension is {d}",
                g.len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(blowup(t, format!("observation map at x = {x}")));
        }
        let ag = &gi * &g;
        b.push(0.5 * g.dot(&ag));
        a.extend(ag.iter());
    }
    Ok((a, b))
}

/// A log-Zakai solver with all model-dependent coefficients precomputed for
/// a fixed pair of space and time grids. Reusable across schedules and
/// observation paths.
#[derive(Debug, Clone)]
pub struct ZakaiFilter {
    space: SpaceGrid,
    grid: TimeGrid,
    obs_dim: usize,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    transport: Vec<Option<Transport>>,
}

impl ZakaiFilter {
    pub fn new(
        signal: &SignalModel,
        obs: &ObservationModel,
        space: SpaceGrid,
        grid: TimeGrid,
    ) -> Result<Self> {
        if signal.dim() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "grid filter needs a scalar state, got dimension {}",
                signal.dim()
            )));
        }
        let dt = grid.dt();
        let mut a = Vec::with_capacity(grid.n_cells());
        let mut b = Vec::with_capacity(grid.n_cells());
        let mut transport = Vec::with_capacity(grid.n_cells());
        for k in 0..grid.n_cells() {
            let t = grid.node(k);
            let (ak, bk) = observation_tables(obs, &space, t)?;
            a.push(ak);
            b.push(bk);
            transport.push(build_transport(signal, &space, t, dt)?);
        }
        Ok(Self {
            space,
            grid,
            obs_dim: obs.obs_dim(),
            a,
            b,
            transport,
        })
    }

    pub fn space(&self) -> &SpaceGrid {
        &self.space
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    /// True when the forward operator vanishes (`L = 0`), so the filter is a
    /// pure sum of observation terms.
    pub fn is_static(&self) -> bool {
        self.transport.iter().all(Option::is_none)
    }

    pub(crate) fn transport(&self, k: usize) -> Option<&Transport> {
        self.transport[k].as_ref()
    }

    pub(crate) fn obs_a(&self, k: usize) -> &[f64] {
        &self.a[k]
    }

    pub(crate) fn obs_b(&self, k: usize) -> &[f64] {
        &self.b[k]
    }

    /// Advance `l` (at `t_k`) by one cell in place.
    pub fn step_in_place(&self, k: usize, l: &mut Vec<f64>, dz: &DVector<f64>, xi_k: f64) -> Result<()> {
        if dz.len() != self.obs_dim {
            return Err(Error::ShapeMismatch(format!(
                "increment has {} components, expected {}",
                dz.len(),
                self.obs_dim
            )));
        }
        let n = self.space.n_points();
        if let Some(tr) = &self.transport[k] {
            let mut out = vec![0.0; n];
            tr.apply_log(l, &mut out);
            *l = out;
        }
        let m = xi_k * self.grid.dt();
        let a = &self.a[k];
        let b = &self.b[k];
        let d = self.obs_dim;
        if d == 1 {
            let z = dz[0];
            for j in 0..n {
                l[j] += a[j] * z - b[j] * m;
            }
        } else {
            for j in 0..n {
                let mut s = -b[j] * m;
                for i in 0..d {
                    s += a[j * d + i] * dz[i];
                }
                l[j] += s;
            }
        }
        if l.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(blowup(self.grid.node(k + 1), "log density"));
        }
        if l.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(blowup(self.grid.node(k + 1), "density vanished"));
        }
        Ok(())
    }

    fn check_inputs(&self, log_prior: &[f64], xi: &SensorSchedule, path: &ObservationPath) -> Result<()> {
        self.grid.check_same(xi.grid(), "filter vs schedule")?;
        self.grid.check_same(&path.grid, "filter vs observations")?;
        if log_prior.len() != self.space.n_points() {
            return Err(Error::ShapeMismatch("prior does not match the space grid".into()));
        }
        Ok(())
    }

    /// Run over the first `n_cells` cells and keep every intermediate field.
    pub fn run_prefix(
        &self,
        log_prior: &[f64],
        xi: &SensorSchedule,
        path: &ObservationPath,
        n_cells: usize,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_inputs(log_prior, xi, path)?;
        let n_cells = n_cells.min(self.grid.n_cells());
        let mut traj = Vec::with_capacity(n_cells + 1);
        let mut l = log_prior.to_vec();
        traj.push(l.clone());
        for k in 0..n_cells {
            self.step_in_place(k, &mut l, &path.increments[k], xi.density()[k])?;
            traj.push(l.clone());
        }
        Ok(traj)
    }

    /// Full trajectory, one field per node time.
    pub fn run(&self, log_prior: &[f64], xi: &SensorSchedule, path: &ObservationPath) -> Result<Vec<Vec<f64>>> {
        self.run_prefix(log_prior, xi, path, self.grid.n_cells())
    }

    /// Final field only.
    pub fn run_final(&self, log_prior: &[f64], xi: &SensorSchedule, path: &ObservationPath) -> Result<Vec<f64>> {
        self.check_inputs(log_prior, xi, path)?;
        let mut l = log_prior.to_vec();
        for k in 0..self.grid.n_cells() {
            self.step_in_place(k, &mut l, &path.increments[k], xi.density()[k])?;
        }
        Ok(l)
    }

    /// `KL(q_T || q_0)` for a final log field.
    pub fn kl_to_prior(&self, log_final: &[f64], prior: &DensityField) -> Result<f64> {
        let q = normalize_slice(&self.space, log_final)?;
        kl_slice(&self.space, &q, &prior.values)
    }
}

/// One log-Zakai step from `t` to `t + dt`, with coefficients evaluated at `t`.
#[allow(clippy::too_many_arguments)]
pub fn log_zakai_step(
    logp: &LogDensityField,
    dz: &DVector<f64>,
    xi_k: f64,
    signal: &SignalModel,
    obs: &ObservationModel,
    t: f64,
    dt: f64,
) -> Result<LogDensityField> {
    if !(dt > 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("bad step t = {t}, dt = {dt}")));
    }
    // A two-cell grid of width dt; only its step size is used.
    let grid = TimeGrid::new(2.0 * dt, 2)?;
    let space = logp.space;
    let (a, b) = observation_tables(obs, &space, t)?;
    let transport = build_transport(signal, &space, t, dt)?;
    let one = ZakaiFilter {
        space,
        grid,
        obs_dim: obs.obs_dim(),
        a: vec![a],
        b: vec![b],
        transport: vec![transport],
    };
    let mut l = logp.log_values.clone();
    one.step_in_place(0, &mut l, dz, xi_k)
        .map_err(|e| match e {
            Error::Blowup { what, .. } => blowup(t + dt, what),
            other => other,
        })?;
    LogDensityField::new(space, l)
}

/// Run the filter from the prior over the whole observation path.
pub fn run_filter(
    signal: &SignalModel,
    obs: &ObservationModel,
    xi: &SensorSchedule,
    path: &ObservationPath,
    prior: &DensityField,
) -> Result<Vec<LogDensityField>> {
    run_filter_prefix(signal, obs, xi, path, prior, xi.grid().n_cells())
}

/// Like [`run_filter`] but stops after `n_cells` cells; `n_cells = 0` returns
/// just the log prior.
pub fn run_filter_prefix(
    signal: &SignalModel,
    obs: &ObservationModel,
    xi: &SensorSchedule,
    path: &ObservationPath,
    prior: &DensityField,
    n_cells: usize,
) -> Result<Vec<LogDensityField>> {
    if prior.values.iter().any(|v| *v <= 0.0) {
        return Err(Error::Support("prior must be positive on the grid".into()));
    }
    let filter = ZakaiFilter::new(signal, obs, prior.space, *xi.grid())?;
    let log_prior = prior.log_field().log_values;
    Ok(filter
        .run_prefix(&log_prior, xi, path, n_cells)?
        .into_iter()
        .map(|log_values| LogDensityField {
            space: prior.space,
            log_values,
        })
        .collect())
}

/// Long-format table `(t, x, q)` of the normalized trajectory, keeping every
/// `stride`-th time node.
pub fn trajectory_table(traj: &[LogDensityField], grid: &TimeGrid, stride: usize) -> Result<Table> {
    let mut t = Table::new(["t", "x", "q"]);
    let stride = stride.max(1);
    for (k, f) in traj.iter().enumerate().step_by(stride) {
        let q = normalize(f)?;
        for (x, v) in f.space.nodes().into_iter().zip(q.values) {
            t.push(vec![grid.node(k), x, v]);
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, sub_seed};
    use crate::schedule::{gaussian_schedule, uniform_schedule};
    use crate::sde_sim::{simulate_observations, simulate_signal};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn static_signal(prior: TruncatedGaussian) -> SignalModel {
        SignalModel::constant(1, prior.sampler())
    }

    fn logistic(z0: f64) -> impl Fn(f64, f64) -> f64 + Send + Sync + Copy {
        let a = 1.0 / z0 - 1.0;
        move |x, t| {
            let e = (x * t).exp();
            e / (a + e)
        }
    }

    #[test]
    fn space_grid_validation() {
        assert!(SpaceGrid::new(0.0, 1.0, 7).is_err());
        assert!(SpaceGrid::new(1.0, 1.0, 10).is_err());
        let s = SpaceGrid::new(-1.0, 1.0, 11).unwrap();
        assert!((s.dx() - 0.2).abs() < 1e-15);
        assert_eq!(s.node(10), 1.0);
        assert!((s.weights().iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn normalize_constant_is_uniform() {
        let s = SpaceGrid::new(-2.0, 3.0, 101).unwrap();
        let q = normalize(&LogDensityField::new(s, vec![0.0; 101]).unwrap()).unwrap();
        for v in &q.values {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_all_neg_inf() {
        let s = SpaceGrid::new(0.0, 1.0, 8).unwrap();
        let l = LogDensityField::new(s, vec![f64::NEG_INFINITY; 8]).unwrap();
        assert!(matches!(normalize(&l), Err(Error::Degenerate(_))));
    }

    #[test]
    fn standard_gaussian_moments() {
        let s = SpaceGrid::new(-10.0, 10.0, 2001).unwrap();
        let q = normalize(&LogDensityField::from_fn(s, |x| -0.5 * x * x).unwrap()).unwrap();
        let (m, v) = moments(&q);
        assert!(m.abs() < 1e-10);
        assert!((v - 1.0).abs() < 1e-3);
        assert!((q.integral() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_point_moments() {
        let s = SpaceGrid::new(0.0, 4.0, 81).unwrap();
        let q = normalize(&LogDensityField::from_fn(s, |x| -(x - 2.0).abs()).unwrap()).unwrap();
        assert!((moments(&q).0 - 2.0).abs() < 1e-10);
        let mut v = vec![f64::NEG_INFINITY; 81];
        v[30] = 0.0;
        let spike = normalize(&LogDensityField::new(s, v).unwrap()).unwrap();
        let (m, var) = moments(&spike);
        assert!((m - s.node(30)).abs() < 1e-12);
        assert!(var.abs() < 1e-12);
    }

    #[test]
    fn gaussian_kl_closed_form() {
        let s = SpaceGrid::new(-10.0, 10.0, 2000).unwrap();
        let q = DensityField::gaussian(s, 0.0, 1.0).unwrap();
        let q0 = DensityField::gaussian(s, 0.0, 2f64.sqrt()).unwrap();
        let kl = kl_divergence(&q, &q0).unwrap();
        let exact = 0.5 * (2f64.ln() - 0.5);
        assert!((kl - exact).abs() < 1e-4, "{kl} vs {exact}");
        assert!(kl_divergence(&q, &q).unwrap().abs() < 1e-15);
        let q1 = DensityField::gaussian(s, 0.3, 1.0).unwrap();
        assert!(kl_divergence(&q1, &q).unwrap() > 0.0);
    }

    #[test]
    fn kl_support_violation() {
        let s = SpaceGrid::new(0.0, 1.0, 10).unwrap();
        let q = DensityField::new(s, vec![1.0; 10]).unwrap();
        let mut v = vec![1.0; 10];
        v[4] = 0.0;
        let q0 = DensityField::new(s, v).unwrap();
        assert!(matches!(kl_divergence(&q, &q0), Err(Error::Support(_))));
        // The other direction is fine: 0 log 0 = 0.
        assert!(kl_divergence(&q0, &q).unwrap() > 0.0);
    }

    #[test]
    fn constant_g_step_leaves_density_unchanged() {
        let s = SpaceGrid::new(0.0, 2.0, 201).unwrap();
        let prior = TruncatedGaussian::on_grid(1.0, 0.25, &s).unwrap();
        let signal = static_signal(prior);
        let obs = ObservationModel::scalar(|_x, _t| 0.7, 0.1);
        let l0 = prior.log_density(&s);
        let l1 = log_zakai_step(&l0, &DVector::from_element(1, 0.013), 0.4, &signal, &obs, 1.0, 0.01).unwrap();
        let q0 = normalize(&l0).unwrap();
        let q1 = normalize(&l1).unwrap();
        for (a, b) in q0.values.iter().zip(&q1.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn logistic_step_matches_closed_form() {
        let s = SpaceGrid::new(0.0, 2.0, 101).unwrap();
        let prior = TruncatedGaussian::on_grid(1.0, 0.25, &s).unwrap();
        let signal = static_signal(prior);
        let g = logistic(1.0 / (1.0 + 3f64.exp()));
        let gamma = 0.2;
        let obs = ObservationModel::scalar(g, gamma);
        let l0 = prior.log_density(&s);
        let (dz, xi, t, dt) = (0.0031, 0.3, 2.5, 0.01);
        let l1 = log_zakai_step(&l0, &DVector::from_element(1, dz), xi, &signal, &obs, t, dt).unwrap();
        for (j, x) in s.nodes().into_iter().enumerate() {
            let gx = g(x, t);
            let expect = gx * dz / (gamma * gamma) - 0.5 * gx * gx * xi * dt / (gamma * gamma);
            assert!((l1.log_values[j] - l0.log_values[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cfl_violation_is_reported() {
        let s = SpaceGrid::new(-1.0, 1.0, 41).unwrap();
        let signal = SignalModel::new(
            1,
            Arc::new(|_x, _t| DVector::zeros(1)),
            Arc::new(|_t| DMatrix::from_element(1, 1, 1.0)),
            Arc::new(|_rng| DVector::zeros(1)),
        )
        .unwrap();
        let obs = ObservationModel::scalar(|x, _| x, 1.0);
        let l0 = LogDensityField::new(s, vec![0.0; 41]).unwrap();
        let r = log_zakai_step(&l0, &DVector::zeros(1), 1.0, &signal, &obs, 0.0, 0.01);
        assert!(matches!(r, Err(Error::Cfl(_))));
    }

    #[test]
    fn blowup_reports_time() {
        let s = SpaceGrid::new(-1.0, 1.0, 41).unwrap();
        let signal = SignalModel::constant(1, Arc::new(|_rng| DVector::zeros(1)));
        let obs = ObservationModel::scalar(|x, _| x, 1.0);
        let l0 = LogDensityField::new(s, vec![0.0; 41]).unwrap();
        let r = log_zakai_step(&l0, &DVector::from_element(1, f64::NAN), 1.0, &signal, &obs, 0.5, 0.01);
        match r {
            Err(Error::Blowup { time, .. }) => assert!((time - 0.51).abs() < 1e-12),
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn diffusion_spreads_and_conserves_mass() {
        // Heat equation on a wide grid: variance grows by Sigma t, as the
        // Kalman-Bucy covariance does without observations.
        let s = SpaceGrid::new(-6.0, 6.0, 241).unwrap();
        let sigma = 0.5_f64;
        let signal = SignalModel::new(
            1,
            Arc::new(|_x, _t| DVector::zeros(1)),
            Arc::new(move |_t| DMatrix::from_element(1, 1, sigma)),
            Arc::new(|_rng| DVector::zeros(1)),
        )
        .unwrap();
        let obs = ObservationModel::scalar(|x, _| x, 1.0);
        let grid = TimeGrid::new(2.0, 400).unwrap();
        let filter = ZakaiFilter::new(&signal, &obs, s, grid).unwrap();
        let mut l = TruncatedGaussian::on_grid(0.0, 0.5, &s).unwrap().log_density(&s).log_values;
        let w = s.weights();
        let mass = |l: &[f64]| -> f64 { l.iter().zip(&w).map(|(a, b)| a.exp() * b).sum() };
        let m0 = mass(&l);
        for k in 0..400 {
            let tr = filter.transport(k).unwrap();
            let mut out = vec![0.0; l.len()];
            tr.apply_log(&l, &mut out);
            l = out;
        }
        assert!((mass(&l) - m0).abs() / m0 < 1e-12);
        let (_, v) = moments(&normalize(&LogDensityField::new(s, l).unwrap()).unwrap());
        let expect = 0.25 + sigma * sigma * 2.0;
        assert!((v - expect).abs() / expect < 0.01, "{v} vs {expect}");
    }

    #[test]
    fn zero_length_horizon_returns_prior() {
        let grid = TimeGrid::new(6.0, 60).unwrap();
        let s = SpaceGrid::new(0.0, 2.0, 101).unwrap();
        let prior = TruncatedGaussian::on_grid(1.0, 0.25, &s).unwrap();
        let signal = static_signal(prior);
        let obs = ObservationModel::scalar(|x, t| x * t, 0.3);
        let xi = uniform_schedule(grid);
        let path = simulate_observations(&simulate_signal(&signal, grid, 1).unwrap(), &obs, &xi, 2).unwrap();
        let q0 = prior.density(&s).unwrap();
        let traj = run_filter_prefix(&signal, &obs, &xi, &path, &q0, 0).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj[0], q0.log_field());
        let full = run_filter(&signal, &obs, &xi, &path, &q0).unwrap();
        assert_eq!(full.len(), 61);
    }

    #[test]
    fn uninformative_observations_keep_prior() {
        let grid = TimeGrid::new(6.0, 300).unwrap();
        let s = SpaceGrid::new(0.0, 2.0, 201).unwrap();
        let prior = TruncatedGaussian::on_grid(1.0, 0.25, &s).unwrap();
        let signal = static_signal(prior);
        let obs = ObservationModel::scalar(|_x, t| (t * 0.3).sin(), 0.1);
        let xi = gaussian_schedule(2.0, 1.0, grid).unwrap();
        let path = simulate_observations(&simulate_signal(&signal, grid, 4).unwrap(), &obs, &xi, 5).unwrap();
        let q0 = prior.density(&s).unwrap();
        let traj = run_filter(&signal, &obs, &xi, &path, &q0).unwrap();
        for f in &traj {
            let q = normalize(f).unwrap();
            for (a, b) in q.values.iter().zip(&q0.values) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn informative_schedule_contracts_more() {
        let grid = TimeGrid::new(6.0, 120).unwrap();
        let s = SpaceGrid::new(0.0, 2.0, 401).unwrap();
        let prior = TruncatedGaussian::on_grid(1.0, 0.25, &s).unwrap();
        let signal = static_signal(prior);
        let obs = ObservationModel::scalar(logistic(1.0 / (1.0 + 3f64.exp())), 0.05);
        let q0 = prior.density(&s).unwrap();
        let filter = ZakaiFilter::new(&signal, &obs, s, grid).unwrap();
        let lp = q0.log_field().log_values;
        // Near tau* = 3 the logistic fan is wide; near t = 0.2 it is flat.
        let good = gaussian_schedule(3.0, 0.3, grid).unwrap();
        let flat = gaussian_schedule(0.2, 0.3, grid).unwrap();
        let mut kl_good = 0.0;
        let mut kl_flat = 0.0;
        for r in 0..20 {
            let x = simulate_signal(&signal, grid, sub_seed(9, r, stream::SIGNAL)).unwrap();
            let seed = sub_seed(9, r, stream::OBSERVATION);
            for (xi, acc) in [(&good, &mut kl_good), (&flat, &mut kl_flat)] {
                let path = simulate_observations(&x, &obs, xi, seed).unwrap();
                let lt = filter.run_final(&lp, xi, &path).unwrap();
                *acc += filter.kl_to_prior(&lt, &q0).unwrap() / 20.0;
            }
        }
        assert!(kl_good > kl_flat, "{kl_good} vs {kl_flat}");
    }

    proptest! {
        #[test]
        fn normalize_is_shift_invariant(
            vals in proptest::collection::vec(-50.0f64..50.0, 8..60),
            c in -300.0f64..300.0,
        ) {
            let s = SpaceGrid::new(-1.0, 1.0, vals.len()).unwrap();
            let a = normalize(&LogDensityField::new(s, vals.clone()).unwrap()).unwrap();
            let b = normalize(&LogDensityField::new(s, vals.iter().map(|v| v + c).collect()).unwrap()).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
            prop_assert!((a.integral() - 1.0).abs() < 1e-8);
        }
    }
}
