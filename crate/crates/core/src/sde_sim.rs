//! Euler-Maruyama simulation of the hidden signal and of the scheduled
//! observation process `dZ = g(X, t) xi dt + sqrt(xi) Gamma^{1/2} dW`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{blowup, Error, Result};
use crate::io::Table;
use crate::rng::{rng_from_seed, SimRng};
use crate::schedule::{SensorSchedule, TimeGrid};

pub type DriftFn = Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type SamplerFn = Arc<dyn Fn(&mut SimRng) -> DVector<f64> + Send + Sync>;
pub type ObservationFn = Arc<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;

/// Diffusion `dX = f(X, t) dt + Sigma^{1/2}(t) dB` with a prior sampler for
/// `X(0)`.
#[derive(Clone)]
pub struct SignalModel {
    dim: usize,
    drift: DriftFn,
    diffusion_sqrt: MatrixFn,
    initial: SamplerFn,
}

impl fmt::Debug for SignalModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SignalModel").field("dim", &self.dim).finish()
    }
}

impl SignalModel {
    pub fn new(dim: usize, drift: DriftFn, diffusion_sqrt: MatrixFn, initial: SamplerFn) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("signal dimension must be positive".into()));
        }
        let s = diffusion_sqrt(0.0);
        if s.nrows() != dim {
            return Err(Error::ShapeMismatch(format!(
                "diffusion has {} rows, state dimension is {dim}",
                s.nrows()
            )));
        }
        Ok(Self {
            dim,
            drift,
            diffusion_sqrt,
            initial,
        })
    }

    /// A time-constant state `X(t) = X(0)` with `X(0)` from `initial`.
    pub fn constant(dim: usize, initial: SamplerFn) -> Self {
        Self {
            dim,
            drift: Arc::new(move |_x, _t| DVector::zeros(dim)),
            diffusion_sqrt: Arc::new(move |_t| DMatrix::zeros(dim, dim)),
            initial,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.drift)(x, t)
    }

    pub fn diffusion_sqrt(&self, t: f64) -> DMatrix<f64> {
        (self.diffusion_sqrt)(t)
    }

    /// `Sigma(t) = Sigma^{1/2} Sigma^{1/2, T}`.
    pub fn diffusion(&self, t: f64) -> DMatrix<f64> {
        let s = self.diffusion_sqrt(t);
        &s * s.transpose()
    }

    pub fn sample_initial(&self, rng: &mut SimRng) -> DVector<f64> {
        (self.initial)(rng)
    }
}

/// Observation map `g(x, t)` and noise covariance `Gamma(t)`.
#[derive(Clone)]
pub struct ObservationModel {
    obs_dim: usize,
    g: ObservationFn,
    gamma: MatrixFn,
}

impl fmt::Debug for ObservationModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObservationModel")
            .field("obs_dim", &self.obs_dim)
            .finish()
    }
}

impl ObservationModel {
    pub fn new(obs_dim: usize, g: ObservationFn, gamma: MatrixFn) -> Result<Self> {
        if obs_dim == 0 {
            return Err(Error::InvalidParameter("observation dimension must be positive".into()));
        }
        let gm = gamma(0.0);
        if gm.nrows() != obs_dim || gm.ncols() != obs_dim {
            return Err(Error::ShapeMismatch(format!(
                "Gamma is {}x{}, observation dimension is {obs_dim}",
                gm.nrows(),
                gm.ncols()
            )));
        }
        Ok(Self { obs_dim, g, gamma })
    }

    /// Scalar observations with constant noise level `gamma` (so `Gamma = gamma^2`).
    pub fn scalar(g: impl Fn(f64, f64) -> f64 + Send + Sync + 'static, gamma: f64) -> Self {
        Self {
            obs_dim: 1,
            g: Arc::new(move |x, t| DVector::from_element(1, g(x[0], t))),
            gamma: Arc::new(move |_t| DMatrix::from_element(1, 1, gamma * gamma)),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn g(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.g)(x, t)
    }

    pub fn gamma(&self, t: f64) -> DMatrix<f64> {
        (self.gamma)(t)
    }

    /// `Gamma(t)^{-1}`; fails unless `Gamma(t)` is symmetric positive definite.
    pub fn gamma_inv(&self, t: f64) -> Result<DMatrix<f64>> {
        let g = self.gamma(t);
        g.clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Singular(format!("Gamma({t}) is not positive definite")))
    }

    /// Symmetric square root of `Gamma(t)`. Positive semidefinite `Gamma` is
    /// accepted, which allows noiseless simulation.
    pub fn gamma_sqrt(&self, t: f64) -> DMatrix<f64> {
        symmetric_sqrt(&self.gamma(t))
    }
}

pub(crate) fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.nrows() == 1 {
        return DMatrix::from_element(1, 1, m[(0, 0)].max(0.0).sqrt());
    }
    let eig = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// States `X(t_k)` on the nodes of a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalPath {
    pub grid: TimeGrid,
    pub states: Vec<DVector<f64>>,
}

impl SignalPath {
    pub fn to_table(&self) -> Table {
        let dim = self.states.first().map_or(0, |s| s.len());
        let mut t = Table::new(
            std::iter::once("t".to_string()).chain((0..dim).map(|i| format!("x{i}"))),
        );
        for (k, s) in self.states.iter().enumerate() {
            let mut row = vec![self.grid.node(k)];
            row.extend(s.iter());
            t.push(row);
        }
        t
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_table().write(path)
    }
}

/// Observation increments `dZ_k = Z(t_{k+1}) - Z(t_k)`, one per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationPath {
    pub grid: TimeGrid,
    pub increments: Vec<DVector<f64>>,
}

impl ObservationPath {
    /// Cumulative observation `Z(t_k)` on the nodes, starting at zero.
    pub fn cumulative(&self) -> Vec<DVector<f64>> {
        let dim = self.increments.first().map_or(0, |v| v.len());
        let mut z = DVector::zeros(dim);
        let mut out = vec![z.clone()];
        for dz in &self.increments {
            z += dz;
            out.push(z.clone());
        }
        out
    }

    pub fn to_table(&self) -> Table {
        let dim = self.increments.first().map_or(0, |s| s.len());
        let mut t = Table::new(
            std::iter::once("t_cell".to_string()).chain((0..dim).map(|i| format!("dz{i}"))),
        );
        for (k, s) in self.increments.iter().enumerate() {
            let mut row = vec![self.grid.node(k)];
            row.extend(s.iter());
            t.push(row);
        }
        t
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_table().write(path)
    }
}

fn check_finite(v: &DVector<f64>, t: f64, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(blowup(t, what.to_string()))
    }
}

/// Euler-Maruyama path of the signal, deterministic given `seed`.
pub fn simulate_signal(model: &SignalModel, grid: TimeGrid, seed: u64) -> Result<SignalPath> {
    let mut rng = rng_from_seed(seed);
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut x = model.sample_initial(&mut rng);
    if x.len() != model.dim() {
        return Err(Error::ShapeMismatch(format!(
            "initial sampler returned dimension {}, expected {}",
            x.len(),
            model.dim()
        )));
    }
    check_finite(&x, 0.0, "initial state")?;
    let mut states = Vec::with_capacity(grid.n_steps() + 1);
    states.push(x.clone());
    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        let f = model.drift(&x, t);
        check_finite(&f, t, "drift")?;
        let s = model.diffusion_sqrt(t);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(blowup(t, "diffusion"));
        }
        let eps = DVector::from_fn(s.ncols(), |_, _| StandardNormal.sample(&mut rng));
        x = &x + f * dt + s * eps * sqrt_dt;
        check_finite(&x, grid.node(k + 1), "state")?;
        states.push(x.clone());
    }
    Ok(SignalPath { grid, states })
}

/// Standard normal draws for the observation noise, one vector per cell.
pub fn observation_draws(obs_dim: usize, grid: TimeGrid, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = rng_from_seed(seed);
    (0..grid.n_cells())
        .map(|_| DVector::from_fn(obs_dim, |_, _| StandardNormal.sample(&mut rng)))
        .collect()
}

/// Observation increments for given noise draws:
/// `dZ_k = g(X_k, t_k) xi_k dt + sqrt(xi_k dt) Gamma^{1/2}(t_k) eps_k`.
pub fn observe_with_draws(
    signal: &SignalPath,
    obs: &ObservationModel,
    xi: &SensorSchedule,
    draws: &[DVector<f64>],
) -> Result<ObservationPath> {
    signal.grid.check_same(xi.grid(), "signal vs schedule")?;
    let grid = signal.grid;
    if draws.len() != grid.n_cells() {
        return Err(Error::GridMismatch(format!(
            "{} noise draws for {} cells",
            draws.len(),
            grid.n_cells()
        )));
    }
    let dt = grid.dt();
    let mut increments = Vec::with_capacity(grid.n_cells());
    for (k, (&xi_k, eps)) in xi.density().iter().zip(draws).enumerate() {
        let t = grid.node(k);
        let g = obs.g(&signal.states[k], t);
        let noise = obs.gamma_sqrt(t) * eps * (xi_k * dt).sqrt();
        let dz = g * (xi_k * dt) + noise;
        check_finite(&dz, t, "observation increment")?;
        increments.push(dz);
    }
    Ok(ObservationPath { grid, increments })
}

/// Simulate the scheduled observation process along a signal path,
/// deterministic given `seed`.
pub fn simulate_observations(
    signal: &SignalPath,
    obs: &ObservationModel,
    xi: &SensorSchedule,
    seed: u64,
) -> Result<ObservationPath> {
    let draws = observation_draws(obs.obs_dim(), signal.grid, seed);
    observe_with_draws(signal, obs, xi, &draws)
}

/// Remove the drift part `g(X_k, t_k) xi_k dt`, leaving the increments of
/// the noise process `Delta_xi`.
pub fn noise_part(
    path: &ObservationPath,
    signal: &SignalPath,
    obs: &ObservationModel,
    xi: &SensorSchedule,
) -> Result<ObservationPath> {
    path.grid.check_same(&signal.grid, "observations vs signal")?;
    path.grid.check_same(xi.grid(), "observations vs schedule")?;
    let dt = path.grid.dt();
    let increments = path
        .increments
        .iter()
        .enumerate()
        .map(|(k, dz)| dz - obs.g(&signal.states[k], path.grid.node(k)) * (xi.density()[k] * dt))
        .collect();
    Ok(ObservationPath {
        grid: path.grid,
        increments,
    })
}

/// Unbiased sample covariance of the cumulative value `sum_k dZ_k` across
/// paths.
pub fn empirical_increment_covariance(paths: &[ObservationPath]) -> Result<DMatrix<f64>> {
    if paths.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 paths, got {}",
            paths.len()
        )));
    }
    let grid = paths[0].grid;
    let dim = paths[0].increments.first().map_or(0, |v| v.len());
    let mut totals = Vec::with_capacity(paths.len());
    for p in paths {
        p.grid.check_same(&grid, "paths")?;
        let mut s = DVector::zeros(dim);
        for dz in &p.increments {
            s += dz;
        }
        totals.push(s);
    }
    let n = totals.len() as f64;
    let mean = totals.iter().fold(DVector::zeros(dim), |acc, s| acc + s) / n;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in &totals {
        let d = s - &mean;
        cov += &d * d.transpose();
    }
    Ok(cov / (n - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, sub_seed};
    use crate::schedule::{gaussian_schedule, uniform_schedule};

    fn point_sampler(x0: f64) -> SamplerFn {
        Arc::new(move |_rng| DVector::from_element(1, x0))
    }

    #[test]
    fn constant_signal_stays_put() {
        let grid = TimeGrid::new(6.0, 100).unwrap();
        let m = SignalModel::constant(1, point_sampler(1.3));
        let p = simulate_signal(&m, grid, 5).unwrap();
        assert_eq!(p.states.len(), 101);
        assert!(p.states.iter().all(|s| s[0] == 1.3));
    }

    #[test]
    fn signal_is_seed_deterministic() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let m = SignalModel::new(
            2,
            Arc::new(|x, _t| -x),
            Arc::new(|_t| DMatrix::identity(2, 2) * 0.5),
            Arc::new(|rng: &mut SimRng| {
                DVector::from_fn(2, |_, _| StandardNormal.sample(rng))
            }),
        )
        .unwrap();
        let a = simulate_signal(&m, grid, 11).unwrap();
        let b = simulate_signal(&m, grid, 11).unwrap();
        let c = simulate_signal(&m, grid, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn brownian_variance() {
        // Monte-Carlo estimate of Var X_i(T) for zero drift, diffusion sigma I.
        let sigma = 0.7;
        let t_end = 2.0;
        let grid = TimeGrid::new(t_end, 20).unwrap();
        let m = SignalModel::new(
            2,
            Arc::new(|_x, _t| DVector::zeros(2)),
            Arc::new(move |_t| DMatrix::identity(2, 2) * sigma),
            Arc::new(|_rng| DVector::zeros(2)),
        )
        .unwrap();
        let n = 10_000;
        let finals: Vec<DVector<f64>> = (0..n)
            .map(|r| simulate_signal(&m, grid, sub_seed(3, r, stream::SIGNAL)).unwrap().states[20].clone())
            .collect();
        for i in 0..2 {
            let mean = finals.iter().map(|v| v[i]).sum::<f64>() / n as f64;
            let var = finals.iter().map(|v| (v[i] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let expect = sigma * sigma * t_end;
            assert!((var - expect).abs() / expect < 0.05, "var {var} vs {expect}");
        }
    }

    #[test]
    fn blowup_reports_time() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let m = SignalModel::new(
            1,
            Arc::new(|_x, t| DVector::from_element(1, if t > 0.45 { f64::NAN } else { 0.0 })),
            Arc::new(|_t| DMatrix::zeros(1, 1)),
            point_sampler(0.0),
        )
        .unwrap();
        match simulate_signal(&m, grid, 0) {
            Err(Error::Blowup { time, .. }) => assert!((time - 0.5).abs() < 1e-12),
            other => panic!("expected blowup, got {other:?}"),
        }
    }

    #[test]
    fn zero_schedule_cells_give_zero_increments() {
        let grid = TimeGrid::new(6.0, 60).unwrap();
        let m = SignalModel::constant(1, point_sampler(1.0));
        let signal = simulate_signal(&m, grid, 1).unwrap();
        let mut d = vec![0.0; 60];
        for v in d.iter_mut().take(40).skip(20) {
            *v = 1.0 / 2.0;
        }
        let xi = SensorSchedule::new(grid, d).unwrap();
        let obs = ObservationModel::scalar(|x, t| x * t, 0.3);
        let path = simulate_observations(&signal, &obs, &xi, 9).unwrap();
        for (k, dz) in path.increments.iter().enumerate() {
            if !(20..40).contains(&k) {
                assert_eq!(dz[0], 0.0);
            } else {
                assert_ne!(dz[0], 0.0);
            }
        }
    }

    #[test]
    fn noiseless_observations() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let m = SignalModel::new(
            1,
            Arc::new(|_x, _t| DVector::from_element(1, 1.0)),
            Arc::new(|_t| DMatrix::zeros(1, 1)),
            point_sampler(0.5),
        )
        .unwrap();
        let signal = simulate_signal(&m, grid, 0).unwrap();
        let obs = ObservationModel::scalar(|x, _t| x, 0.0);
        let xi = gaussian_schedule(0.5, 0.2, grid).unwrap();
        let path = simulate_observations(&signal, &obs, &xi, 4).unwrap();
        for k in 0..10 {
            let expect = signal.states[k][0] * xi.density()[k] * grid.dt();
            assert!((path.increments[k][0] - expect).abs() <= 1e-15 * expect.abs());
        }
    }

    #[test]
    fn doubling_gamma_sqrt_doubles_noise() {
        let grid = TimeGrid::new(2.0, 40).unwrap();
        let m = SignalModel::constant(1, point_sampler(0.8));
        let signal = simulate_signal(&m, grid, 0).unwrap();
        let xi = uniform_schedule(grid);
        let a = ObservationModel::scalar(|x, _| x, 0.5);
        let b = ObservationModel::scalar(|x, _| x, 1.0);
        let pa = noise_part(&simulate_observations(&signal, &a, &xi, 21).unwrap(), &signal, &a, &xi).unwrap();
        let pb = noise_part(&simulate_observations(&signal, &b, &xi, 21).unwrap(), &signal, &b, &xi).unwrap();
        for (x, y) in pa.increments.iter().zip(&pb.increments) {
            assert!((2.0 * x[0] - y[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn increment_covariance_edge_cases() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let p = ObservationPath {
            grid,
            increments: vec![DVector::from_element(1, 0.25); 4],
        };
        let c = empirical_increment_covariance(&[p.clone(), p.clone(), p.clone()]).unwrap();
        assert_eq!(c[(0, 0)], 0.0);
        assert!(empirical_increment_covariance(&[p]).is_err());
    }

    fn cumulative_noise_cov(obs: &ObservationModel, xi: &SensorSchedule, n: u64) -> DMatrix<f64> {
        let grid = *xi.grid();
        let m = SignalModel::constant(1, point_sampler(0.3));
        let signal = simulate_signal(&m, grid, 0).unwrap();
        let paths: Vec<ObservationPath> = (0..n)
            .map(|r| {
                let p = simulate_observations(&signal, obs, xi, sub_seed(17, r, stream::OBSERVATION)).unwrap();
                noise_part(&p, &signal, obs, xi).unwrap()
            })
            .collect();
        empirical_increment_covariance(&paths).unwrap()
    }

    #[test]
    fn scalar_uniform_covariance_law() {
        let grid = TimeGrid::new(6.0, 60).unwrap();
        let gamma = 0.4;
        let obs = ObservationModel::scalar(|x, _| x, gamma);
        let c = cumulative_noise_cov(&obs, &uniform_schedule(grid), 10_000);
        let expect = gamma * gamma;
        assert!((c[(0, 0)] - expect).abs() / expect < 0.05);
    }

    #[test]
    fn schedule_in_quiet_region_has_smaller_covariance() {
        // Gamma(t) = (0.1 + t)^2: quadrature of int Gamma dxi is smaller for a
        // schedule concentrated near t = 0.5 than near t = 5.
        let grid = TimeGrid::new(6.0, 60).unwrap();
        let obs = ObservationModel::new(
            1,
            Arc::new(|x, _t| x.clone()),
            Arc::new(|t| DMatrix::from_element(1, 1, (0.1 + t).powi(2))),
        )
        .unwrap();
        let early = gaussian_schedule(0.5, 0.3, grid).unwrap();
        let late = gaussian_schedule(5.0, 0.3, grid).unwrap();
        let quad = |xi: &SensorSchedule| -> f64 {
            (0..60)
                .map(|k| (0.1 + grid.node(k)).powi(2) * xi.density()[k] * grid.dt())
                .sum()
        };
        assert!(quad(&early) < quad(&late));
        let ce = cumulative_noise_cov(&obs, &early, 2000)[(0, 0)];
        let cl = cumulative_noise_cov(&obs, &late, 2000)[(0, 0)];
        assert!(ce < cl);
        assert!((ce - quad(&early)).abs() / quad(&early) < 0.1);
    }
}
