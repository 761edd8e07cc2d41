//! Weighted Kalman-Bucy filtering for linear-Gaussian models: the scheduled
//! Riccati equation, the filter mean, the matrix adjoint and the exact
//! schedule gradient of covariance utilities.
//!
//! Model coefficients are frozen at the midpoint of each time cell, as the
//! schedule is. A coefficient that jumps at a grid node (such as a switching
//! observation matrix) is therefore resolved exactly.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{blowup, Error, Result};
use crate::io::Table;
use crate::schedule::{GradientField, SensorSchedule, TimeGrid};
use crate::sde_sim::{symmetric_sqrt, MatrixFn, ObservationModel, ObservationPath, SignalModel};

const PSD_TOL: f64 = 1e-8;

/// `dX = L X dt + Sigma^{1/2} dB`, `dZ = H X xi dt + sqrt(xi) Gamma^{1/2} dW`,
/// `X(0) ~ N(m0, C0)`.
#[derive(Clone)]
pub struct LinearGaussianModel {
    dim: usize,
    obs_dim: usize,
    l: MatrixFn,
    sigma: MatrixFn,
    h: MatrixFn,
    gamma: MatrixFn,
    m0: DVector<f64>,
    c0: DMatrix<f64>,
}

impl fmt::Debug for LinearGaussianModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearGaussianModel")
            .field("dim", &self.dim)
            .field("obs_dim", &self.obs_dim)
            .field("m0", &self.m0)
            .field("c0", &self.c0)
            .finish()
    }
}

/// Coefficients frozen on one cell.
#[derive(Debug, Clone)]
struct CellCoefficients {
    l: DMatrix<f64>,
    sigma: DMatrix<f64>,
    h: DMatrix<f64>,
    gamma_inv: DMatrix<f64>,
    a: DMatrix<f64>,
}

impl LinearGaussianModel {
    pub fn new(
        l: MatrixFn,
        sigma: MatrixFn,
        h: MatrixFn,
        gamma: MatrixFn,
        m0: DVector<f64>,
        c0: DMatrix<f64>,
    ) -> Result<Self> {
        let dim = m0.len();
        if dim == 0 || c0.shape() != (dim, dim) {
            return Err(Error::ShapeMismatch(format!(
                "prior mean has length {dim}, covariance is {:?}",
                c0.shape()
            )));
        }
        if (&c0 - c0.transpose()).amax() > 1e-12 || c0.clone().cholesky().is_none() {
            return Err(Error::Singular("C0 must be symmetric positive definite".into()));
        }
        let h0 = h(0.0);
        let obs_dim = h0.nrows();
        if h0.ncols() != dim || obs_dim == 0 {
            return Err(Error::ShapeMismatch(format!("H(0) is {:?}, state dimension {dim}", h0.shape())));
        }
        if l(0.0).shape() != (dim, dim) || sigma(0.0).shape() != (dim, dim) {
            return Err(Error::ShapeMismatch("L and Sigma must be n x n".into()));
        }
        if gamma(0.0).shape() != (obs_dim, obs_dim) {
            return Err(Error::ShapeMismatch("Gamma must be obs_dim x obs_dim".into()));
        }
        Ok(Self {
            dim,
            obs_dim,
            l,
            sigma,
            h,
            gamma,
            m0,
            c0,
        })
    }

    /// Scalar model with constant coefficients.
    pub fn scalar(l: f64, sigma2: f64, h: f64, gamma: f64, m0: f64, c0: f64) -> Result<Self> {
        let c = |v: f64| -> MatrixFn { Arc::new(move |_t| DMatrix::from_element(1, 1, v)) };
        Self::new(
            c(l),
            c(sigma2),
            c(h),
            c(gamma * gamma),
            DVector::from_element(1, m0),
            DMatrix::from_element(1, 1, c0),
        )
    }

    /// Two independent Brownian motions observed one at a time:
    /// `H = (1, 0)` before `t_switch` and `(0, 1)` from `t_switch` on.
    pub fn switching_2d(sigma: f64, gamma: f64, c0: f64, t_switch: f64) -> Result<Self> {
        Self::new(
            Arc::new(|_t| DMatrix::zeros(2, 2)),
            Arc::new(move |_t| DMatrix::identity(2, 2) * (sigma * sigma)),
            Arc::new(move |t| {
                if t < t_switch {
                    DMatrix::from_row_slice(1, 2, &[1.0, 0.0])
                } else {
                    DMatrix::from_row_slice(1, 2, &[0.0, 1.0])
                }
            }),
            Arc::new(move |_t| DMatrix::from_element(1, 1, gamma * gamma)),
            DVector::zeros(2),
            DMatrix::identity(2, 2) * c0,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn m0(&self) -> &DVector<f64> {
        &self.m0
    }

    pub fn c0(&self) -> &DMatrix<f64> {
        &self.c0
    }

    pub fn h(&self, t: f64) -> DMatrix<f64> {
        (self.h)(t)
    }

    /// `A(t) = H^T Gamma^{-1} H`.
    pub fn a(&self, t: f64) -> Result<DMatrix<f64>> {
        let h = (self.h)(t);
        let gi = (self.gamma)(t)
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("Gamma({t}) is not positive definite")))?
            .inverse();
        Ok(h.transpose() * gi * h)
    }

    fn cell(&self, grid: &TimeGrid, k: usize) -> Result<CellCoefficients> {
        let t = grid.cell_center(k);
        let h = (self.h)(t);
        let gamma_inv = (self.gamma)(t)
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("Gamma({t}) is not positive definite")))?
            .inverse();
        let a = h.transpose() * &gamma_inv * &h;
        Ok(CellCoefficients {
            l: (self.l)(t),
            sigma: (self.sigma)(t),
            h,
            gamma_inv,
            a,
        })
    }

    fn cells(&self, grid: &TimeGrid) -> Result<Vec<CellCoefficients>> {
        (0..grid.n_cells()).map(|k| self.cell(grid, k)).collect()
    }

    /// The same model as a signal for path simulation.
    pub fn signal_model(&self) -> SignalModel {
        let l = self.l.clone();
        let sigma = self.sigma.clone();
        let m0 = self.m0.clone();
        let chol = self.c0.clone().cholesky().expect("checked in new").l();
        let dim = self.dim;
        SignalModel::new(
            dim,
            Arc::new(move |x, t| l(t) * x),
            Arc::new(move |t| symmetric_sqrt(&sigma(t))),
            Arc::new(move |rng| {
                let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
                &m0 + &chol * z
            }),
        )
        .expect("dimensions checked in new")
    }

    /// The observation model `g(x, t) = H(t) x`.
    pub fn observation_model(&self) -> ObservationModel {
        let h = self.h.clone();
        ObservationModel::new(self.obs_dim, Arc::new(move |x, t| h(t) * x), self.gamma.clone())
            .expect("dimensions checked in new")
    }
}

/// `<<M, N>> = sum_ij M_ij N_ij`.
pub fn frobenius(m: &DMatrix<f64>, n: &DMatrix<f64>) -> Result<f64> {
    if m.shape() != n.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", m.shape(), n.shape())));
    }
    Ok(m.component_mul(n).sum())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// Covariance utilities `U(C) = U_final(C(T)) + int_0^T U_int(C(t)) dt`.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixUtility {
    TraceFinal,
    LogDetFinal,
    TraceIntegrated,
    Combination(Vec<(f64, MatrixUtility)>),
}

impl MatrixUtility {
    pub fn final_value(&self, c: &DMatrix<f64>) -> Result<f64> {
        Ok(match self {
            MatrixUtility::TraceFinal => c.trace(),
            MatrixUtility::LogDetFinal => {
                let ch = c
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Singular("log det of a non-positive-definite matrix".into()))?;
                2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
            }
            MatrixUtility::TraceIntegrated => 0.0,
            MatrixUtility::Combination(parts) => {
                let mut s = 0.0;
                for (w, u) in parts {
                    s += w * u.final_value(c)?;
                }
                s
            }
        })
    }

    pub fn integrand_value(&self, c: &DMatrix<f64>) -> f64 {
        match self {
            MatrixUtility::TraceIntegrated => c.trace(),
            MatrixUtility::Combination(parts) => parts.iter().map(|(w, u)| w * u.integrand_value(c)).sum(),
            _ => 0.0,
        }
    }

    fn has_integrand(&self) -> bool {
        match self {
            MatrixUtility::TraceIntegrated => true,
            MatrixUtility::Combination(parts) => parts.iter().any(|(_, u)| u.has_integrand()),
            _ => false,
        }
    }

    /// Derivative of the integrand, in the same convention as
    /// [`utility_derivative`].
    pub fn integrand_derivative(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let n = c.nrows();
        match self {
            MatrixUtility::TraceIntegrated => DMatrix::identity(n, n),
            MatrixUtility::Combination(parts) => parts
                .iter()
                .fold(DMatrix::zeros(n, n), |acc, (w, u)| acc + u.integrand_derivative(c) * *w),
            _ => DMatrix::zeros(n, n),
        }
    }
}

/// Derivative of `U_final` with respect to the independent entries of a
/// symmetric `C`: `I` for the trace and `2 C^{-1} - C^{-1} o I` for the log
/// determinant.
pub fn utility_derivative(c: &DMatrix<f64>, utility: &MatrixUtility) -> Result<DMatrix<f64>> {
    let n = c.nrows();
    Ok(match utility {
        MatrixUtility::TraceFinal => DMatrix::identity(n, n),
        MatrixUtility::LogDetFinal => {
            let inv = c
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Singular("log det derivative needs a positive definite C".into()))?
                .inverse();
            &inv * 2.0 - inv.component_mul(&DMatrix::identity(n, n))
        }
        MatrixUtility::TraceIntegrated => DMatrix::zeros(n, n),
        MatrixUtility::Combination(parts) => {
            let mut acc = DMatrix::zeros(n, n);
            for (w, u) in parts {
                acc += utility_derivative(c, u)? * *w;
            }
            acc
        }
    })
}

/// Entry-wise derivative `D` to the matrix `G` with `dU = <<G, dC>>` for
/// symmetric `dC`: off-diagonal entries are halved.
fn to_gradient(d: &DMatrix<f64>) -> DMatrix<f64> {
    let n = d.nrows();
    (d + d.component_mul(&DMatrix::identity(n, n))) * 0.5
}

/// Filter covariance (and optionally mean) on the nodes of a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePath {
    pub grid: TimeGrid,
    pub c: Vec<DMatrix<f64>>,
    pub m: Option<Vec<DVector<f64>>>,
}

impl CovariancePath {
    pub fn traces(&self) -> Vec<f64> {
        self.c.iter().map(|c| c.trace()).collect()
    }

    pub fn to_table(&self) -> Table {
        let n = self.c[0].nrows();
        let mut headers = vec!["t".to_string()];
        for i in 0..n {
            for j in 0..n {
                headers.push(format!("c{i}{j}"));
            }
        }
        headers.push("trace".into());
        if self.m.is_some() {
            headers.extend((0..n).map(|i| format!("m{i}")));
        }
        let mut t = Table::new(headers);
        for (k, c) in self.c.iter().enumerate() {
            let mut row = vec![self.grid.node(k)];
            for i in 0..n {
                for j in 0..n {
                    row.push(c[(i, j)]);
                }
            }
            row.push(c.trace());
            if let Some(m) = &self.m {
                row.extend(m[k].iter());
            }
            t.push(row);
        }
        t
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_table().write(path)
    }
}

/// Substep covariance and adjoint states of one cell.
type FineCell = Option<(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)>;

/// Matrix adjoint `Lambda(t)` on the nodes of a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixAdjointPath {
    pub grid: TimeGrid,
    pub lambda: Vec<DMatrix<f64>>,
    fine: Vec<FineCell>,
}

impl MatrixAdjointPath {
    /// Adjoint given on the grid nodes only.
    pub fn new(grid: TimeGrid, lambda: Vec<DMatrix<f64>>) -> Self {
        Self {
            grid,
            lambda,
            fine: Vec::new(),
        }
    }

    pub fn to_table(&self) -> Table {
        let n = self.lambda[0].nrows();
        let mut headers = vec!["t".to_string()];
        for i in 0..n {
            for j in 0..n {
                headers.push(format!("lambda{i}{j}"));
            }
        }
        let mut t = Table::new(headers);
        for (k, l) in self.lambda.iter().enumerate() {
            let mut row = vec![self.grid.node(k)];
            for i in 0..n {
                for j in 0..n {
                    row.push(l[(i, j)]);
                }
            }
            t.push(row);
        }
        t
    }
}

fn riccati_rhs(c: &DMatrix<f64>, xi: f64, cell: &CellCoefficients) -> DMatrix<f64> {
    &cell.l * c + c * cell.l.transpose() + &cell.sigma - (c * &cell.a * c) * xi
}

/// Cell coefficients of a model on a fixed grid, flattened for the RK4
/// inner loop. Build once and reuse for many schedules.
///
/// A cell whose stiffness `rho = 2|L| + xi |A| |C|` exceeds `0.5/dt` is
/// split into equal RK4 substeps with `rho h <= 0.5`; the count depends only on the state at the start of
/// the cell, so the adjoint pass can rebuild the same substeps.
#[derive(Debug, Clone)]
pub struct RiccatiSolver {
    n: usize,
    grid: TimeGrid,
    cells: Vec<CellCoefficients>,
    c0: Vec<f64>,
    l: Vec<f64>,
    sigma: Vec<f64>,
    a: Vec<f64>,
}

fn flatten(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    let n = m.nrows();
    (0..n * m.ncols()).map(move |i| m[(i / n, i % n)])
}

fn to_matrix(n: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, v)
}

/// Smallest eigenvalue of a symmetric row-major matrix.
fn min_eig_flat(n: usize, c: &[f64]) -> f64 {
    match n {
        1 => c[0],
        2 => {
            let (p, q, r) = (c[0], c[1], c[3]);
            0.5 * (p + r) - (0.25 * (p - r) * (p - r) + q * q).sqrt()
        }
        _ => min_eigenvalue(&to_matrix(n, c)),
    }
}

impl RiccatiSolver {
    pub fn new(model: &LinearGaussianModel, grid: &TimeGrid) -> Result<Self> {
        let cells = model.cells(grid)?;
        let n = model.dim;
        Ok(Self {
            n,
            grid: *grid,
            c0: flatten(&model.c0).collect(),
            l: cells.iter().flat_map(|c| flatten(&c.l).collect::<Vec<_>>()).collect(),
            sigma: cells.iter().flat_map(|c| flatten(&c.sigma).collect::<Vec<_>>()).collect(),
            a: cells.iter().flat_map(|c| flatten(&c.a).collect::<Vec<_>>()).collect(),
            cells,
        })
    }

    fn substeps(&self, k: usize, c: &[f64], xi: f64) -> Result<usize> {
        let nn = self.n * self.n;
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rho = 2.0 * norm(&self.l[k * nn..(k + 1) * nn]) + xi * norm(&self.a[k * nn..(k + 1) * nn]) * norm(c);
        let m = (rho * self.grid.dt() / STIFF_STEP).ceil().max(1.0);
        if !(m <= MAX_SUBSTEPS as f64) {
            return Err(blowup(self.grid.node(k), format!("Riccati step too stiff (stiffness {rho})")));
        }
        Ok(m as usize)
    }

    fn rk4(&self, k: usize, c: &mut [f64], xi: f64, h: f64, w: &mut Scratch) {
        let nn = self.n * self.n;
        self.rhs(k, c, xi, &mut w.k1, &mut w.tmp);
        for i in 0..nn {
            w.stage[i] = c[i] + 0.5 * h * w.k1[i];
        }
        self.rhs(k, &w.stage, xi, &mut w.k2, &mut w.tmp);
        for i in 0..nn {
            w.stage[i] = c[i] + 0.5 * h * w.k2[i];
        }
        self.rhs(k, &w.stage, xi, &mut w.k3, &mut w.tmp);
        for i in 0..nn {
            w.stage[i] = c[i] + h * w.k3[i];
        }
        self.rhs(k, &w.stage, xi, &mut w.k4, &mut w.tmp);
        for i in 0..nn {
            c[i] += h / 6.0 * (w.k1[i] + 2.0 * w.k2[i] + 2.0 * w.k3[i] + w.k4[i]);
        }
        let n = self.n;
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (c[i * n + j] + c[j * n + i]);
                c[i * n + j] = v;
                c[j * n + i] = v;
            }
        }
    }

    /// Covariance at the substep nodes of cell `k`, or `None` when the cell
    /// is a single step.
    fn fine_states(&self, k: usize, c_start: &DMatrix<f64>, xi: f64) -> Result<Option<Vec<DMatrix<f64>>>> {
        let mut c: Vec<f64> = flatten(c_start).collect();
        let m = self.substeps(k, &c, xi)?;
        if m == 1 {
            return Ok(None);
        }
        let h = self.grid.dt() / m as f64;
        let mut w = Scratch::new(self.n);
        let mut out = vec![c_start.clone()];
        for _ in 0..m {
            self.rk4(k, &mut c, xi, h, &mut w);
            out.push(to_matrix(self.n, &c));
        }
        Ok(Some(out))
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `out = L C + C L^T + Sigma - xi C A C` for symmetric `C`.
    fn rhs(&self, k: usize, c: &[f64], xi: f64, out: &mut [f64], tmp: &mut [f64]) {
        let n = self.n;
        let nn = n * n;
        let l = &self.l[k * nn..(k + 1) * nn];
        let sg = &self.sigma[k * nn..(k + 1) * nn];
        let a = &self.a[k * nn..(k + 1) * nn];
        // tmp = A C
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for m in 0..n {
                    s += a[i * n + m] * c[m * n + j];
                }
                tmp[i * n + j] = s;
            }
        }
        for i in 0..n {
            for j in 0..n {
                let mut lc = 0.0;
                let mut cl = 0.0;
                let mut cac = 0.0;
                for m in 0..n {
                    lc += l[i * n + m] * c[m * n + j];
                    cl += c[i * n + m] * l[j * n + m];
                    cac += c[i * n + m] * tmp[m * n + j];
                }
                out[i * n + j] = lc + cl + sg[i * n + j] - xi * cac;
            }
        }
    }

    /// Riccati trajectory for an arbitrary nonnegative density per cell (no
    /// normalization required, so `xi = 0` is allowed).
    pub fn covariance(&self, density: &[f64]) -> Result<CovariancePath> {
        let mut out = Vec::with_capacity(self.grid.n_steps() + 1);
        self.march(density, |c| out.push(to_matrix(self.n, c)))?;
        Ok(CovariancePath {
            grid: self.grid,
            c: out,
            m: None,
        })
    }

    /// Utility of the covariance trajectory without storing it.
    pub fn utility(&self, density: &[f64], utility: &MatrixUtility) -> Result<f64> {
        let n_steps = self.grid.n_steps();
        let dt = self.grid.dt();
        let has_int = utility.has_integrand();
        let mut k = 0;
        let mut acc = 0.0;
        let mut last = vec![0.0; self.n * self.n];
        self.march(density, |c| {
            if has_int {
                let w = if k == 0 || k == n_steps { 0.5 * dt } else { dt };
                acc += w * utility.integrand_value(&to_matrix(self.n, c));
            }
            if k == n_steps {
                last.copy_from_slice(c);
            }
            k += 1;
        })?;
        Ok(acc + utility.final_value(&to_matrix(self.n, &last))?)
    }

    fn march(&self, density: &[f64], mut visit: impl FnMut(&[f64])) -> Result<()> {
        let grid = &self.grid;
        if density.len() != grid.n_cells() {
            return Err(Error::GridMismatch(format!(
                "{} densities for {} cells",
                density.len(),
                grid.n_cells()
            )));
        }
        let n = self.n;
        let dt = grid.dt();
        let mut c = self.c0.clone();
        let mut w = Scratch::new(n);
        visit(&c);
        for (k, &xi) in density.iter().enumerate() {
            let m = self.substeps(k, &c, xi)?;
            let h = dt / m as f64;
            for _ in 0..m {
                self.rk4(k, &mut c, xi, h, &mut w);
            }
            let t = grid.node(k + 1);
            if c.iter().any(|v| !v.is_finite()) {
                return Err(blowup(t, "Riccati covariance"));
            }
            let lmin = min_eig_flat(n, &c);
            if lmin < -PSD_TOL {
                return Err(blowup(t, format!("covariance lost positive semidefiniteness (min eigenvalue {lmin})")));
            }
            visit(&c);
        }
        Ok(())
    }
}

const MAX_SUBSTEPS: usize = 100_000;
const STIFF_STEP: f64 = 0.1;

#[derive(Debug)]
struct Scratch {
    stage: Vec<f64>,
    tmp: Vec<f64>,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        let z = vec![0.0; n * n];
        Self {
            stage: z.clone(),
            tmp: z.clone(),
            k1: z.clone(),
            k2: z.clone(),
            k3: z.clone(),
            k4: z,
        }
    }
}

/// Riccati trajectory for an arbitrary nonnegative density per cell (no
/// normalization required, so `xi = 0` is allowed).
pub fn integrate_riccati_density(
    model: &LinearGaussianModel,
    grid: &TimeGrid,
    density: &[f64],
) -> Result<CovariancePath> {
    RiccatiSolver::new(model, grid)?.covariance(density)
}

/// Classical RK4 integration of the scheduled Riccati equation from `C0`.
pub fn integrate_riccati(model: &LinearGaussianModel, xi: &SensorSchedule) -> Result<CovariancePath> {
    integrate_riccati_density(model, xi.grid(), xi.density())
}

/// Euler-Maruyama update of the filter mean along an observation path,
/// using the gain `C H^T Gamma^{-1}` at the left node of each cell.
pub fn integrate_mean(
    model: &LinearGaussianModel,
    xi: &SensorSchedule,
    cov: &CovariancePath,
    obs_path: &ObservationPath,
) -> Result<Vec<DVector<f64>>> {
    let grid = xi.grid();
    grid.check_same(&cov.grid, "schedule vs covariance")?;
    grid.check_same(&obs_path.grid, "schedule vs observations")?;
    let dt = grid.dt();
    let mut m = model.m0.clone();
    let mut out = Vec::with_capacity(grid.n_steps() + 1);
    out.push(m.clone());
    for k in 0..grid.n_cells() {
        let cell = model.cell(grid, k)?;
        let innov = &obs_path.increments[k] - &cell.h * &m * (xi.density()[k] * dt);
        m = &m + &cell.l * &m * dt + &cov.c[k] * cell.h.transpose() * &cell.gamma_inv * innov;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(blowup(grid.node(k + 1), "filter mean"));
        }
        out.push(m.clone());
    }
    Ok(out)
}

fn adjoint_rhs(lam: &DMatrix<f64>, c: &DMatrix<f64>, xi: f64, cell: &CellCoefficients, g_int: &DMatrix<f64>) -> DMatrix<f64> {
    // dLambda/dt = -(L^T Lambda + Lambda L - xi (A C Lambda + Lambda C A) + dU_int/dC)
    let ac = &cell.a * c;
    -(cell.l.transpose() * lam + lam * &cell.l - (&ac * lam + lam * ac.transpose()) * xi + g_int)
}

/// `C` at the midpoint of cell `k` by cubic Hermite interpolation with the
/// Riccati right-hand side as the end-point derivative.
fn hermite_mid(c0: &DMatrix<f64>, c1: &DMatrix<f64>, f0: &DMatrix<f64>, f1: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    (c0 + c1) * 0.5 + (f0 - f1) * (dt / 8.0)
}

impl RiccatiSolver {
    /// Adjoint at the substep nodes of cell `k`, marching back from
    /// `lam_end` over the covariance states `states`.
    fn cell_adjoint(
        &self,
        k: usize,
        states: &[DMatrix<f64>],
        lam_end: &DMatrix<f64>,
        xi: f64,
        gint: &dyn Fn(&DMatrix<f64>) -> DMatrix<f64>,
    ) -> Vec<DMatrix<f64>> {
        let cell = &self.cells[k];
        let m = states.len() - 1;
        let h = self.grid.dt() / m as f64;
        let mut out = vec![lam_end.clone(); m + 1];
        let mut lam = lam_end.clone();
        for j in (0..m).rev() {
            let (c0, c1) = (&states[j], &states[j + 1]);
            let cm = hermite_mid(c0, c1, &riccati_rhs(c0, xi, cell), &riccati_rhs(c1, xi, cell), h);
            let (g0, gm, g1) = (gint(c0), gint(&cm), gint(c1));
            let k1 = adjoint_rhs(&lam, c1, xi, cell, &g1);
            let k2 = adjoint_rhs(&(&lam - &k1 * (0.5 * h)), &cm, xi, cell, &gm);
            let k3 = adjoint_rhs(&(&lam - &k2 * (0.5 * h)), &cm, xi, cell, &gm);
            let k4 = adjoint_rhs(&(&lam - &k3 * h), c0, xi, cell, &g0);
            lam = symmetrize(&(&lam - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)));
            out[j] = lam.clone();
        }
        out
    }

    /// RK4 backward march of the matrix adjoint from
    /// `Lambda(T) = dU_final/dC (C(T))`, on the same substeps as the forward
    /// pass.
    pub fn adjoint(&self, cov: &CovariancePath, density: &[f64], utility: &MatrixUtility) -> Result<MatrixAdjointPath> {
        let grid = self.grid;
        grid.check_same(&cov.grid, "solver vs covariance")?;
        if density.len() != grid.n_cells() {
            return Err(Error::GridMismatch("schedule does not match the covariance path".into()));
        }
        let n = grid.n_steps();
        let has_int = utility.has_integrand();
        let gint = |c: &DMatrix<f64>| -> DMatrix<f64> {
            if has_int {
                to_gradient(&utility.integrand_derivative(c))
            } else {
                DMatrix::zeros(c.nrows(), c.ncols())
            }
        };
        let mut lam = to_gradient(&utility_derivative(&cov.c[n], utility)?);
        let mut out = vec![DMatrix::zeros(0, 0); n + 1];
        let mut fine = vec![None; n];
        out[n] = lam.clone();
        for k in (0..n).rev() {
            let xi = density[k];
            let states = self.fine_states(k, &cov.c[k], xi)?;
            let lams = match &states {
                Some(st) => self.cell_adjoint(k, st, &lam, xi, &gint),
                None => self.cell_adjoint(k, &[cov.c[k].clone(), cov.c[k + 1].clone()], &lam, xi, &gint),
            };
            lam = lams[0].clone();
            if lam.iter().any(|v| !v.is_finite()) {
                return Err(blowup(grid.node(k), "matrix adjoint"));
            }
            out[k] = lam.clone();
            if let Some(st) = states {
                fine[k] = Some((st, lams));
            }
        }
        Ok(MatrixAdjointPath {
            grid,
            lambda: out,
            fine,
        })
    }

    /// `eta = -<<Lambda, C A C>>`, averaged over each cell with Simpson's
    /// rule on every substep (midpoint values from cubic Hermite
    /// interpolation of `C` and `Lambda`).
    pub fn gradient(&self, adj: &MatrixAdjointPath, cov: &CovariancePath, density: &[f64]) -> Result<GradientField> {
        let grid = self.grid;
        grid.check_same(&cov.grid, "solver vs covariance")?;
        grid.check_same(&adj.grid, "adjoint vs covariance")?;
        if density.len() != grid.n_cells() || adj.lambda.len() != cov.c.len() {
            return Err(Error::GridMismatch("schedule, adjoint and covariance are not aligned".into()));
        }
        let n = cov.c[0].nrows();
        let zero = DMatrix::zeros(n, n);
        let mut eta = Vec::with_capacity(grid.n_cells());
        for k in 0..grid.n_cells() {
            let cell = &self.cells[k];
            let xi = density[k];
            let pair;
            let (states, lams): (&[DMatrix<f64>], &[DMatrix<f64>]) = match adj.fine.get(k) {
                Some(Some((st, la))) => (st, la),
                _ => {
                    pair = (
                        [cov.c[k].clone(), cov.c[k + 1].clone()],
                        [adj.lambda[k].clone(), adj.lambda[k + 1].clone()],
                    );
                    (&pair.0, &pair.1)
                }
            };
            let m = states.len() - 1;
            let h = grid.dt() / m as f64;
            let f = |l: &DMatrix<f64>, c: &DMatrix<f64>| -l.component_mul(&(c * &cell.a * c)).sum();
            let mut acc = 0.0;
            for j in 0..m {
                let (c0, c1) = (&states[j], &states[j + 1]);
                let (l0, l1) = (&lams[j], &lams[j + 1]);
                let cm = hermite_mid(c0, c1, &riccati_rhs(c0, xi, cell), &riccati_rhs(c1, xi, cell), h);
                // A source term in the adjoint slope cancels in the Hermite
                // midpoint up to O(h^2), so the homogeneous slope suffices.
                let lm = hermite_mid(
                    l0,
                    l1,
                    &adjoint_rhs(l0, c0, xi, cell, &zero),
                    &adjoint_rhs(l1, c1, xi, cell, &zero),
                    h,
                );
                acc += (f(l0, c0) + 4.0 * f(&lm, &cm) + f(l1, c1)) / 6.0;
            }
            eta.push(acc / m as f64);
        }
        GradientField::new(grid, eta)
    }
}

/// RK4 backward march of the matrix adjoint from
/// `Lambda(T) = dU_final/dC (C(T))`.
pub fn adjoint_matrix_backward(
    cov: &CovariancePath,
    xi: &SensorSchedule,
    model: &LinearGaussianModel,
    utility: &MatrixUtility,
) -> Result<MatrixAdjointPath> {
    adjoint_matrix_backward_density(cov, xi.density(), model, utility)
}

pub fn adjoint_matrix_backward_density(
    cov: &CovariancePath,
    density: &[f64],
    model: &LinearGaussianModel,
    utility: &MatrixUtility,
) -> Result<MatrixAdjointPath> {
    RiccatiSolver::new(model, &cov.grid)?.adjoint(cov, density, utility)
}

/// Schedule gradient `eta = -<<Lambda, C A C>>` per cell.
pub fn lg_gradient(
    adj: &MatrixAdjointPath,
    cov: &CovariancePath,
    model: &LinearGaussianModel,
    xi: &SensorSchedule,
) -> Result<GradientField> {
    lg_gradient_density(adj, cov, model, xi.density())
}

pub fn lg_gradient_density(
    adj: &MatrixAdjointPath,
    cov: &CovariancePath,
    model: &LinearGaussianModel,
    density: &[f64],
) -> Result<GradientField> {
    RiccatiSolver::new(model, &cov.grid)?.gradient(adj, cov, density)
}

/// `U_final(C(T)) + trapezoid of U_int(C(t_k))`.
pub fn utility_value(cov: &CovariancePath, utility: &MatrixUtility) -> Result<f64> {
    let n = cov.c.len() - 1;
    let mut u = utility.final_value(&cov.c[n])?;
    if utility.has_integrand() {
        let dt = cov.grid.dt();
        for (k, c) in cov.c.iter().enumerate() {
            let w = if k == 0 || k == n { 0.5 * dt } else { dt };
            u += w * utility.integrand_value(c);
        }
    }
    Ok(u)
}

/// Exact gradient of a covariance utility at a schedule density.
pub fn lg_gradient_for(
    model: &LinearGaussianModel,
    grid: &TimeGrid,
    density: &[f64],
    utility: &MatrixUtility,
) -> Result<(GradientField, f64)> {
    let solver = RiccatiSolver::new(model, grid)?;
    let cov = solver.covariance(density)?;
    let adj = solver.adjoint(&cov, density, utility)?;
    Ok((solver.gradient(&adj, &cov, density)?, utility_value(&cov, utility)?))
}
