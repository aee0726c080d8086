//! Spatial dynamics: parametrized residual systems that define the
//! Gaussian-process mean at the measurement points.
//!
//! A model exposes the residual `F_i`, the mean solve, its Jacobian with
//! respect to the hyperparameters, and mean evaluation at regression
//! points. Two concrete models ship: a discretized 1-D Poisson problem
//! (temperature) and a natural cubic interpolating spline.

mod poisson;
mod spline;

pub use poisson::Poisson1D;
pub use spline::NaturalSpline;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::RegressionGrid;

/// Box domain for hyperparameters; entries may be infinite on either side.
/// JSON has no infinities, so unbounded sides travel as null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HyperBoxRepr", into = "HyperBoxRepr")]
pub struct HyperBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HyperBoxRepr {
    lower: Vec<Option<f64>>,
    upper: Vec<Option<f64>>,
}

impl From<HyperBox> for HyperBoxRepr {
    fn from(b: HyperBox) -> Self {
        let wrap = |v: Vec<f64>| v.into_iter().map(|x| x.is_finite().then_some(x)).collect();
        Self { lower: wrap(b.lower), upper: wrap(b.upper) }
    }
}

impl TryFrom<HyperBoxRepr> for HyperBox {
    type Error = String;

    fn try_from(r: HyperBoxRepr) -> std::result::Result<Self, String> {
        let lower = r.lower.into_iter().map(|o| o.unwrap_or(f64::NEG_INFINITY)).collect();
        let upper = r.upper.into_iter().map(|o| o.unwrap_or(f64::INFINITY)).collect();
        HyperBox::new(lower, upper).map_err(|e| e.to_string())
    }
}

impl HyperBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        let mut b = Self { lower, upper };
        b.normalize();
        for (l, u) in b.lower.iter().zip(&b.upper) {
            if l > u {
                return Err(Error::InvalidInput(format!("empty box: lower {l} > upper {u}")));
            }
        }
        Ok(b)
    }

    /// Fully unbounded box of the given dimension.
    pub fn unbounded(dim: usize) -> Self {
        Self { lower: vec![f64::NEG_INFINITY; dim], upper: vec![f64::INFINITY; dim] }
    }

    fn normalize(&mut self) {
        for l in &mut self.lower {
            if l.is_nan() {
                *l = f64::NEG_INFINITY;
            }
        }
        for u in &mut self.upper {
            if u.is_nan() {
                *u = f64::INFINITY;
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, values: &[f64]) -> bool {
        values.len() == self.dim()
            && values
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| v.is_finite() && v >= l && v <= u)
    }

    /// Project onto the box, entrywise.
    pub fn clamp(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| v.max(*l).min(*u))
            .collect()
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.iter().chain(&self.upper).all(|v| v.is_finite())
    }

    /// Uniform sample; requires finite bounds on every entry.
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Result<Vec<f64>> {
        if !self.is_bounded() {
            return Err(Error::InvalidInput(
                "cannot sample from an unbounded hyperparameter box".into(),
            ));
        }
        Ok(self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| if l == u { l } else { rng.random_range(l..u) })
            .collect())
    }
}

/// Hyperparameter vector together with its admissible box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub values: Vec<f64>,
    pub domain: HyperBox,
}

impl Hyperparameters {
    pub fn new(values: Vec<f64>, domain: HyperBox) -> Result<Self> {
        if values.len() != domain.dim() {
            return Err(Error::DimensionMismatch { expected: domain.dim(), got: values.len() });
        }
        if !domain.contains(&values) {
            return Err(Error::InvalidInput(format!(
                "hyperparameters {values:?} outside their domain"
            )));
        }
        Ok(Self { values, domain })
    }
}

/// Behavioral contract of a spatial dynamics model over N measurement
/// points with a p-dimensional hyperparameter vector.
pub trait SpatialDynamics {
    /// Number of measurement points N.
    fn num_points(&self) -> usize;

    /// Hyperparameter dimension p.
    fn hyper_dim(&self) -> usize;

    /// Admissible hyperparameter box.
    fn domain(&self) -> &HyperBox;

    /// Residual vector `F(mu, gamma)`, one entry per node; entry `i`
    /// reads only `mu[j]` for `j` in `mean_neighbors(i)`.
    fn residual(&self, mu: &[f64], gamma: &[f64]) -> Result<Vec<f64>>;

    /// Mean at the measurement points: the unique `mu` with
    /// `residual(mu, gamma) = 0` up to solver tolerance.
    fn solve_mean(&self, gamma: &[f64]) -> Result<Vec<f64>>;

    /// `d mu / d gamma`, N x p.
    fn mean_jacobian(&self, gamma: &[f64]) -> Result<DMatrix<f64>>;

    /// Mean at regression points.
    fn regression_mean(&self, gamma: &[f64], grid: &RegressionGrid) -> Result<Vec<f64>>;

    /// Sorted node ids whose mean values enter `F_i`, self included.
    fn mean_neighbors(&self, i: usize) -> Vec<usize>;

    /// For models whose mean is linear in gamma, the N x p basis with
    /// `mu = B * gamma`; `None` otherwise.
    fn linear_basis(&self) -> Option<&DMatrix<f64>>;
}

/// The shipped dynamics models. The network simulator consumes this enum
/// because it needs each model's per-node stencil structure; the
/// estimator only sees the [`SpatialDynamics`] trait.
#[derive(Debug, Clone)]
pub enum DynamicsModel {
    Poisson(Poisson1D),
    Spline(NaturalSpline),
}

impl SpatialDynamics for DynamicsModel {
    fn num_points(&self) -> usize {
        match self {
            DynamicsModel::Poisson(p) => p.num_points(),
            DynamicsModel::Spline(s) => s.num_points(),
        }
    }

    fn hyper_dim(&self) -> usize {
        match self {
            DynamicsModel::Poisson(p) => p.hyper_dim(),
            DynamicsModel::Spline(s) => s.hyper_dim(),
        }
    }

    fn domain(&self) -> &HyperBox {
        match self {
            DynamicsModel::Poisson(p) => p.domain(),
            DynamicsModel::Spline(s) => s.domain(),
        }
    }

    fn residual(&self, mu: &[f64], gamma: &[f64]) -> Result<Vec<f64>> {
        match self {
            DynamicsModel::Poisson(p) => p.residual(mu, gamma),
            DynamicsModel::Spline(s) => s.residual(mu, gamma),
        }
    }

    fn solve_mean(&self, gamma: &[f64]) -> Result<Vec<f64>> {
        match self {
            DynamicsModel::Poisson(p) => p.solve_mean(gamma),
            DynamicsModel::Spline(s) => s.solve_mean(gamma),
        }
    }

    fn mean_jacobian(&self, gamma: &[f64]) -> Result<DMatrix<f64>> {
        match self {
            DynamicsModel::Poisson(p) => p.mean_jacobian(gamma),
            DynamicsModel::Spline(s) => s.mean_jacobian(gamma),
        }
    }

    fn regression_mean(&self, gamma: &[f64], grid: &RegressionGrid) -> Result<Vec<f64>> {
        match self {
            DynamicsModel::Poisson(p) => p.regression_mean(gamma, grid),
            DynamicsModel::Spline(s) => s.regression_mean(gamma, grid),
        }
    }

    fn mean_neighbors(&self, i: usize) -> Vec<usize> {
        match self {
            DynamicsModel::Poisson(p) => p.mean_neighbors(i),
            DynamicsModel::Spline(s) => s.mean_neighbors(i),
        }
    }

    fn linear_basis(&self) -> Option<&DMatrix<f64>> {
        match self {
            DynamicsModel::Poisson(p) => p.linear_basis(),
            DynamicsModel::Spline(s) => s.linear_basis(),
        }
    }
}

/// Require scalar coordinates; the shipped dynamics are 1-D.
pub(crate) fn scalar_locations(locations: &[Vec<f64>]) -> Result<Vec<f64>> {
    locations
        .iter()
        .map(|p| {
            if p.len() != 1 {
                Err(Error::InvalidInput(format!(
                    "shipped dynamics support 1-D locations only, got dimension {}",
                    p.len()
                )))
            } else {
                Ok(p[0])
            }
        })
        .collect()
}

/// Thomas algorithm for a general tridiagonal system.
/// `lower[i]` couples row `i+1` to unknown `i`; `upper[i]` couples row `i`
/// to unknown `i+1`.
pub(crate) fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let n = diag.len();
    if n == 0 || lower.len() != n - 1 || upper.len() != n - 1 || rhs.len() != n {
        return Err(Error::InvalidInput("inconsistent tridiagonal system shape".into()));
    }
    let mut d = diag.to_vec();
    let mut b = rhs.to_vec();
    for i in 1..n {
        if d[i - 1] == 0.0 {
            return Err(Error::SolverFailure(format!("zero pivot in tridiagonal row {}", i - 1)));
        }
        let m = lower[i - 1] / d[i - 1];
        d[i] -= m * upper[i - 1];
        b[i] -= m * b[i - 1];
    }
    if d[n - 1] == 0.0 {
        return Err(Error::SolverFailure(format!("zero pivot in tridiagonal row {}", n - 1)));
    }
    let mut x = vec![0.0; n];
    x[n - 1] = b[n - 1] / d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = (b[i] - upper[i] * x[i + 1]) / d[i];
    }
    Ok(x)
}
