//! Compactly supported covariance kernel and assembly of the sparse
//! covariance matrices between measurement and regression points.
//!
//! The kernel is exactly zero at or beyond its support length, so every
//! covariance matrix built here carries true structural zeros and the
//! sparsity pattern of the train-train matrix coincides with the
//! interaction graph.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::RegressionGrid;
use crate::sparse::SparseCovariance;

/// Isotropic compactly supported kernel
/// `k(r) = sigma_f^2 * [ (2 + cos(2*pi*r/l)) / 3 * (1 - r/l) + sin(2*pi*r/l) / (2*pi) ]`
/// for `r < l`, exactly zero otherwise.
///
/// `k(0) = sigma_f^2`, the function is C^2 and positive definite, and the
/// cut-off at the support length is exact rather than numerically small.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CompactKernel {
    signal_variance: f64,
    support_length: f64,
}

impl CompactKernel {
    pub fn new(signal_variance: f64, support_length: f64) -> Result<Self> {
        if !(signal_variance > 0.0) || !signal_variance.is_finite() {
            return Err(Error::InvalidInput(format!(
                "signal variance must be positive, got {signal_variance}"
            )));
        }
        if !(support_length > 0.0) || !support_length.is_finite() {
            return Err(Error::InvalidInput(format!(
                "support length must be positive, got {support_length}"
            )));
        }
        Ok(Self { signal_variance, support_length })
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn support_length(&self) -> f64 {
        self.support_length
    }

    /// Euclidean distance between two coordinates of equal dimension.
    fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
        }
        Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
    }

    /// Kernel value between two points; exactly 0.0 at `r >= support_length`.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let r = Self::distance(a, b)?;
        Ok(self.eval_at_distance(r))
    }

    fn eval_at_distance(&self, r: f64) -> f64 {
        let l = self.support_length;
        if r >= l {
            return 0.0;
        }
        let u = 2.0 * PI * r / l;
        self.signal_variance * ((2.0 + u.cos()) / 3.0 * (1.0 - r / l) + u.sin() / (2.0 * PI))
    }

    /// Train-train covariance: `(i, j) -> k(s_i, s_j)`, N x N, storing
    /// only nonzeros. Entries for `i <= j` are mirrored so symmetry is
    /// bit-exact.
    pub fn train_covariance(&self, locations: &[Vec<f64>]) -> Result<SparseCovariance> {
        let n = locations.len();
        let mut entries = Vec::new();
        for i in 0..n {
            for j in i..n {
                let v = self.eval(&locations[i], &locations[j])?;
                if v != 0.0 {
                    entries.push((i, j, v));
                    if i != j {
                        entries.push((j, i, v));
                    }
                }
            }
        }
        SparseCovariance::from_entries(n, n, entries)
    }

    /// Cross covariance between regression and measurement points:
    /// `(m, i) -> k(s^R_m, s_i)`, M x N. Row `m`'s neighbor list is the
    /// effective neighborhood of regression point `m`.
    pub fn cross_covariance(
        &self,
        grid: &RegressionGrid,
        locations: &[Vec<f64>],
    ) -> Result<SparseCovariance> {
        let mut entries = Vec::new();
        for (m, p) in grid.points().iter().enumerate() {
            for (i, s) in locations.iter().enumerate() {
                let v = self.eval(p, s)?;
                if v != 0.0 {
                    entries.push((m, i, v));
                }
            }
        }
        SparseCovariance::from_entries(grid.len(), locations.len(), entries)
    }

    /// Grid-grid covariance, M x M.
    pub fn grid_covariance(&self, grid: &RegressionGrid) -> Result<SparseCovariance> {
        self.train_covariance(grid.points())
    }
}

/// The three covariance blocks a scenario needs, assembled once.
#[derive(Debug, Clone)]
pub struct CovarianceSet {
    /// N x N train-train block.
    pub kss: SparseCovariance,
    /// M x N regression-train block.
    pub krs: SparseCovariance,
    /// M x M regression-regression block.
    pub krr: SparseCovariance,
}

impl CovarianceSet {
    pub fn assemble(
        kernel: &CompactKernel,
        locations: &[Vec<f64>],
        grid: &RegressionGrid,
    ) -> Result<Self> {
        Ok(Self {
            kss: kernel.train_covariance(locations)?,
            krs: kernel.cross_covariance(grid, locations)?,
            krr: kernel.grid_covariance(grid)?,
        })
    }
}
