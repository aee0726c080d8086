//! Thermostatic (Poisson) temperature dynamics in one dimension.
//!
//! The mean satisfies `mu''(s) = w(s; gamma)` on `(s_1, s_N)` with
//! Dirichlet values at both ends, discretized by the three-point second
//! difference on the uniformly spaced measurement grid:
//!
//! ```text
//! [ 1              ] [mu_1]   [ w_1                ]
//! [ 1  -2  1       ] [mu_2]   [ eps^2 w(s_2;gamma) ]
//! [    ..  ..  ..  ] [ .. ] = [ ..                 ]
//! [       1  -2  1 ] [    ]   [ eps^2 w(s_{N-1})   ]
//! [              1 ] [mu_N]   [ w_N                ]
//! ```
//!
//! The heat source family is `w(s; gamma) = -A omega^2 sin(omega s + phi)`
//! with `gamma = (A, omega, phi)`.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use super::{scalar_locations, solve_tridiagonal, HyperBox, SpatialDynamics};
use crate::error::{Error, Result};
use crate::model::RegressionGrid;

/// Relative tolerance for the uniform-spacing check.
const SPACING_RTOL: f64 = 1e-9;

/// Residual acceptance for the tridiagonal solve.
const SOLVE_RTOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Poisson1D {
    locations: Vec<f64>,
    spacing: f64,
    boundary: (f64, f64),
    domain: HyperBox,
}

impl Poisson1D {
    /// Default hyperparameter box: amplitude in [0, 20] (sign pinned to
    /// resolve the (A, phi) reflection), frequency in [0.1, 10], phase in
    /// [-pi, pi].
    pub fn default_domain() -> HyperBox {
        HyperBox::new(vec![0.0, 0.1, -PI], vec![20.0, 10.0, PI]).expect("static bounds")
    }

    pub fn new(locations: &[Vec<f64>], w_start: f64, w_end: f64) -> Result<Self> {
        let xs = scalar_locations(locations)?;
        if xs.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "Poisson dynamics need at least 3 points, got {}",
                xs.len()
            )));
        }
        if !(w_start.is_finite() && w_end.is_finite()) {
            return Err(Error::InvalidInput("boundary values must be finite".into()));
        }
        let spacing = xs[1] - xs[0];
        if !(spacing > 0.0) {
            return Err(Error::InvalidInput("locations must be strictly increasing".into()));
        }
        for w in xs.windows(2) {
            let gap = w[1] - w[0];
            if !(gap > 0.0) {
                return Err(Error::InvalidInput("locations must be strictly increasing".into()));
            }
            if (gap - spacing).abs() > SPACING_RTOL * spacing.abs() {
                return Err(Error::InvalidInput(format!(
                    "locations must be uniformly spaced; found gaps {spacing} and {gap}"
                )));
            }
        }
        Ok(Self { locations: xs, spacing, boundary: (w_start, w_end), domain: Self::default_domain() })
    }

    pub fn with_domain(mut self, domain: HyperBox) -> Result<Self> {
        if domain.dim() != 3 {
            return Err(Error::DimensionMismatch { expected: 3, got: domain.dim() });
        }
        self.domain = domain;
        Ok(self)
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn boundary(&self) -> (f64, f64) {
        self.boundary
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    /// Heat source `w(s; gamma) = -A omega^2 sin(omega s + phi)`.
    pub fn source(&self, s: f64, gamma: &[f64]) -> f64 {
        let (a, omega, phi) = (gamma[0], gamma[1], gamma[2]);
        -a * omega * omega * (omega * s + phi).sin()
    }

    /// Partial derivatives of the source with respect to (A, omega, phi).
    pub fn source_partials(&self, s: f64, gamma: &[f64]) -> [f64; 3] {
        let (a, omega, phi) = (gamma[0], gamma[1], gamma[2]);
        let arg = omega * s + phi;
        let (sin, cos) = arg.sin_cos();
        [
            -omega * omega * sin,
            -2.0 * a * omega * sin - a * omega * omega * s * cos,
            -a * omega * omega * cos,
        ]
    }

    fn check_gamma(&self, gamma: &[f64]) -> Result<()> {
        if gamma.len() != 3 {
            return Err(Error::DimensionMismatch { expected: 3, got: gamma.len() });
        }
        Ok(())
    }

    /// Right-hand side of the discretized system.
    fn rhs(&self, gamma: &[f64]) -> Vec<f64> {
        let n = self.locations.len();
        let eps2 = self.spacing * self.spacing;
        let mut b = Vec::with_capacity(n);
        b.push(self.boundary.0);
        for i in 1..n - 1 {
            b.push(eps2 * self.source(self.locations[i], gamma));
        }
        b.push(self.boundary.1);
        b
    }

    /// Solve the discretized system for a given right-hand side and check
    /// the residual at solver tolerance.
    fn solve_system(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.locations.len();
        let mut lower = vec![1.0; n - 1];
        let mut upper = vec![1.0; n - 1];
        lower[n - 2] = 0.0;
        upper[0] = 0.0;
        let mut diag = vec![-2.0; n];
        diag[0] = 1.0;
        diag[n - 1] = 1.0;
        let mu = solve_tridiagonal(&lower, &diag, &upper, b)?;

        let scale = 1.0 + b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = (mu[0] - b[0]).abs().max((mu[n - 1] - b[n - 1]).abs());
        for i in 1..n - 1 {
            let r = mu[i + 1] - 2.0 * mu[i] + mu[i - 1] - b[i];
            worst = worst.max(r.abs());
        }
        if worst > SOLVE_RTOL * scale {
            return Err(Error::SolverFailure(format!(
                "tridiagonal residual {worst:e} above tolerance"
            )));
        }
        Ok(mu)
    }

    /// Second-difference row for three general abscissae; exact for the
    /// quadratic interpolant through them.
    fn nonuniform_stencil(h_minus: f64, h_plus: f64) -> (f64, f64, f64) {
        let span = h_minus + h_plus;
        (2.0 / (h_minus * span), -2.0 / (h_minus * h_plus), 2.0 / (h_plus * span))
    }

    /// Value at one point strictly inside a measurement subinterval:
    /// the non-uniform stencil collocated against the coarse mean values
    /// at both ends. Each point is solved on its own, so the result does
    /// not depend on which other points are queried alongside it and a
    /// node can compute it from its neighborhood alone.
    fn value_between(&self, left: usize, target: f64, gamma: &[f64], mu_coarse: &[f64]) -> f64 {
        let (x0, x1) = (self.locations[left], self.locations[left + 1]);
        let (cl, cm, cr) = Self::nonuniform_stencil(target - x0, x1 - target);
        (self.source(target, gamma) - cl * mu_coarse[left] - cr * mu_coarse[left + 1]) / cm
    }
}

impl SpatialDynamics for Poisson1D {
    fn num_points(&self) -> usize {
        self.locations.len()
    }

    fn hyper_dim(&self) -> usize {
        3
    }

    fn domain(&self) -> &HyperBox {
        &self.domain
    }

    fn residual(&self, mu: &[f64], gamma: &[f64]) -> Result<Vec<f64>> {
        self.check_gamma(gamma)?;
        let n = self.locations.len();
        if mu.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: mu.len() });
        }
        let eps2 = self.spacing * self.spacing;
        let mut f = Vec::with_capacity(n);
        f.push(mu[0] - self.boundary.0);
        for i in 1..n - 1 {
            f.push((mu[i + 1] - 2.0 * mu[i] + mu[i - 1]) / eps2 - self.source(self.locations[i], gamma));
        }
        f.push(mu[n - 1] - self.boundary.1);
        Ok(f)
    }

    fn solve_mean(&self, gamma: &[f64]) -> Result<Vec<f64>> {
        self.check_gamma(gamma)?;
        self.solve_system(&self.rhs(gamma))
    }

    fn mean_jacobian(&self, gamma: &[f64]) -> Result<DMatrix<f64>> {
        self.check_gamma(gamma)?;
        let n = self.locations.len();
        let eps2 = self.spacing * self.spacing;
        let mut jac = DMatrix::zeros(n, 3);
        for k in 0..3 {
            let mut b = vec![0.0; n];
            for i in 1..n - 1 {
                b[i] = eps2 * self.source_partials(self.locations[i], gamma)[k];
            }
            let col = self.solve_system(&b)?;
            for i in 0..n {
                jac[(i, k)] = col[i];
            }
        }
        Ok(jac)
    }

    fn regression_mean(&self, gamma: &[f64], grid: &RegressionGrid) -> Result<Vec<f64>> {
        self.check_gamma(gamma)?;
        let targets = scalar_locations(grid.points())?;
        let (lo, hi) = (self.locations[0], self.locations[self.locations.len() - 1]);
        for &t in &targets {
            if t < lo || t > hi {
                return Err(Error::InvalidInput(format!(
                    "regression point {t} outside the boundary interval [{lo}, {hi}]"
                )));
            }
        }
        let mu = self.solve_mean(gamma)?;

        // Points that coincide with a measurement point take its coarse
        // value, so the regression mean agrees with solve_mean wherever
        // they overlap; strictly interior points collocate against their
        // subinterval's coarse end values.
        let mut out = Vec::with_capacity(targets.len());
        for &t in &targets {
            if let Ok(i) = self.locations.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
                out.push(mu[i]);
            } else {
                let left = self.locations.partition_point(|&x| x < t) - 1;
                out.push(self.value_between(left, t, gamma, &mu));
            }
        }
        Ok(out)
    }

    fn mean_neighbors(&self, i: usize) -> Vec<usize> {
        let n = self.locations.len();
        if i == 0 || i == n - 1 {
            vec![i]
        } else {
            vec![i - 1, i, i + 1]
        }
    }

    fn linear_basis(&self) -> Option<&DMatrix<f64>> {
        None
    }
}
