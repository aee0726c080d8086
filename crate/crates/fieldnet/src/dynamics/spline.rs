//! Interpolating dynamics: the mean is a natural cubic spline through
//! control points chosen among the measurement locations, with the spline
//! values at the control points as hyperparameters.
//!
//! The mean is linear in gamma: `mu(s) = b(s) . gamma`, where the basis
//! vector collects the cardinal natural splines. Outside the knot span the
//! first/last cubic polynomial extends.

use nalgebra::DMatrix;

use super::{scalar_locations, solve_tridiagonal, HyperBox, SpatialDynamics};
use crate::error::{Error, Result};
use crate::model::RegressionGrid;

#[derive(Debug, Clone)]
pub struct NaturalSpline {
    locations: Vec<f64>,
    knots: Vec<f64>,
    knot_indices: Vec<usize>,
    /// Q x Q map from gamma to knot second derivatives (natural rows zero).
    curvature: DMatrix<f64>,
    /// N x Q basis evaluated at the measurement points.
    basis_train: DMatrix<f64>,
    domain: HyperBox,
}

impl NaturalSpline {
    /// `knot_indices` are 0-based positions into `locations` and must give
    /// strictly increasing control points.
    pub fn new(locations: &[Vec<f64>], knot_indices: &[usize]) -> Result<Self> {
        let xs = scalar_locations(locations)?;
        if knot_indices.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "spline needs at least 2 control points, got {}",
                knot_indices.len()
            )));
        }
        Self::build(xs, knot_indices)
    }

    /// Degenerate single-knot spline: a constant mean, `mu(s) = gamma_1`
    /// everywhere. The one shipped model that works on a single node.
    pub fn constant(locations: &[Vec<f64>]) -> Result<Self> {
        let xs = scalar_locations(locations)?;
        if xs.is_empty() {
            return Err(Error::InvalidInput("constant spline needs at least one location".into()));
        }
        Self::build(xs, &[0])
    }

    fn build(xs: Vec<f64>, knot_indices: &[usize]) -> Result<Self> {
        let mut knots = Vec::with_capacity(knot_indices.len());
        for &idx in knot_indices {
            let x = *xs.get(idx).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "knot index {idx} out of range for {} locations",
                    xs.len()
                ))
            })?;
            knots.push(x);
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("control points must be strictly increasing".into()));
        }

        let curvature = curvature_map(&knots)?;
        let q = knots.len();
        let mut basis_train = DMatrix::zeros(xs.len(), q);
        for (i, &s) in xs.iter().enumerate() {
            let b = basis_row(&knots, &curvature, s);
            for k in 0..q {
                basis_train[(i, k)] = b[k];
            }
        }
        Ok(Self {
            locations: xs,
            knots,
            knot_indices: knot_indices.to_vec(),
            curvature,
            basis_train,
            domain: HyperBox::unbounded(q),
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn knot_indices(&self) -> &[usize] {
        &self.knot_indices
    }

    pub fn locations(&self) -> &[f64] {
        &self.locations
    }

    /// Basis vector `b(s)` with `mu(s; gamma) = b(s) . gamma`.
    pub fn basis(&self, s: f64) -> Vec<f64> {
        basis_row(&self.knots, &self.curvature, s)
    }

    fn check_gamma(&self, gamma: &[f64]) -> Result<()> {
        if gamma.len() != self.knots.len() {
            return Err(Error::DimensionMismatch { expected: self.knots.len(), got: gamma.len() });
        }
        Ok(())
    }
}

/// Solve the natural-spline curvature system once per knot layout: returns
/// S with second derivatives `M = S * gamma`. Rows 0 and Q-1 are zero (the
/// natural end conditions).
fn curvature_map(knots: &[f64]) -> Result<DMatrix<f64>> {
    let q = knots.len();
    let mut s = DMatrix::zeros(q, q);
    if q <= 2 {
        return Ok(s);
    }
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let m = q - 2;
    let mut lower = Vec::with_capacity(m.saturating_sub(1));
    let mut diag = Vec::with_capacity(m);
    let mut upper = Vec::with_capacity(m.saturating_sub(1));
    for j in 1..=m {
        diag.push((h[j - 1] + h[j]) / 3.0);
        if j > 1 {
            lower.push(h[j - 1] / 6.0);
        }
        if j < m {
            upper.push(h[j] / 6.0);
        }
    }
    // One solve per unit gamma: rhs_j = second divided difference of e_k.
    for k in 0..q {
        let mut rhs = vec![0.0; m];
        for j in 1..=m {
            let mut r = 0.0;
            if k == j + 1 {
                r += 1.0 / h[j];
            }
            if k == j {
                r -= 1.0 / h[j - 1] + 1.0 / h[j];
            }
            if k == j - 1 {
                r += 1.0 / h[j - 1];
            }
            rhs[j - 1] = r;
        }
        let col = solve_tridiagonal(&lower, &diag, &upper, &rhs)?;
        for j in 1..=m {
            s[(j, k)] = col[j - 1];
        }
    }
    Ok(s)
}

/// Evaluate the basis row at `s`. For `s` outside the knot span the end
/// polynomial extends.
fn basis_row(knots: &[f64], curvature: &DMatrix<f64>, s: f64) -> Vec<f64> {
    let q = knots.len();
    if q == 1 {
        return vec![1.0];
    }
    let seg = if s < knots[1] {
        0
    } else if s >= knots[q - 2] {
        q - 2
    } else {
        knots.partition_point(|&c| c <= s) - 1
    };
    let h = knots[seg + 1] - knots[seg];
    let t0 = s - knots[seg];
    let t1 = knots[seg + 1] - s;
    // t (t^2 - h^2) / (6h) vanishes exactly at both knots.
    let w_left = t1 * (t1 * t1 - h * h) / (6.0 * h);
    let w_right = t0 * (t0 * t0 - h * h) / (6.0 * h);

    let mut b = vec![0.0; q];
    b[seg] = t1 / h;
    b[seg + 1] = t0 / h;
    if w_left != 0.0 {
        for k in 0..q {
            b[k] += w_left * curvature[(seg, k)];
        }
    }
    if w_right != 0.0 {
        for k in 0..q {
            b[k] += w_right * curvature[(seg + 1, k)];
        }
    }
    b
}

impl SpatialDynamics for NaturalSpline {
    fn num_points(&self) -> usize {
        self.locations.len()
    }

    fn hyper_dim(&self) -> usize {
        self.knots.len()
    }

    fn domain(&self) -> &HyperBox {
        &self.domain
    }

    fn residual(&self, mu: &[f64], gamma: &[f64]) -> Result<Vec<f64>> {
        self.check_gamma(gamma)?;
        if mu.len() != self.locations.len() {
            return Err(Error::DimensionMismatch {
                expected: self.locations.len(),
                got: mu.len(),
            });
        }
        Ok((0..mu.len())
            .map(|i| {
                let fitted: f64 =
                    (0..gamma.len()).map(|k| self.basis_train[(i, k)] * gamma[k]).sum();
                mu[i] - fitted
            })
            .collect())
    }

    fn solve_mean(&self, gamma: &[f64]) -> Result<Vec<f64>> {
        self.check_gamma(gamma)?;
        let g = nalgebra::DVector::from_column_slice(gamma);
        Ok((&self.basis_train * g).iter().copied().collect())
    }

    fn mean_jacobian(&self, gamma: &[f64]) -> Result<DMatrix<f64>> {
        self.check_gamma(gamma)?;
        Ok(self.basis_train.clone())
    }

    fn regression_mean(&self, gamma: &[f64], grid: &RegressionGrid) -> Result<Vec<f64>> {
        self.check_gamma(gamma)?;
        let targets = scalar_locations(grid.points())?;
        Ok(targets
            .iter()
            .map(|&s| self.basis(s).iter().zip(gamma).map(|(b, g)| b * g).sum())
            .collect())
    }

    fn mean_neighbors(&self, i: usize) -> Vec<usize> {
        vec![i]
    }

    fn linear_basis(&self) -> Option<&DMatrix<f64>> {
        Some(&self.basis_train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    /// Twelve sensors in five clusters with knots at positions 0, 2, 4, 6
    /// and 11, mirroring the interpolating scenario layout.
    fn clustered() -> (NaturalSpline, Vec<f64>) {
        let xs = vec![
            -15.0, -14.2, -8.5, -7.8, -1.5, -0.7, 4.8, 5.5, 6.2, 12.6, 13.3, 14.0,
        ];
        let locs: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let sp = NaturalSpline::new(&locs, &[0, 2, 4, 6, 11]).unwrap();
        (sp, xs)
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let locs: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!(NaturalSpline::new(&locs, &[1]).is_err());
        assert!(NaturalSpline::new(&locs, &[2, 0]).is_err());
        assert!(NaturalSpline::new(&locs, &[0, 9]).is_err());
        let two_d = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        assert!(NaturalSpline::new(&two_d, &[0, 1]).is_err());
    }

    #[test]
    fn constant_model_is_flat_everywhere() {
        let sp = NaturalSpline::constant(&[vec![0.3]]).unwrap();
        assert_eq!(sp.hyper_dim(), 1);
        assert_eq!(sp.basis(-100.0), vec![1.0]);
        assert_eq!(sp.basis(7.0), vec![1.0]);
        assert_eq!(sp.solve_mean(&[4.2]).unwrap(), vec![4.2]);
    }

    #[test]
    fn knot_selection_matches_indices() {
        let (sp, xs) = clustered();
        assert_eq!(sp.knots(), &[xs[0], xs[2], xs[4], xs[6], xs[11]]);
    }

    #[test]
    fn constant_gamma_gives_constant_spline() {
        let (sp, _) = clustered();
        let gamma = vec![1.0; 5];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let s = rng.random_range(-20.0..20.0);
            let val: f64 = sp.basis(s).iter().zip(&gamma).map(|(b, g)| b * g).sum();
            assert_abs_diff_eq!(val, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn basis_at_knot_is_standard_basis_vector() {
        let (sp, _) = clustered();
        for (j, &c) in sp.knots().iter().enumerate() {
            let b = sp.basis(c);
            for (k, &v) in b.iter().enumerate() {
                assert_eq!(v, if k == j { 1.0 } else { 0.0 }, "basis({c})[{k}]");
            }
        }
    }

    #[test]
    fn basis_rows_sum_to_one() {
        let (sp, _) = clustered();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s = rng.random_range(-18.0..18.0);
            let total: f64 = sp.basis(s).iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cardinal_interpolation_at_control_points() {
        let (sp, _) = clustered();
        for j in 0..5 {
            let mut gamma = vec![0.0; 5];
            gamma[j] = 1.0;
            let mu = sp.solve_mean(&gamma).unwrap();
            for (k, &idx) in sp.knot_indices().iter().enumerate() {
                assert_abs_diff_eq!(mu[idx], if k == j { 1.0 } else { 0.0 }, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn continuity_up_to_second_derivative_at_interior_knots() {
        let (sp, _) = clustered();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let gamma: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let eval = |s: f64| -> f64 { sp.basis(s).iter().zip(&gamma).map(|(b, g)| b * g).sum() };
        let h = 1e-5;
        for &c in &sp.knots()[1..4] {
            let left = eval(c - 1e-12);
            let right = eval(c + 1e-12);
            assert_abs_diff_eq!(left, right, epsilon = 1e-9);
            let d_left = (eval(c) - eval(c - h)) / h;
            let d_right = (eval(c + h) - eval(c)) / h;
            assert_abs_diff_eq!(d_left, d_right, epsilon = 1e-3);
            let dd_left = (eval(c) - 2.0 * eval(c - h) + eval(c - 2.0 * h)) / (h * h);
            let dd_right = (eval(c + 2.0 * h) - 2.0 * eval(c + h) + eval(c)) / (h * h);
            assert_abs_diff_eq!(dd_left, dd_right, epsilon = 1e-2);
        }
    }

    #[test]
    fn natural_end_conditions() {
        let (sp, _) = clustered();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let gamma: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let eval = |s: f64| -> f64 { sp.basis(s).iter().zip(&gamma).map(|(b, g)| b * g).sum() };
        let h = 1e-4;
        for &c in &[sp.knots()[0], sp.knots()[4]] {
            let dd = (eval(c + h) - 2.0 * eval(c) + eval(c - h)) / (h * h);
            assert_abs_diff_eq!(dd, 0.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn end_polynomials_extend_outside_span() {
        // With two knots the natural spline is a line, and the line keeps
        // going outside the span instead of flattening.
        let locs: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0]];
        let sp = NaturalSpline::new(&locs, &[0, 1]).unwrap();
        let gamma = vec![0.0, 2.0];
        let grid = RegressionGrid::new(vec![vec![-1.0], vec![2.0]]).unwrap();
        let vals = sp.regression_mean(&gamma, &grid).unwrap();
        assert_abs_diff_eq!(vals[0], -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_is_exact_for_linear_model() {
        let (sp, _) = clustered();
        let gamma: Vec<f64> = vec![1.0, -2.0, 0.5, 3.0, -1.0];
        let jac = sp.mean_jacobian(&gamma).unwrap();
        let h = 1e-6;
        for k in 0..5 {
            let mut gp = gamma.clone();
            let mut gm = gamma.clone();
            gp[k] += h;
            gm[k] -= h;
            let fp = sp.solve_mean(&gp).unwrap();
            let fm = sp.solve_mean(&gm).unwrap();
            for i in 0..12 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert_abs_diff_eq!(jac[(i, k)], fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn solve_mean_is_linear_in_gamma() {
        let (sp, _) = clustered();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let g1: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g2: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| a * x + b * y).collect();
        let lhs = sp.solve_mean(&mix).unwrap();
        let m1 = sp.solve_mean(&g1).unwrap();
        let m2 = sp.solve_mean(&g2).unwrap();
        for i in 0..12 {
            assert_abs_diff_eq!(lhs[i], a * m1[i] + b * m2[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn residual_is_mean_minus_fit() {
        let (sp, _) = clustered();
        let gamma = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let mu = sp.solve_mean(&gamma).unwrap();
        let f = sp.residual(&mu, &gamma).unwrap();
        for v in f {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }
}
