//! Hyperparameter estimation and field regression.
//!
//! The likelihood of the stacked observations reduces to the quadratic
//! form `(mu_gamma - xbar)^T (K_ss + D)^{-1} (mu_gamma - xbar)`, kept
//! sparse through the auxiliary variable `z` with
//! `(K_ss + D) z = mu_gamma - xbar`. Models whose mean is linear in gamma
//! are minimized exactly via normal equations; nonlinear models run a
//! projected Gauss-Newton iteration with Armijo backtracking and
//! multi-start. The posterior at regression points follows from `z` and
//! the cross-covariance rows alone, and a dense formulation over repeated
//! training points serves as the independent oracle.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{HyperBox, Hyperparameters, SpatialDynamics};
use crate::error::{Error, Result};
use crate::kernel::{CompactKernel, CovarianceSet};
use crate::model::{ObservationSet, RegressionGrid, SufficientStats};
use crate::sparse::{SparseCholesky, SparseCovariance};

/// Two-sided Gaussian 95% multiplier used for the confidence bounds.
pub const CONFIDENCE_95: f64 = 1.96;

/// Largest total observation count the dense oracle accepts.
pub const DENSE_ORACLE_CAP: usize = 200;

/// Settings of the maximum-likelihood solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stop when the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Cap on accepted Gauss-Newton steps per start.
    pub max_iters: usize,
    /// Extra uniformly sampled starts inside the hyperparameter box.
    pub multistart: usize,
    /// Seed for the start sampler.
    pub seed: u64,
    /// Armijo sufficient-decrease slope.
    pub armijo_slope: f64,
    /// Step shrink factor of the backtracking line search.
    pub backtrack_factor: f64,
    /// Trials per line search before giving up.
    pub max_backtracks: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iters: 200,
            multistart: 8,
            seed: 0,
            armijo_slope: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 40,
        }
    }
}

/// Outcome of the maximum-likelihood fit. The solver configuration and
/// the accepted iterate sequence of the winning start are kept for
/// reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MLResult {
    pub gamma_ml: Hyperparameters,
    /// Auxiliary variable: `(K_ss + D) z = mu_gamma - xbar`.
    pub z: Vec<f64>,
    /// Mean at the measurement points for `gamma_ml`.
    pub mu_gamma: Vec<f64>,
    /// Value of the quadratic form `z^T (K_ss + D) z`.
    pub cost: f64,
    /// Accepted Gauss-Newton steps of the winning start.
    pub iterations: usize,
    pub converged: bool,
    /// Gradient infinity norm at the final iterate.
    pub grad_norm: f64,
    /// Index of the winning start (0 is the caller's init).
    pub best_start: usize,
    /// Accepted iterates of the winning start, initial point first.
    pub gamma_trace: Vec<Vec<f64>>,
    pub config: SolverConfig,
}

/// Posterior of the field at the regression points.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub lower95: Vec<f64>,
    pub upper95: Vec<f64>,
}

impl Posterior {
    /// Build from mean and covariance; symmetrizes the covariance and
    /// fills the bounds as mean -/+ 1.96 sqrt(diagonal).
    pub fn from_mean_covariance(mean: Vec<f64>, covariance: DMatrix<f64>) -> Self {
        let sym = (&covariance + covariance.transpose()) * 0.5;
        let half_width: Vec<f64> =
            (0..mean.len()).map(|m| CONFIDENCE_95 * sym[(m, m)].max(0.0).sqrt()).collect();
        let lower95 = mean.iter().zip(&half_width).map(|(m, w)| m - w).collect();
        let upper95 = mean.iter().zip(&half_width).map(|(m, w)| m + w).collect();
        Self { mean, covariance: sym, lower95, upper95 }
    }

    pub fn variances(&self) -> Vec<f64> {
        (0..self.mean.len()).map(|m| self.covariance[(m, m)]).collect()
    }
}

/// Factored quadratic-form problem shared by every estimator operation.
pub(crate) struct MlProblem<'a> {
    pub dynamics: &'a dyn SpatialDynamics,
    pub kss: &'a SparseCovariance,
    pub stats: &'a SufficientStats,
    chol: SparseCholesky,
}

/// One cost evaluation.
pub(crate) struct Evaluation {
    pub cost: f64,
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
}

impl<'a> MlProblem<'a> {
    pub fn new(
        dynamics: &'a dyn SpatialDynamics,
        kss: &'a SparseCovariance,
        stats: &'a SufficientStats,
    ) -> Result<Self> {
        let n = stats.len();
        if kss.rows() != n || kss.cols() != n || dynamics.num_points() != n {
            return Err(Error::DimensionMismatch { expected: n, got: kss.rows() });
        }
        let chol = SparseCholesky::factor(kss, &stats.d_diag).map_err(|e| match e {
            Error::NotPositiveDefinite { index, value } => Error::SolverFailure(format!(
                "K_ss + D is not positive definite (pivot {index} = {value:e}); \
                 the model is misspecified"
            )),
            other => other,
        })?;
        Ok(Self { dynamics, kss, stats, chol })
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.chol.solve(rhs)
    }

    /// Quadratic form at `gamma`: solves for `z` and evaluates
    /// `z^T (K_ss + D) z` in the deterministic sparse order.
    pub fn evaluate(&self, gamma: &[f64]) -> Result<Evaluation> {
        let mu = self.dynamics.solve_mean(gamma)?;
        let rhs: Vec<f64> = mu.iter().zip(&self.stats.xbar).map(|(m, x)| m - x).collect();
        let z = self.chol.solve(&rhs)?;
        let cost = quadratic_form(self.kss, &self.stats.d_diag, &z)?;
        Ok(Evaluation { cost, z, mu })
    }

    /// `grad = 2 J^T z` with `J = d mu / d gamma`.
    pub fn gradient(&self, gamma: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let jac = self.dynamics.mean_jacobian(gamma)?;
        Ok(jac_t_vec(&jac, z, 2.0))
    }
}

/// `z^T (A + diag(d)) z` accumulated row by row in ascending column order.
pub(crate) fn quadratic_form(a: &SparseCovariance, d: &[f64], z: &[f64]) -> Result<f64> {
    let az = a.shifted_matvec(d, z)?;
    Ok(z.iter().zip(&az).map(|(zi, ai)| zi * ai).sum())
}

fn jac_t_vec(jac: &DMatrix<f64>, v: &[f64], scale: f64) -> Vec<f64> {
    let p = jac.ncols();
    let mut out = vec![0.0; p];
    for k in 0..p {
        let mut acc = 0.0;
        for i in 0..jac.nrows() {
            acc += jac[(i, k)] * v[i];
        }
        out[k] = scale * acc;
    }
    out
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Quadratic-form cost and auxiliary variable at `gamma`.
pub fn ml_cost(
    dynamics: &dyn SpatialDynamics,
    kss: &SparseCovariance,
    stats: &SufficientStats,
    gamma: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let problem = MlProblem::new(dynamics, kss, stats)?;
    let ev = problem.evaluate(gamma)?;
    Ok((ev.cost, ev.z))
}

/// Gradient of the quadratic form: `2 (d mu / d gamma)^T z`.
pub fn ml_gradient(
    dynamics: &dyn SpatialDynamics,
    kss: &SparseCovariance,
    stats: &SufficientStats,
    gamma: &[f64],
) -> Result<Vec<f64>> {
    let problem = MlProblem::new(dynamics, kss, stats)?;
    let ev = problem.evaluate(gamma)?;
    problem.gradient(gamma, &ev.z)
}

/// Start list: caller's init first, then uniform samples when the box is
/// bounded. Sampling is fixed by `config.seed`, so centralized and
/// distributed fits see identical starts.
pub fn sample_starts(
    domain: &HyperBox,
    init: &[f64],
    config: &SolverConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut starts = vec![init.to_vec()];
    if domain.is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for _ in 0..config.multistart {
            starts.push(domain.sample(&mut rng)?);
        }
    }
    Ok(starts)
}

/// Solve `h d = rhs` for a small symmetric system, escalating a diagonal
/// damping term when the factorization fails; falls back to the
/// steepest-descent direction when everything else does.
pub(crate) fn gn_direction(h: &DMatrix<f64>, grad: &[f64]) -> Vec<f64> {
    let p = h.nrows();
    let rhs = DVector::from_iterator(p, grad.iter().map(|g| -0.5 * g));
    let trace = (0..p).map(|i| h[(i, i)]).sum::<f64>();
    let mut damping = 0.0;
    for _ in 0..9 {
        let mut m = h.clone();
        for i in 0..p {
            m[(i, i)] += damping;
        }
        if let Some(chol) = m.cholesky() {
            return chol.solve(&rhs).iter().copied().collect();
        }
        damping = if damping == 0.0 { 1e-12 * (1.0 + trace.abs()) } else { damping * 100.0 };
    }
    grad.iter().map(|g| -g).collect()
}

struct StartOutcome {
    gamma: Vec<f64>,
    ev: Evaluation,
    iterations: usize,
    converged: bool,
    grad_norm: f64,
    trace: Vec<Vec<f64>>,
}

fn gauss_newton_start(
    problem: &MlProblem<'_>,
    domain: &HyperBox,
    start: &[f64],
    config: &SolverConfig,
) -> Result<StartOutcome> {
    let mut gamma = domain.clamp(start);
    let mut ev = problem.evaluate(&gamma)?;
    let mut trace = vec![gamma.clone()];
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;

    for _ in 0..config.max_iters {
        let jac = problem.dynamics.mean_jacobian(&gamma)?;
        let grad = jac_t_vec(&jac, &ev.z, 2.0);
        grad_norm = inf_norm(&grad);
        if grad_norm <= config.grad_tol {
            converged = true;
            break;
        }

        let p = jac.ncols();
        let mut weighted = DMatrix::zeros(jac.nrows(), p);
        for k in 0..p {
            let col: Vec<f64> = jac.column(k).iter().copied().collect();
            let y = problem.solve(&col)?;
            for i in 0..jac.nrows() {
                weighted[(i, k)] = y[i];
            }
        }
        let mut h = jac.transpose() * &weighted;
        h = (&h + h.transpose()) * 0.5;
        let direction = gn_direction(&h, &grad);

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..config.max_backtracks {
            let raw: Vec<f64> =
                gamma.iter().zip(&direction).map(|(g, d)| g + alpha * d).collect();
            let trial = domain.clamp(&raw);
            let step: Vec<f64> = trial.iter().zip(&gamma).map(|(t, g)| t - g).collect();
            if step.iter().all(|s| *s == 0.0) {
                break;
            }
            let trial_ev = problem.evaluate(&trial)?;
            let slope: f64 = grad.iter().zip(&step).map(|(g, s)| g * s).sum();
            if trial_ev.cost <= ev.cost + config.armijo_slope * slope {
                gamma = trial;
                ev = trial_ev;
                accepted = true;
                break;
            }
            alpha *= config.backtrack_factor;
        }
        if !accepted {
            break;
        }
        iterations += 1;
        trace.push(gamma.clone());
    }
    Ok(StartOutcome { gamma, ev, iterations, converged, grad_norm, trace })
}

/// Maximum-likelihood hyperparameter fit.
///
/// Linear-in-gamma models are solved exactly through the normal equations
/// `B^T W B gamma = B^T W xbar` with `W = (K_ss + D)^{-1}` applied via
/// sparse solves. Nonlinear models run projected Gauss-Newton with
/// backtracking from the provided init plus `config.multistart` sampled
/// starts; the lowest cost wins and ties keep the earliest start.
pub fn fit_ml(
    dynamics: &dyn SpatialDynamics,
    kss: &SparseCovariance,
    stats: &SufficientStats,
    init: &Hyperparameters,
    config: &SolverConfig,
) -> Result<MLResult> {
    let domain = dynamics.domain().clone();
    if init.values.len() != dynamics.hyper_dim() {
        return Err(Error::DimensionMismatch {
            expected: dynamics.hyper_dim(),
            got: init.values.len(),
        });
    }
    if !domain.contains(&init.values) {
        return Err(Error::InvalidInput("initial hyperparameters outside the domain".into()));
    }
    let problem = MlProblem::new(dynamics, kss, stats)?;

    if let Some(basis) = dynamics.linear_basis() {
        let gamma = solve_linear_ml(&problem, basis)?;
        let gamma = domain.clamp(&gamma);
        let ev = problem.evaluate(&gamma)?;
        let grad = problem.gradient(&gamma, &ev.z)?;
        return Ok(MLResult {
            gamma_ml: Hyperparameters::new(gamma.clone(), domain)?,
            z: ev.z,
            mu_gamma: ev.mu,
            cost: ev.cost,
            iterations: 1,
            converged: true,
            grad_norm: inf_norm(&grad),
            best_start: 0,
            gamma_trace: vec![gamma],
            config: config.clone(),
        });
    }

    let starts = sample_starts(&domain, &init.values, config)?;
    let mut best: Option<(usize, StartOutcome)> = None;
    for (idx, start) in starts.iter().enumerate() {
        let outcome = gauss_newton_start(&problem, &domain, start, config)?;
        let better = match &best {
            None => true,
            Some((_, b)) => outcome.ev.cost < b.ev.cost,
        };
        if better {
            best = Some((idx, outcome));
        }
    }
    let (best_start, out) = best.expect("at least the init start runs");
    Ok(MLResult {
        gamma_ml: Hyperparameters::new(out.gamma.clone(), domain)?,
        z: out.ev.z,
        mu_gamma: out.ev.mu,
        cost: out.ev.cost,
        iterations: out.iterations,
        converged: out.converged,
        grad_norm: out.grad_norm,
        best_start,
        gamma_trace: out.trace,
        config: config.clone(),
    })
}

/// Normal equations for linear means: returns the exact minimizer.
fn solve_linear_ml(problem: &MlProblem<'_>, basis: &DMatrix<f64>) -> Result<Vec<f64>> {
    let (n, q) = (basis.nrows(), basis.ncols());
    let mut weighted = DMatrix::zeros(n, q);
    for k in 0..q {
        let col: Vec<f64> = basis.column(k).iter().copied().collect();
        let y = problem.solve(&col)?;
        for i in 0..n {
            weighted[(i, k)] = y[i];
        }
    }
    let mut h = basis.transpose() * &weighted;
    h = (&h + h.transpose()) * 0.5;
    let rhs = DVector::from_vec(jac_t_vec(&weighted, &problem.stats.xbar, 1.0));
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SolverFailure("normal equations are singular".into()))?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// Posterior at the regression points from a fitted `MLResult`.
///
/// The mean is `mu^R - K_Rs z` per point; the covariance
/// `K_RR - K_Rs (K_ss + D)^{-1} K_sR` is assembled column by column via
/// sparse solves, never forming the dense inverse.
pub fn map_posterior(
    dynamics: &dyn SpatialDynamics,
    ml: &MLResult,
    covs: &CovarianceSet,
    stats: &SufficientStats,
    grid: &RegressionGrid,
) -> Result<Posterior> {
    let m = grid.len();
    if covs.krs.rows() != m || covs.krr.rows() != m {
        return Err(Error::DimensionMismatch { expected: m, got: covs.krs.rows() });
    }
    let mu_r = dynamics.regression_mean(&ml.gamma_ml.values, grid)?;
    let mean: Vec<f64> =
        (0..m).map(|row| mu_r[row] - covs.krs.row_dot(row, &ml.z)).collect();

    let chol = SparseCholesky::factor(&covs.kss, &stats.d_diag)?;
    let n = covs.kss.rows();
    let mut cov = DMatrix::zeros(m, m);
    for (i, j, v) in covs.krr.iter() {
        cov[(i, j)] = v;
    }
    for m2 in 0..m {
        // Column m2 of K_sR is row m2 of K_Rs.
        let mut rhs = vec![0.0; n];
        for (j, v) in covs.krs.row_iter(m2) {
            rhs[j] = v;
        }
        let y = chol.solve(&rhs)?;
        for m1 in 0..m {
            cov[(m1, m2)] -= covs.krs.row_dot(m1, &y);
        }
    }
    Ok(Posterior::from_mean_covariance(mean, cov))
}

/// Dense-formula posterior over the repeated training points, the
/// textbook route kept as an independent oracle for [`map_posterior`].
/// Builds the full `L x L` system with `L = sum L_i` and is therefore
/// capped at small scenario sizes.
pub fn dense_posterior_oracle(
    kernel: &CompactKernel,
    obs: &ObservationSet,
    dynamics: &dyn SpatialDynamics,
    gamma: &[f64],
    grid: &RegressionGrid,
) -> Result<Posterior> {
    let total: usize = obs.sensors().iter().map(|s| s.num_observations()).sum();
    if total > DENSE_ORACLE_CAP {
        return Err(Error::InvalidInput(format!(
            "dense oracle limited to {DENSE_ORACLE_CAP} observations, got {total}"
        )));
    }
    let mu = dynamics.solve_mean(gamma)?;
    let mu_r = dynamics.regression_mean(gamma, grid)?;

    let mut points: Vec<&[f64]> = Vec::with_capacity(total);
    let mut stacked_x = Vec::with_capacity(total);
    let mut stacked_mu = Vec::with_capacity(total);
    for (i, s) in obs.sensors().iter().enumerate() {
        for &x in &s.observations {
            points.push(&s.location);
            stacked_x.push(x);
            stacked_mu.push(mu[i]);
        }
    }

    let sigma2 = obs.noise_variance();
    let mut kqq = DMatrix::zeros(total, total);
    for a in 0..total {
        for b in 0..total {
            kqq[(a, b)] = kernel.eval(points[a], points[b])?;
        }
        kqq[(a, a)] += sigma2;
    }
    let chol = kqq
        .cholesky()
        .ok_or_else(|| Error::SolverFailure("dense training system not positive definite".into()))?;

    let m = grid.len();
    let mut krq = DMatrix::zeros(m, total);
    for (r, p) in grid.points().iter().enumerate() {
        for a in 0..total {
            krq[(r, a)] = kernel.eval(p, points[a])?;
        }
    }

    let resid = DVector::from_iterator(total, stacked_mu.iter().zip(&stacked_x).map(|(m, x)| m - x));
    let alpha = chol.solve(&resid);
    let mean: Vec<f64> = (0..m).map(|r| mu_r[r] - (krq.row(r) * &alpha)[(0, 0)]).collect();

    let mut cov = DMatrix::zeros(m, m);
    for r1 in 0..m {
        for r2 in 0..m {
            cov[(r1, r2)] = kernel.eval(&grid.points()[r1], &grid.points()[r2])?;
        }
    }
    let solved = chol.solve(&krq.transpose());
    cov -= &krq * solved;
    Ok(Posterior::from_mean_covariance(mean, cov))
}
