//! End-to-end estimation pipeline and Monte-Carlo studies.

use serde::{Deserialize, Serialize};

use crate::distnet::{Network, NetworkTrace};
use crate::dynamics::SpatialDynamics;
use crate::error::{Error, Result};
use crate::estimator::{fit_ml, map_posterior, MLResult, Posterior};
use crate::kernel::CovarianceSet;

use super::config::ScenarioConfig;
use super::scenario::{generate, Scenario};

/// Relative cost agreement required between the two modes.
pub const COST_RTOL: f64 = 1e-6;
/// Per-component hyperparameter agreement required between the two modes.
pub const GAMMA_ATOL: f64 = 1e-5;
/// Agreement required between the local MAP values and the centralized
/// posterior mean entries.
pub const MAP_ATOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Centralized,
    Distributed,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centralized" => Ok(Mode::Centralized),
            "distributed" => Ok(Mode::Distributed),
            other => Err(Error::InvalidInput(format!(
                "mode must be 'centralized' or 'distributed', got '{other}'"
            ))),
        }
    }
}

/// Quality metrics of one trial against the known truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialMetrics {
    /// Posterior mean vs truth over the grid.
    pub rmse_map: f64,
    /// Fitted prior mean vs truth over the grid.
    pub rmse_prior: f64,
    /// Fraction of grid points whose truth lies inside the 95% band.
    pub coverage95: f64,
    /// Per-component relative error of gamma when the generating value is
    /// known.
    pub gamma_error: Option<Vec<f64>>,
}

/// Everything one pipeline run produces.
#[derive(Debug)]
pub struct PipelineResult {
    pub scenario: Scenario,
    pub ml: MLResult,
    pub posterior: Posterior,
    pub prior_mean: Vec<f64>,
    pub metrics: TrialMetrics,
    /// Present in distributed mode.
    pub trace: Option<NetworkTrace>,
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sum / a.len() as f64).sqrt()
}

pub(crate) fn compute_metrics(
    scenario: &Scenario,
    ml: &MLResult,
    posterior: &Posterior,
    prior_mean: &[f64],
) -> TrialMetrics {
    let truth = scenario.truth_at_grid();
    let inside = truth
        .iter()
        .enumerate()
        .filter(|&(m, &t)| posterior.lower95[m] <= t && t <= posterior.upper95[m])
        .count();
    let gamma_error = scenario.truth.generating_gamma().map(|gstar| {
        ml.gamma_ml
            .values
            .iter()
            .zip(&gstar)
            .map(|(g, s)| if *s != 0.0 { (g - s).abs() / s.abs() } else { (g - s).abs() })
            .collect()
    });
    TrialMetrics {
        rmse_map: rmse(&posterior.mean, &truth),
        rmse_prior: rmse(prior_mean, &truth),
        coverage95: inside as f64 / truth.len() as f64,
        gamma_error,
    }
}

/// Run generation, fit, MAP regression and metrics for one scenario.
/// Distributed mode also runs the centralized reference and fails with a
/// tolerance error if the two disagree beyond the contract.
pub fn run_pipeline(config: &ScenarioConfig, mode: Mode) -> Result<PipelineResult> {
    let scenario = generate(config)?;
    let locations = scenario.locations();
    let covs = CovarianceSet::assemble(&scenario.kernel, &locations, &scenario.grid)?;

    let (ml, trace) = match mode {
        Mode::Centralized => {
            let ml = fit_ml(
                &scenario.dynamics,
                &covs.kss,
                &scenario.stats,
                &scenario.init,
                &scenario.solver,
            )?;
            (ml, None)
        }
        Mode::Distributed => {
            let mut net = Network::new(
                &locations,
                &scenario.stats,
                &covs.kss,
                &scenario.graph,
                scenario.kernel,
                scenario.dynamics.clone(),
            )?;
            let ml_dist = net.fit_ml(&scenario.init, &scenario.solver)?;
            let ml_cent = fit_ml(
                &scenario.dynamics,
                &covs.kss,
                &scenario.stats,
                &scenario.init,
                &scenario.solver,
            )?;

            let cost_gap = (ml_dist.cost - ml_cent.cost).abs();
            if cost_gap > COST_RTOL * (1.0 + ml_cent.cost.abs()) {
                return Err(Error::ToleranceExceeded(format!(
                    "distributed cost {} vs centralized {} (gap {cost_gap:e})",
                    ml_dist.cost, ml_cent.cost
                )));
            }
            for (k, (d, c)) in
                ml_dist.gamma_ml.values.iter().zip(&ml_cent.gamma_ml.values).enumerate()
            {
                if (d - c).abs() > GAMMA_ATOL {
                    return Err(Error::ToleranceExceeded(format!(
                        "gamma component {k}: distributed {d} vs centralized {c}"
                    )));
                }
            }

            let posterior_dist =
                map_posterior(&scenario.dynamics, &ml_dist, &covs, &scenario.stats, &scenario.grid)?;
            for m in 0..scenario.grid.len() {
                let local = net.local_map(&scenario.grid, m)?;
                if (local - posterior_dist.mean[m]).abs() > MAP_ATOL {
                    return Err(Error::ToleranceExceeded(format!(
                        "local MAP at grid point {m}: {local} vs {}",
                        posterior_dist.mean[m]
                    )));
                }
            }
            (ml_dist, Some(net.take_trace()))
        }
    };

    let posterior =
        map_posterior(&scenario.dynamics, &ml, &covs, &scenario.stats, &scenario.grid)?;
    let prior_mean = scenario.dynamics.regression_mean(&ml.gamma_ml.values, &scenario.grid)?;
    let metrics = compute_metrics(&scenario, &ml, &posterior, &prior_mean);
    Ok(PipelineResult { scenario, ml, posterior, prior_mean, metrics, trace })
}

/// Deviations between the two modes, for the `compare` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeComparison {
    pub cost_centralized: f64,
    pub cost_distributed: f64,
    pub max_gamma_deviation: f64,
    pub max_map_deviation: f64,
    pub within_tolerance: bool,
}

/// Run both modes on one scenario and report the deviations.
pub fn compare_modes(config: &ScenarioConfig) -> Result<ModeComparison> {
    let scenario = generate(config)?;
    let locations = scenario.locations();
    let covs = CovarianceSet::assemble(&scenario.kernel, &locations, &scenario.grid)?;

    let ml_cent = fit_ml(
        &scenario.dynamics,
        &covs.kss,
        &scenario.stats,
        &scenario.init,
        &scenario.solver,
    )?;
    let mut net = Network::new(
        &locations,
        &scenario.stats,
        &covs.kss,
        &scenario.graph,
        scenario.kernel,
        scenario.dynamics.clone(),
    )?;
    let ml_dist = net.fit_ml(&scenario.init, &scenario.solver)?;

    let max_gamma_deviation = ml_cent
        .gamma_ml
        .values
        .iter()
        .zip(&ml_dist.gamma_ml.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    let posterior_dist =
        map_posterior(&scenario.dynamics, &ml_dist, &covs, &scenario.stats, &scenario.grid)?;
    let mut max_map_deviation = 0.0f64;
    for m in 0..scenario.grid.len() {
        let local = net.local_map(&scenario.grid, m)?;
        max_map_deviation = max_map_deviation.max((local - posterior_dist.mean[m]).abs());
    }

    let cost_gap = (ml_dist.cost - ml_cent.cost).abs();
    let within_tolerance = cost_gap <= COST_RTOL * (1.0 + ml_cent.cost.abs())
        && max_gamma_deviation <= GAMMA_ATOL
        && max_map_deviation <= MAP_ATOL;
    Ok(ModeComparison {
        cost_centralized: ml_cent.cost,
        cost_distributed: ml_dist.cost,
        max_gamma_deviation,
        max_map_deviation,
        within_tolerance,
    })
}

/// Aggregate report over repeated trials with derived seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub trials: usize,
    pub rmse_map_mean: f64,
    pub rmse_map_std: f64,
    pub rmse_prior_mean: f64,
    pub rmse_prior_std: f64,
    /// Coverage pooled over every grid point of every trial.
    pub pooled_coverage95: f64,
    /// Mean per-component relative gamma error, when truth is known.
    pub gamma_error_mean: Option<Vec<f64>>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run `trials` pipelines with seeds `seed + t` and aggregate.
pub fn monte_carlo(config: &ScenarioConfig, trials: usize, mode: Mode) -> Result<MonteCarloReport> {
    if trials == 0 {
        return Err(Error::InvalidInput("monte carlo needs at least one trial".into()));
    }
    let mut rmse_map = Vec::with_capacity(trials);
    let mut rmse_prior = Vec::with_capacity(trials);
    let mut inside_total = 0usize;
    let mut points_total = 0usize;
    let mut gamma_sums: Option<Vec<f64>> = None;

    for t in 0..trials {
        let mut cfg = config.clone();
        cfg.seed = config.seed + t as u64;
        let run = run_pipeline(&cfg, mode)?;
        rmse_map.push(run.metrics.rmse_map);
        rmse_prior.push(run.metrics.rmse_prior);
        let m = run.scenario.grid.len();
        inside_total += (run.metrics.coverage95 * m as f64).round() as usize;
        points_total += m;
        if let Some(err) = &run.metrics.gamma_error {
            let sums = gamma_sums.get_or_insert_with(|| vec![0.0; err.len()]);
            for (s, e) in sums.iter_mut().zip(err) {
                *s += e;
            }
        }
    }

    let (rmse_map_mean, rmse_map_std) = mean_std(&rmse_map);
    let (rmse_prior_mean, rmse_prior_std) = mean_std(&rmse_prior);
    Ok(MonteCarloReport {
        trials,
        rmse_map_mean,
        rmse_map_std,
        rmse_prior_mean,
        rmse_prior_std,
        pooled_coverage95: inside_total as f64 / points_total as f64,
        gamma_error_mean: gamma_sums
            .map(|sums| sums.into_iter().map(|s| s / trials as f64).collect()),
    })
}
