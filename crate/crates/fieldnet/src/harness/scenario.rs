//! Scenario realization: expand a config into locations, dynamics, the
//! true field, and a seeded synthetic observation set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dynamics::{DynamicsModel, Hyperparameters, NaturalSpline, Poisson1D, SpatialDynamics};
use crate::error::{Error, Result};
use crate::estimator::SolverConfig;
use crate::kernel::CompactKernel;
use crate::model::{
    build_interaction_graph, report_to_error, sufficient_stats, validate_scenario,
    InteractionGraph, ObservationSet, RegressionGrid, SensorRecord, SufficientStats,
};

use super::config::{
    expand_counts, expand_grid, expand_locations, DynamicsConfig, ScenarioConfig, TrueFieldConfig,
};

/// The generating field of a scenario.
#[derive(Debug, Clone)]
pub enum TrueField {
    Heat {
        amplitude: f64,
        frequency: f64,
        phase: f64,
        /// Linear part fixed by the boundary conditions.
        c1: f64,
        c0: f64,
    },
    Quadratic {
        a: f64,
        b: f64,
        c: f64,
    },
    /// The scenario's spline dynamics at fixed control values.
    SplineValues {
        spline: NaturalSpline,
        gamma: Vec<f64>,
    },
}

impl TrueField {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            TrueField::Heat { amplitude, frequency, phase, c1, c0 } => {
                amplitude * (frequency * s + phase).sin() + c1 * s + c0
            }
            TrueField::Quadratic { a, b, c } => a * s * s + b * s + c,
            TrueField::SplineValues { spline, gamma } => {
                spline.basis(s).iter().zip(gamma).map(|(b, g)| b * g).sum()
            }
        }
    }

    /// Hyperparameters that generated the data, when meaningful.
    pub fn generating_gamma(&self) -> Option<Vec<f64>> {
        match self {
            TrueField::Heat { amplitude, frequency, phase, .. } => {
                Some(vec![*amplitude, *frequency, *phase])
            }
            TrueField::Quadratic { .. } => None,
            TrueField::SplineValues { gamma, .. } => Some(gamma.clone()),
        }
    }
}

/// A fully realized scenario: inputs, generated data and derived
/// structures, ready for estimation.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub observations: ObservationSet,
    pub stats: SufficientStats,
    pub truth: TrueField,
    pub dynamics: DynamicsModel,
    pub kernel: CompactKernel,
    pub graph: InteractionGraph,
    pub grid: RegressionGrid,
    pub init: Hyperparameters,
    pub solver: SolverConfig,
}

impl Scenario {
    pub fn locations(&self) -> Vec<Vec<f64>> {
        self.observations.locations()
    }

    pub fn truth_at_grid(&self) -> Vec<f64> {
        self.grid.points().iter().map(|p| self.truth.eval(p[0])).collect()
    }
}

fn build_truth(
    cfg: &TrueFieldConfig,
    dynamics_cfg: &DynamicsConfig,
    xs: &[f64],
    spline: Option<&NaturalSpline>,
) -> Result<TrueField> {
    match cfg {
        TrueFieldConfig::Heat { amplitude, frequency, phase } => {
            let (w1, wn) = match dynamics_cfg {
                DynamicsConfig::Poisson { boundary_start, boundary_end } => {
                    (*boundary_start, *boundary_end)
                }
                _ => {
                    return Err(Error::Config(
                        "heat true field needs Poisson dynamics for its boundary values".into(),
                    ))
                }
            };
            let (s1, sn) = (xs[0], xs[xs.len() - 1]);
            let sin1 = (frequency * s1 + phase).sin();
            let sinn = (frequency * sn + phase).sin();
            let c1 = (wn - amplitude * sinn - w1 + amplitude * sin1) / (sn - s1);
            let c0 = w1 - amplitude * sin1 - c1 * s1;
            Ok(TrueField::Heat {
                amplitude: *amplitude,
                frequency: *frequency,
                phase: *phase,
                c1,
                c0,
            })
        }
        TrueFieldConfig::Quadratic { a, b, c } => {
            Ok(TrueField::Quadratic { a: *a, b: *b, c: *c })
        }
        TrueFieldConfig::SplineValues { gamma } => {
            let spline = spline.ok_or_else(|| {
                Error::Config("spline_values true field needs spline dynamics".into())
            })?;
            if gamma.len() != spline.hyper_dim() {
                return Err(Error::Config(format!(
                    "spline_values has {} values for {} knots",
                    gamma.len(),
                    spline.hyper_dim()
                )));
            }
            Ok(TrueField::SplineValues { spline: spline.clone(), gamma: gamma.clone() })
        }
    }
}

/// Draw the observation set: `x_i^l = theta(s_i) + eps`, noise sampled
/// node by node, sample by sample, from a ChaCha8 stream seeded with the
/// scenario seed (Gaussian variates via the Ziggurat sampler).
fn draw_observations(
    xs: &[f64],
    counts: &[usize],
    noise_variance: f64,
    truth: &TrueField,
    seed: u64,
) -> Result<ObservationSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_variance.max(0.0).sqrt())
        .map_err(|e| Error::Config(format!("invalid noise distribution: {e}")))?;
    let sensors: Vec<SensorRecord> = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let theta = truth.eval(x);
            SensorRecord {
                id: i + 1,
                location: vec![x],
                observations: (0..counts[i]).map(|_| theta + normal.sample(&mut rng)).collect(),
            }
        })
        .collect();
    ObservationSet::new(sensors, noise_variance, 1)
}

/// Temperature scenario data: observations drawn around the closed-form
/// heat solution.
pub fn generate_temperature(config: &ScenarioConfig) -> Result<(ObservationSet, TrueField)> {
    let scenario = generate(config)?;
    match scenario.truth {
        TrueField::Heat { .. } => Ok((scenario.observations, scenario.truth)),
        _ => Err(Error::Config("config does not describe a temperature scenario".into())),
    }
}

/// Interpolating scenario data: observations drawn around the quadratic
/// (or spline-valued) truth.
pub fn generate_spline_scenario(config: &ScenarioConfig) -> Result<(ObservationSet, TrueField)> {
    let scenario = generate(config)?;
    match scenario.truth {
        TrueField::Quadratic { .. } | TrueField::SplineValues { .. } => {
            Ok((scenario.observations, scenario.truth))
        }
        _ => Err(Error::Config("config does not describe an interpolating scenario".into())),
    }
}

/// Expand, generate and validate a full scenario.
pub fn generate(config: &ScenarioConfig) -> Result<Scenario> {
    let cfg = config.resolved()?;
    let xs = expand_locations(cfg.locations.as_ref().expect("resolved"))?;
    let n = xs.len();
    let counts = expand_counts(cfg.observations_per_node.as_ref().expect("resolved"), n)?;
    let noise_variance = cfg.noise_variance.expect("resolved");
    let kernel_cfg = cfg.kernel.as_ref().expect("resolved");
    let kernel = CompactKernel::new(kernel_cfg.signal_variance, kernel_cfg.support_length)?;
    let dynamics_cfg = cfg.dynamics.as_ref().expect("resolved");
    let locations: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();

    let (dynamics, spline_ref) = match dynamics_cfg {
        DynamicsConfig::Poisson { boundary_start, boundary_end } => {
            if n < 3 {
                return Err(Error::Config(format!(
                    "Poisson dynamics need at least 3 sensors, got {n}"
                )));
            }
            (
                DynamicsModel::Poisson(Poisson1D::new(&locations, *boundary_start, *boundary_end)?),
                None,
            )
        }
        DynamicsConfig::Spline { knot_ids } => {
            let mut knot_indices = Vec::with_capacity(knot_ids.len());
            for &id in knot_ids {
                if id == 0 || id > n {
                    return Err(Error::Config(format!(
                        "knot id {id} out of range for {n} sensors (ids are 1-based)"
                    )));
                }
                knot_indices.push(id - 1);
            }
            let sp = NaturalSpline::new(&locations, &knot_indices)?;
            (DynamicsModel::Spline(sp.clone()), Some(sp))
        }
    };

    let truth = build_truth(
        cfg.true_field.as_ref().expect("resolved"),
        dynamics_cfg,
        &xs,
        spline_ref.as_ref(),
    )?;
    let observations = draw_observations(&xs, &counts, noise_variance, &truth, cfg.seed)?;
    let graph = build_interaction_graph(&locations, &kernel)?;
    let grid_points = expand_grid(cfg.regression_grid.as_ref().expect("resolved"))?;
    let grid = RegressionGrid::new(grid_points.into_iter().map(|x| vec![x]).collect())?;

    let report = validate_scenario(&observations, &grid, &graph);
    if !report.is_empty() {
        return Err(report_to_error(&report));
    }
    let stats = sufficient_stats(&observations)?;

    let init_values = cfg.init.clone().expect("resolved");
    let init = Hyperparameters::new(init_values, dynamics.domain().clone())?;
    let solver = cfg.solver.clone().unwrap_or_default();

    Ok(Scenario {
        config: cfg,
        observations,
        stats,
        truth,
        dynamics,
        kernel,
        graph,
        grid,
        init,
        solver,
    })
}
