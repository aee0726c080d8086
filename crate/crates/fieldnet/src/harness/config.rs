//! Scenario configuration: a JSON-compatible schema with every knob of a
//! run. Unknown keys are rejected. Fields left out fall back to the
//! per-kind defaults; the `custom` kind requires everything explicit.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Temperature,
    Spline,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum LocationSpec {
    /// `n` evenly spaced points from `start` to `end` inclusive.
    Uniform { n: usize, start: f64, end: f64 },
    /// Explicit 1-D coordinates.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum CountSpec {
    Constant(usize),
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub signal_variance: f64,
    pub support_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum TrueFieldConfig {
    /// Closed-form solution of the heat problem: `A sin(omega s + phi) +
    /// C1 s + C0`, with the linear part pinned by the boundary values of
    /// the Poisson dynamics.
    Heat { amplitude: f64, frequency: f64, phase: f64 },
    /// `a s^2 + b s + c`.
    Quadratic { a: f64, b: f64, c: f64 },
    /// The scenario's own spline evaluated at fixed control values.
    SplineValues { gamma: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DynamicsConfig {
    /// Discretized Poisson problem with Dirichlet boundary values.
    Poisson { boundary_start: f64, boundary_end: f64 },
    /// Natural cubic spline through the listed sensors (1-based ids).
    Spline { knot_ids: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum GridSpec {
    Uniform { count: usize, start: f64, end: f64 },
    Explicit(Vec<f64>),
}

/// Full scenario description. `seed` is mandatory; everything else can be
/// omitted for the named kinds and is then filled with the defaults
/// below. Kernel parameters, spline sensor coordinates and per-node
/// sample counts are calibration choices, not reported values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub locations: Option<LocationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observations_per_node: Option<CountSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_field: Option<TrueFieldConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamics: Option<DynamicsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression_grid: Option<GridSpec>,
    /// Initial hyperparameters for the fit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverConfig>,
}

impl ScenarioConfig {
    /// Temperature scenario: 10 sensors evenly spaced on [0, 2*pi/3],
    /// heat source amplitude 6, frequency 3, phase 3, boundary values 3
    /// and 0. Noise level, per-node sample count and kernel are
    /// calibration defaults.
    pub fn temperature_default(seed: u64) -> Self {
        let end = 2.0 * PI / 3.0;
        let spacing = end / 9.0;
        Self {
            kind: ScenarioKind::Temperature,
            seed,
            locations: Some(LocationSpec::Uniform { n: 10, start: 0.0, end }),
            observations_per_node: Some(CountSpec::Constant(25)),
            noise_variance: Some(0.01),
            kernel: Some(KernelConfig { signal_variance: 4.0, support_length: 2.0 * spacing }),
            true_field: Some(TrueFieldConfig::Heat { amplitude: 6.0, frequency: 3.0, phase: 3.0 }),
            dynamics: Some(DynamicsConfig::Poisson { boundary_start: 3.0, boundary_end: 0.0 }),
            regression_grid: Some(GridSpec::Uniform { count: 101, start: 0.0, end }),
            init: Some(vec![5.0, 2.5, 2.5]),
            solver: None,
        }
    }

    /// Interpolating scenario: 12 sensors in five clusters between -15
    /// and 14 (coordinates are a calibration choice), quadratic truth
    /// 0.1 s^2 + 0.1 s + 10, spline knots at sensors 1, 3, 5, 7 and 12.
    pub fn spline_default(seed: u64) -> Self {
        let xs = vec![
            -15.0, -14.2, -8.5, -7.8, -1.5, -0.7, 4.8, 5.5, 6.2, 12.6, 13.3, 14.0,
        ];
        let max_gap = xs.windows(2).map(|w| w[1] - w[0]).fold(0.0f64, f64::max);
        Self {
            kind: ScenarioKind::Spline,
            seed,
            locations: Some(LocationSpec::Explicit(xs)),
            observations_per_node: Some(CountSpec::Explicit(vec![
                1, 10, 2, 25, 1, 5, 15, 1, 8, 3, 20, 2,
            ])),
            noise_variance: Some(1.0),
            kernel: Some(KernelConfig { signal_variance: 4.0, support_length: 2.0 * max_gap }),
            true_field: Some(TrueFieldConfig::Quadratic { a: 0.1, b: 0.1, c: 10.0 }),
            dynamics: Some(DynamicsConfig::Spline { knot_ids: vec![1, 3, 5, 7, 12] }),
            regression_grid: Some(GridSpec::Uniform { count: 101, start: -15.0, end: 14.0 }),
            init: Some(vec![0.0; 5]),
            solver: None,
        }
    }

    /// Fill omitted fields from the kind's defaults; `custom` scenarios
    /// must be fully explicit.
    pub fn resolved(&self) -> Result<Self> {
        let base = match self.kind {
            ScenarioKind::Temperature => Self::temperature_default(self.seed),
            ScenarioKind::Spline => Self::spline_default(self.seed),
            ScenarioKind::Custom => {
                let missing = [
                    ("locations", self.locations.is_none()),
                    ("observations_per_node", self.observations_per_node.is_none()),
                    ("noise_variance", self.noise_variance.is_none()),
                    ("kernel", self.kernel.is_none()),
                    ("true_field", self.true_field.is_none()),
                    ("dynamics", self.dynamics.is_none()),
                    ("regression_grid", self.regression_grid.is_none()),
                    ("init", self.init.is_none()),
                ]
                .iter()
                .filter(|(_, m)| *m)
                .map(|(name, _)| *name)
                .collect::<Vec<_>>();
                if !missing.is_empty() {
                    return Err(Error::Config(format!(
                        "custom scenarios must set every field; missing: {}",
                        missing.join(", ")
                    )));
                }
                self.clone()
            }
        };
        Ok(Self {
            kind: self.kind,
            seed: self.seed,
            locations: self.locations.clone().or(base.locations),
            observations_per_node: self.observations_per_node.clone().or(base.observations_per_node),
            noise_variance: self.noise_variance.or(base.noise_variance),
            kernel: self.kernel.clone().or(base.kernel),
            true_field: self.true_field.clone().or(base.true_field),
            dynamics: self.dynamics.clone().or(base.dynamics),
            regression_grid: self.regression_grid.clone().or(base.regression_grid),
            init: self.init.clone().or(base.init),
            solver: self.solver.clone().or(base.solver),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub(crate) fn expand_locations(spec: &LocationSpec) -> Result<Vec<f64>> {
    match spec {
        LocationSpec::Uniform { n, start, end } => {
            if *n < 2 || !(end > start) {
                return Err(Error::Config(format!(
                    "uniform locations need n >= 2 and end > start, got n={n}, [{start}, {end}]"
                )));
            }
            Ok((0..*n).map(|i| start + (end - start) * i as f64 / (*n - 1) as f64).collect())
        }
        LocationSpec::Explicit(v) => {
            if v.is_empty() {
                return Err(Error::Config("explicit locations must not be empty".into()));
            }
            Ok(v.clone())
        }
    }
}

pub(crate) fn expand_counts(spec: &CountSpec, n: usize) -> Result<Vec<usize>> {
    match spec {
        CountSpec::Constant(l) => {
            if *l == 0 {
                return Err(Error::Config("observations per node must be at least 1".into()));
            }
            Ok(vec![*l; n])
        }
        CountSpec::Explicit(v) => {
            if v.len() != n {
                return Err(Error::Config(format!(
                    "observation counts list has {} entries for {} sensors",
                    v.len(),
                    n
                )));
            }
            if v.iter().any(|&l| l == 0) {
                return Err(Error::Config("observations per node must be at least 1".into()));
            }
            Ok(v.clone())
        }
    }
}

pub(crate) fn expand_grid(spec: &GridSpec) -> Result<Vec<f64>> {
    match spec {
        GridSpec::Uniform { count, start, end } => {
            if *count == 0 {
                return Err(Error::Config("regression grid needs at least one point".into()));
            }
            if *count == 1 {
                return Ok(vec![*start]);
            }
            Ok((0..*count)
                .map(|i| start + (end - start) * i as f64 / (*count - 1) as f64)
                .collect())
        }
        GridSpec::Explicit(v) => {
            if v.is_empty() {
                return Err(Error::Config("regression grid needs at least one point".into()));
            }
            Ok(v.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_round_trip() {
        for cfg in [ScenarioConfig::temperature_default(1), ScenarioConfig::spline_default(2)] {
            let resolved = cfg.resolved().unwrap();
            let text = resolved.to_json().unwrap();
            let back = ScenarioConfig::from_json(&text).unwrap();
            assert_eq!(resolved, back);
            // serialize(parse(text)) is idempotent.
            assert_eq!(text, back.to_json().unwrap());
        }
    }

    #[test]
    fn minimal_named_config_fills_defaults() {
        let cfg = ScenarioConfig::from_json(r#"{"kind": "temperature", "seed": 7}"#).unwrap();
        let resolved = cfg.resolved().unwrap();
        assert_eq!(resolved.noise_variance, Some(0.01));
        assert!(matches!(resolved.locations, Some(LocationSpec::Uniform { n: 10, .. })));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ScenarioConfig::from_json(r#"{"kind": "spline", "seed": 1, "bogus": 3}"#);
        assert!(err.is_err());
    }

    #[test]
    fn custom_requires_all_fields() {
        let cfg = ScenarioConfig::from_json(r#"{"kind": "custom", "seed": 1}"#).unwrap();
        match cfg.resolved() {
            Err(Error::Config(msg)) => assert!(msg.contains("locations")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(ScenarioConfig::from_json(r#"{"kind": "temperature"}"#).is_err());
    }
}
