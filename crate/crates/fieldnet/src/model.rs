//! Domain types for sensors, observations, sufficient statistics and the
//! interaction graph, plus scenario consistency validation.
//!
//! Node indices are 0-based everywhere in the API; the 1-based sensor ids
//! of the data model live only in [`SensorRecord::id`] and in validation
//! messages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::CompactKernel;

/// One sensor: its 1-based id, location and raw observation samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    /// 1-based sensor id; an `ObservationSet` holds ids 1..=N in order.
    pub id: usize,
    /// Coordinate vector, `dimension` entries.
    pub location: Vec<f64>,
    /// Raw samples, length L_i >= 1.
    pub observations: Vec<f64>,
}

impl SensorRecord {
    pub fn num_observations(&self) -> usize {
        self.observations.len()
    }
}

/// The full measurement campaign: sensors ordered by id, the shared noise
/// variance and the coordinate dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    sensors: Vec<SensorRecord>,
    noise_variance: f64,
    dimension: usize,
}

impl ObservationSet {
    /// Structural validation only: ids must be exactly 1..=N in order,
    /// locations must have the declared dimension, and every number must
    /// be finite. Reportable conditions (duplicate locations, non-positive
    /// noise variance) are left to [`validate_scenario`].
    pub fn new(sensors: Vec<SensorRecord>, noise_variance: f64, dimension: usize) -> Result<Self> {
        if sensors.is_empty() {
            return Err(Error::InvalidInput("observation set needs at least one sensor".into()));
        }
        for (idx, s) in sensors.iter().enumerate() {
            if s.id != idx + 1 {
                return Err(Error::InvalidInput(format!(
                    "sensor ids must be exactly 1..=N without gaps; position {} has id {}",
                    idx, s.id
                )));
            }
            if s.location.len() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    got: s.location.len(),
                });
            }
            if s.location.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("sensor {} has a non-finite location", s.id)));
            }
            if s.observations.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "sensor {} has a non-finite observation",
                    s.id
                )));
            }
        }
        if !noise_variance.is_finite() {
            return Err(Error::InvalidInput("noise variance must be finite".into()));
        }
        Ok(Self { sensors, noise_variance, dimension })
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn sensors(&self) -> &[SensorRecord] {
        &self.sensors
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn locations(&self) -> Vec<Vec<f64>> {
        self.sensors.iter().map(|s| s.location.clone()).collect()
    }
}

/// Per-node sample means and the diagonal `sigma^2 / L_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    /// Sample mean per node.
    pub xbar: Vec<f64>,
    /// `sigma^2 / L_i` per node; strictly positive.
    pub d_diag: Vec<f64>,
}

impl SufficientStats {
    pub fn len(&self) -> usize {
        self.xbar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xbar.is_empty()
    }
}

/// Compress raw observations into `(xbar, D)`.
pub fn sufficient_stats(obs: &ObservationSet) -> Result<SufficientStats> {
    if !(obs.noise_variance() > 0.0) {
        return Err(Error::InvalidInput(format!(
            "noise variance must be positive, got {}",
            obs.noise_variance()
        )));
    }
    let mut xbar = Vec::with_capacity(obs.len());
    let mut d_diag = Vec::with_capacity(obs.len());
    for s in obs.sensors() {
        let l = s.num_observations();
        if l == 0 {
            return Err(Error::InvalidInput(format!("sensor {} has no observations", s.id)));
        }
        xbar.push(s.observations.iter().sum::<f64>() / l as f64);
        d_diag.push(obs.noise_variance() / l as f64);
    }
    Ok(SufficientStats { xbar, d_diag })
}

/// Undirected graph of kernel couplings; every node neighbors itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionGraph {
    n: usize,
    /// Sorted neighbor ids per node (0-based), self included.
    neighbor_sets: Vec<Vec<usize>>,
}

impl InteractionGraph {
    /// Build from explicit neighbor sets; symmetrizes nothing, the caller
    /// must hand in a symmetric relation (checked by [`validate_scenario`]).
    pub fn from_neighbor_sets(neighbor_sets: Vec<Vec<usize>>) -> Self {
        let n = neighbor_sets.len();
        let mut sets = neighbor_sets;
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        Self { n, neighbor_sets: sets }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Sorted neighbors of `i`, including `i` itself.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbor_sets[i]
    }

    /// Sorted neighbors of `i` excluding `i`.
    pub fn neighbors_without_self(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.neighbor_sets[i].iter().copied().filter(move |&j| j != i)
    }

    pub fn contains_edge(&self, i: usize, j: usize) -> bool {
        i < self.n && self.neighbor_sets[i].binary_search(&j).is_ok()
    }

    /// Number of undirected non-self edges.
    pub fn edge_count(&self) -> usize {
        let directed: usize =
            (0..self.n).map(|i| self.neighbors_without_self(i).count()).sum();
        directed / 2
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| {
            self.neighbor_sets[i]
                .iter()
                .all(|&j| j < self.n && self.neighbor_sets[j].binary_search(&i).is_ok())
        })
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.n];
        let mut out = Vec::new();
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                comp.push(i);
                for j in self.neighbors(i) {
                    if !seen[*j] {
                        seen[*j] = true;
                        stack.push(*j);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// `j` neighbors `i` iff the kernel couples their locations, i.e. the
/// distance is below the support length; self-loops always present.
pub fn build_interaction_graph(
    locations: &[Vec<f64>],
    kernel: &CompactKernel,
) -> Result<InteractionGraph> {
    let n = locations.len();
    let mut sets = vec![Vec::new(); n];
    for i in 0..n {
        sets[i].push(i);
        for j in (i + 1)..n {
            if kernel.eval(&locations[i], &locations[j])? != 0.0 {
                sets[i].push(j);
                sets[j].push(i);
            }
        }
    }
    Ok(InteractionGraph::from_neighbor_sets(sets))
}

/// Locations where the field is predicted; may or may not coincide with
/// measurement points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionGrid {
    points: Vec<Vec<f64>>,
}

impl RegressionGrid {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("regression grid needs at least one point".into()));
        }
        if points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput("regression grid points must be finite".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }
}

/// One reportable scenario defect. Ids in messages are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    /// Two sensors share a location.
    DuplicateLocation { id_a: usize, id_b: usize },
    /// Edge present in one direction only.
    NonSymmetricGraph { from: usize, to: usize },
    /// A node is missing its self-loop.
    MissingSelfLoop { id: usize },
    /// Noise variance is not strictly positive.
    NonPositiveNoise { value: f64 },
    /// Graph size differs from the sensor count.
    NodeCountMismatch { sensors: usize, graph: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::DuplicateLocation { id_a, id_b } => {
                write!(f, "sensors {id_a} and {id_b} share a location")
            }
            Violation::NonSymmetricGraph { from, to } => {
                write!(f, "graph edge {from}->{to} has no reverse edge")
            }
            Violation::MissingSelfLoop { id } => write!(f, "node {id} is missing its self-loop"),
            Violation::NonPositiveNoise { value } => {
                write!(f, "noise variance must be positive, got {value}")
            }
            Violation::NodeCountMismatch { sensors, graph } => {
                write!(f, "graph has {graph} nodes but the observation set has {sensors}")
            }
        }
    }
}

/// Check a scenario for consistency; returns the list of violations and
/// never fails. An empty report means the scenario is valid.
pub fn validate_scenario(
    obs: &ObservationSet,
    _grid: &RegressionGrid,
    graph: &InteractionGraph,
) -> Vec<Violation> {
    let mut report = Vec::new();
    if !(obs.noise_variance() > 0.0) {
        report.push(Violation::NonPositiveNoise { value: obs.noise_variance() });
    }
    let sensors = obs.sensors();
    for i in 0..sensors.len() {
        for j in (i + 1)..sensors.len() {
            if sensors[i].location == sensors[j].location {
                report.push(Violation::DuplicateLocation {
                    id_a: sensors[i].id,
                    id_b: sensors[j].id,
                });
            }
        }
    }
    if graph.len() != obs.len() {
        report.push(Violation::NodeCountMismatch { sensors: obs.len(), graph: graph.len() });
    }
    for i in 0..graph.len() {
        if !graph.contains_edge(i, i) {
            report.push(Violation::MissingSelfLoop { id: i + 1 });
        }
        for &j in graph.neighbors(i) {
            if j >= graph.len() || !graph.contains_edge(j, i) {
                report.push(Violation::NonSymmetricGraph { from: i + 1, to: j + 1 });
            }
        }
    }
    report
}

/// Render a violation report as the payload of [`Error::InvalidScenario`].
pub fn report_to_error(report: &[Violation]) -> Error {
    let lines: Vec<String> = report.iter().map(|v| v.to_string()).collect();
    Error::InvalidScenario(lines.join("; "))
}
