//! Scenario generation, estimation pipelines, Monte-Carlo studies and
//! plot-data emission for the two shipped experiments.

pub mod config;
pub mod pipeline;
pub mod plotdata;
pub mod scenario;

pub use config::{ScenarioConfig, ScenarioKind};
pub use pipeline::{
    compare_modes, monte_carlo, run_pipeline, Mode, ModeComparison, MonteCarloReport,
    PipelineResult, TrialMetrics,
};
pub use plotdata::emit_plotdata;
pub use scenario::{generate, generate_spline_scenario, generate_temperature, Scenario, TrueField};
