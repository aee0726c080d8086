//! Flat-file emission of pipeline results.
//!
//! Two CSVs re-draw the scenario figures: `curves.csv` carries the grid
//! with truth, fitted prior mean, posterior mean and 95% bounds, and
//! `points.csv` carries one row per raw observation. Numbers print as the
//! shortest decimal that parses back to the identical f64.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::estimator::Posterior;

use super::pipeline::PipelineResult;
use super::scenario::Scenario;

/// Grid columns: s, truth, prior_mean, map_mean, lower95, upper95.
pub fn curves_csv(
    scenario: &Scenario,
    prior_mean: &[f64],
    posterior: &Posterior,
) -> Result<String> {
    let truth = scenario.truth_at_grid();
    let mut out = String::from("s,truth,prior_mean,map_mean,lower95,upper95\n");
    for (m, point) in scenario.grid.points().iter().enumerate() {
        if point.len() != 1 {
            return Err(Error::InvalidInput(
                "plot data emission supports 1-D scenarios only".into(),
            ));
        }
        writeln!(
            out,
            "{},{},{},{},{},{}",
            point[0],
            truth[m],
            prior_mean[m],
            posterior.mean[m],
            posterior.lower95[m],
            posterior.upper95[m]
        )
        .expect("string write");
    }
    Ok(out)
}

/// Observation columns: node (1-based), s, xbar, l, obs index, x.
pub fn points_csv(scenario: &Scenario) -> String {
    let mut out = String::from("node,s,xbar,l,obs,x\n");
    for (i, sensor) in scenario.observations.sensors().iter().enumerate() {
        let xbar = scenario.stats.xbar[i];
        for (l, x) in sensor.observations.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                sensor.id,
                sensor.location[0],
                xbar,
                sensor.observations.len(),
                l,
                x
            )
            .expect("string write");
        }
    }
    out
}

/// Write `curves.csv` and `points.csv` for one pipeline run.
pub fn emit_plotdata(run: &PipelineResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("curves.csv"),
        curves_csv(&run.scenario, &run.prior_mean, &run.posterior)?,
    )?;
    std::fs::write(dir.join("points.csv"), points_csv(&run.scenario))?;
    Ok(())
}

/// One parsed row of `curves.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub s: f64,
    pub truth: f64,
    pub prior_mean: f64,
    pub map_mean: f64,
    pub lower95: f64,
    pub upper95: f64,
}

/// Parse `curves.csv` text back into rows; used to cross-check emitted
/// files against in-memory results.
pub fn parse_curves_csv(text: &str) -> Result<Vec<CurveRow>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "s,truth,prior_mean,map_mean,lower95,upper95" {
        return Err(Error::InvalidInput(format!("unexpected curves header: {header}")));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::InvalidInput(format!(
                "curves row {idx} has {} fields",
                fields.len()
            )));
        }
        let mut values = [0.0f64; 6];
        for (v, f) in values.iter_mut().zip(&fields) {
            *v = f
                .parse()
                .map_err(|e| Error::InvalidInput(format!("curves row {idx}: {e}")))?;
        }
        rows.push(CurveRow {
            s: values[0],
            truth: values[1],
            prior_mean: values[2],
            map_mean: values[3],
            lower95: values[4],
            upper95: values[5],
        });
    }
    Ok(rows)
}

/// Coverage recomputed from an emitted curves file.
pub fn coverage_from_curves(rows: &[CurveRow]) -> f64 {
    let inside =
        rows.iter().filter(|r| r.lower95 <= r.truth && r.truth <= r.upper95).count();
    inside as f64 / rows.len() as f64
}
