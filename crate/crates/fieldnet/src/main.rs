//! Command-line front end: scenario generation, centralized or
//! distributed fitting, MAP regression, Monte-Carlo studies, mode
//! comparison and plot-data emission.
//!
//! Exit codes: 0 success, 1 tolerance/validation failure, 2 solver
//! failure, 3 bad input.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fieldnet::dynamics::SpatialDynamics;
use fieldnet::error::{Error, Result};
use fieldnet::estimator::{map_posterior, MLResult};
use fieldnet::harness::plotdata::curves_csv;
use fieldnet::harness::{
    compare_modes, emit_plotdata, generate, monte_carlo, run_pipeline, Mode, ScenarioConfig,
};
use fieldnet::kernel::CovarianceSet;

/// Environment variable overriding the default output directory.
const OUT_DIR_VAR: &str = "FIELDNET_OUT";

#[derive(Parser)]
#[command(name = "fieldnet", version, about = "Spatial field estimation over sensor networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset of a scenario and write it as JSON.
    Generate {
        /// Scenario config file (JSON).
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory (default: $FIELDNET_OUT or ./out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the hyperparameters and write mlresult.json (plus trace.csv in
    /// distributed mode).
    Fit {
        #[arg(long)]
        scenario: PathBuf,
        /// centralized | distributed
        #[arg(long, default_value = "centralized")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regression from a saved fit: posterior over the grid, written as
    /// posterior.csv.
    Map {
        #[arg(long)]
        scenario: PathBuf,
        /// mlresult.json produced by `fit`.
        #[arg(long)]
        mlresult: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated trials with derived seeds; writes montecarlo.json.
    Montecarlo {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        trials: usize,
        #[arg(long, default_value = "centralized")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run both modes, print the maximum deviations, exit 1 when they
    /// exceed the equivalence tolerances.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline, then write curves.csv and points.csv.
    Plotdata {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "centralized")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ScenarioConfig::from_json(&text)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { scenario, out } => {
            let cfg = load_config(&scenario)?;
            let dir = out_dir(out);
            let sc = generate(&cfg)?;
            write(&dir.join("dataset.json"), &serde_json::to_string_pretty(&sc.observations)?)?;
            println!(
                "generated {} sensors, {} observations -> {}",
                sc.observations.len(),
                sc.observations.sensors().iter().map(|s| s.observations.len()).sum::<usize>(),
                dir.join("dataset.json").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Fit { scenario, mode, out } => {
            let cfg = load_config(&scenario)?;
            let mode: Mode = mode.parse()?;
            let dir = out_dir(out);
            let result = run_pipeline(&cfg, mode)?;
            write(&dir.join("mlresult.json"), &serde_json::to_string_pretty(&result.ml)?)?;
            if let Some(trace) = &result.trace {
                write(&dir.join("trace.csv"), &trace.to_csv())?;
            }
            println!(
                "gamma = {:?}  cost = {}  iterations = {}  converged = {}",
                result.ml.gamma_ml.values, result.ml.cost, result.ml.iterations,
                result.ml.converged
            );
            println!("wrote {}", dir.join("mlresult.json").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Map { scenario, mlresult, out } => {
            let cfg = load_config(&scenario)?;
            let dir = out_dir(out);
            let ml: MLResult = serde_json::from_str(&std::fs::read_to_string(&mlresult)?)?;
            let sc = generate(&cfg)?;
            let covs = CovarianceSet::assemble(&sc.kernel, &sc.locations(), &sc.grid)?;
            let posterior = map_posterior(&sc.dynamics, &ml, &covs, &sc.stats, &sc.grid)?;
            let prior = sc.dynamics.regression_mean(&ml.gamma_ml.values, &sc.grid)?;
            write(&dir.join("posterior.csv"), &curves_csv(&sc, &prior, &posterior)?)?;
            println!("wrote {}", dir.join("posterior.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Montecarlo { scenario, trials, mode, out } => {
            let cfg = load_config(&scenario)?;
            let mode: Mode = mode.parse()?;
            let dir = out_dir(out);
            let report = monte_carlo(&cfg, trials, mode)?;
            write(&dir.join("montecarlo.json"), &serde_json::to_string_pretty(&report)?)?;
            println!(
                "trials = {}  rmse_map = {} +- {}  rmse_prior = {} +- {}  coverage95 = {}",
                report.trials,
                report.rmse_map_mean,
                report.rmse_map_std,
                report.rmse_prior_mean,
                report.rmse_prior_std,
                report.pooled_coverage95
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { scenario, out } => {
            let cfg = load_config(&scenario)?;
            let report = compare_modes(&cfg)?;
            println!(
                "cost: centralized = {}  distributed = {}",
                report.cost_centralized, report.cost_distributed
            );
            println!("max |gamma_dist - gamma_cent| = {}", report.max_gamma_deviation);
            println!("max |local_map - map_posterior| = {}", report.max_map_deviation);
            if let Some(out) = out {
                write(&out.join("compare.json"), &serde_json::to_string_pretty(&report)?)?;
            }
            if report.within_tolerance {
                println!("within tolerance");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("TOLERANCE EXCEEDED");
                Ok(ExitCode::from(1))
            }
        }
        Command::Plotdata { scenario, mode, out } => {
            let cfg = load_config(&scenario)?;
            let mode: Mode = mode.parse()?;
            let dir = out_dir(out);
            let result = run_pipeline(&cfg, mode)?;
            emit_plotdata(&result, &dir)?;
            println!(
                "wrote {} and {}",
                dir.join("curves.csv").display(),
                dir.join("points.csv").display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
