//! Configuration parsing, experiment runs, ablation sweeps and reports for
//! the `fedgrpo` command.

pub mod config;
pub mod error;
pub mod runner;

pub use config::{parse_config, ExperimentConfig};
pub use error::{CliError, Result};
pub use runner::{report, run_ablation, run_experiment, AblationReport, RunReport};
