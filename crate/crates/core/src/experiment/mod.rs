//! Config-driven experiments: train every seed, evaluate the paths from
//! each scheduled checkpoint to the final state, and export tables.

mod config;
mod export;
mod runner;

pub use config::{
    DataConfig, DataKind, Datasets, ExperimentConfig, ModelConfig, ModelKind, CONFIG_VERSION,
};
pub use export::{
    export, ExportFormat, Results, AGGREGATE_CSV, BARRIERS_CSV, CURVES_CSV, DEVIATION_CSV,
    METADATA_JSON, RESULTS_JSON, SEED_BARRIERS_CSV,
};
pub use runner::{
    load_dir_config, path_to_final, Experiment, Stage, CONFIG_FILE, DEVIATION_FILE, PATHS_FILE,
};

use crate::error::Result;

/// Runs every stage for every seed in sequence, then writes the CSV tables.
pub fn run_experiment(config: ExperimentConfig, quiet: bool) -> Result<std::path::PathBuf> {
    let mut exp = Experiment::open(config)?;
    exp.quiet = quiet;
    for &seed in &exp.config.seeds {
        exp.train_seed(seed)?;
        exp.paths_seed(seed)?;
    }
    export(&exp.dir, ExportFormat::Csv)?;
    Ok(exp.dir)
}
