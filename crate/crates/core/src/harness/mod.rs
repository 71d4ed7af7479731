//! Configuration, evaluation, statistics and experiment drivers.

pub mod config;
pub mod eval;
pub mod experiment;
pub mod stats;

pub use config::{DataConfig, DataKind, ExperimentConfig, InterpretConfig};
pub use eval::{argmax_rows, evaluate_fold, majority_vote, FoldScore};
pub use experiment::{
    cmd_interpret, cmd_preprocess, cmd_report, cmd_run, cmd_sweep_noise, cmd_sweep_pace, cmd_synth,
    prepare_data, read_results, resolve_out_dir, run_cell, run_grid, summarize, CellOutput, ResultRecord, SeedData, Variant,
};
pub use stats::{mean, sample_std, welch_t, WelchResult};
