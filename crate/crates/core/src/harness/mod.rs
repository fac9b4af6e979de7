//! Experiment plumbing: configs, synthetic datasets, certification sweeps and result files.

mod config;
mod dataset;
mod output;
mod run;

pub use crate::denoiser::{load_checkpoint, save_checkpoint};
pub use config::{
    ClassifierSection, DataConfig, DenoiserSource, ExperimentConfig, LipschitzConfig, ModelConfig, SiftBenchConfig,
};
pub use dataset::{gen_dataset, read_samples_csv, write_samples_csv, Dataset};
pub use output::{
    aggregate_path, format_sig9, write_json, write_records_csv, write_table_csv, ResultTable, RECORDS_HEADER,
};
pub use run::{
    calibrate_gap_std, evaluation_grid, expected_certification_calls, mean_denoiser_gap, run_certification, run_eval,
    run_lipschitz, run_sift_bench, run_train, BoxedDenoiser, CertificationRun, EvalReport, LipschitzReport, Setup,
    SiftBenchReport,
};
