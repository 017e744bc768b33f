//! Configured experiments: data, training, reconstruction, metrics, CSV.

mod config;
mod experiment;
mod metrics;
mod training;

pub use config::{
    CurveConfig, Estimator, ExperimentConfig, LrDecay, MspecConfig, NetworkConfig, OptimizerConfig, ScheduleConfig,
    ScoreSourceKind,
};
pub use experiment::{
    curve_to_csv, datasets, evaluate, fmt_f64, reconstruct, run_experiment, run_to_dir,
    score_source, ExperimentOutcome, MetricsReport, MetricsRow, CURVE_HEADER, METRICS_HEADER,
};
pub use metrics::{
    diversity_of, fit_gaussian, frechet_gaussian, psnr, reconstruction_metrics,
    ReconstructionMetrics, COV_RIDGE, PSNR_CAP,
};
pub use training::{train, training_batch, TrainedModel};
