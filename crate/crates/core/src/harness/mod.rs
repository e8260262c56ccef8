//! Incremental training, evaluation and experiment orchestration.

pub mod config;
pub mod evaluate;
pub mod experiment;
pub mod plot;
pub mod train;

pub use config::{ActiveParts, Method, TrainConfig};
pub use evaluate::{evaluate, ConfusionMatrix, EvalSample, StepMetrics};
pub use experiment::{
    ablate, ablation_rows, compare_methods, grid, latest_completed_step, resume_experiment,
    run_experiment, run_with_data, seeds_from, write_curves, ExperimentData, ExperimentReport,
    SweepReport,
};
pub use train::{
    batch_objective, prepare_pool, train_step, BatchContext, PreparedSample, StepOutcome,
};
