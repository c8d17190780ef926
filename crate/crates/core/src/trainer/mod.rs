//! Training: configuration, optimizer, per-method steps and the epoch loop.

pub mod config;
pub mod optim;
pub mod run;
pub mod steps;

pub use config::{DebugConfig, ExperimentConfig, LrDecay, McFlags, Method, ModelConfig, RemixMode, TrainConfig};
pub use optim::{clip_grad_norm, AdamW, LrSchedule};
pub use run::{
    evaluate_model, evaluate_unprocessed, read_metrics, run_training, separate_dataset, EvalSummary, MetricsRecord,
    TrainData, TrainOutcome, TrainReport, FINAL_CHECKPOINT, METRICS_FILE, REPORT_FILE,
};
pub use steps::{
    step_in_batch, step_mixit, step_pair, step_semi_supervised, step_supervised_pit, step_unsupervised,
    InBatchObjective, RoleGrads, StepOutput, StepSettings, StepStats,
};
