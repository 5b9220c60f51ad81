//! Training stages, their configuration and the evaluation reports.

pub mod augment;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod schedule;
pub mod stage;

pub use config::{Stage, TrainConfig, PRESETS};
pub use eval::{ClassificationReport, MannReport, ReconReport, ReconRow, ReconTable};
pub use metrics::{MetricRecord, MetricsLog, RecordKind};
pub use report::{recon_table, EvalResult, RunSummary};
pub use stage::{
    evaluate_classification, evaluate_mann, evaluate_reconstruction, partition, reconstruct_pixels,
    run_id, run_stage, ClipLoader, EvalSplit, Partition, RunOutput, Trained,
};
