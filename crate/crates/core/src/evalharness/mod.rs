//! End-task fine-tuning, metrics, perplexity and the ablation runner.

pub mod experiment;
pub mod finetune;
pub mod metrics;
pub mod perplexity;
pub mod tasks;

pub use experiment::{
    aggregate_runs, build_marker_task, build_tasks, importance_subset, load_run_reports, mean_std, run_dir_name,
    run_experiment, EvalConfig, ExperimentPlan, FailedRun, ImportanceConfig, ResultRow, ResultTable, RunReport,
    SeedStreams, Stages, Variant,
};
pub use finetune::{evaluate, finetune_classifier, predict, Classifier, FinetuneConfig};
pub use metrics::{classification_metrics, ClassificationMetrics};
pub use perplexity::perplexity;
pub use tasks::{aspect_input, marker_task, pair_task, EndTask, Example, TaskKind};
