//! Downstream evaluation: metrics, linear probes and finetuning.

pub mod metrics;
mod probe;

pub use metrics::{aggregate_score, auroc, balanced_accuracy, class_weights, cohen_kappa, macro_f1, Confusion};
pub use probe::{
    check_leakage, extract_features, full_finetune, linear_probe, mean_std, pool, pool_graph, probe_seeds,
    EvalReport, MaeRepresentation, ProbeConfig, ProbeResult, Representation, Task, TaskMetrics, TaskSummary,
};
