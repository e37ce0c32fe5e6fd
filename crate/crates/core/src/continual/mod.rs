//! Task-continual protocol: base training, per-task masks over a frozen
//! backbone, baselines, evaluation and experiment metrics.

mod experiment;
mod optim;
mod plan;
mod train;

pub use experiment::{
    base_model, prepare_data, run_experiment, task_seed, Metrics, Observer, PreparedData, Record, TaskData,
    TaskSummary, CSV_HEADER,
};
pub use optim::{Optimizer, OptimizerKind};
pub use plan::{
    scaled_lr, DataSource, ExperimentPlan, IndividualInit, Method, TaskSpec, TrainSettings, BACKBONE_LR_BASE,
    HEAD_LR_BASE, MASK_LR_BASE,
};
pub use train::{
    accuracy, baseline_classifier_only, baseline_individual, classifier_logits, evaluate, head_logits, model_logits,
    task_logits, train_base, train_task, MaskStore, TaskOutcome, TrainReport,
};
