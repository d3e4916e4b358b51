//! Semi-supervised Diffusion-DPO: pseudo-labels from the implicit
//! classifier, per-interval confidence thresholds and the self-training
//! driver.

mod pipeline;
mod pseudo;
mod thresholds;
mod train;

pub use pipeline::{
    phase_seed, run_from_reference, run_pipeline, split_clean, EvalConfig, IterationMetrics,
    IterationState, PipelineConfig, PipelineObserver, PipelineOutcome, TrainMode,
};
pub use pseudo::{
    anchor_loss, apply_pseudo_labels, composite_loss, decide, measure_interval_accuracy,
    pseudo_items, pseudo_label_loss, pseudo_logit, score_pairs, Decision, PseudoLabelRecord,
};
pub use thresholds::{
    build_thresholds, nearest_rank, ThresholdParams, ThresholdTable, TimestepIntervals,
};
pub use train::{
    batch_objective, denoise_loss_and_gradient, pretrain_reference, train_dpo, train_phase, LossWeights, OptimConfig,
    PhaseData, StepLog,
};
