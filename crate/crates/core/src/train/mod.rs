//! Distillation, contrastive stages and the weak-to-strong cycle.

mod contrastive;
mod cycle;
mod data;
mod distill;
mod dropout;
mod plan;
mod step;

pub use contrastive::{run_clip_stage, run_clip_stages, steps_to_reach, ClipRun};
pub use cycle::{
    run_weak_to_strong_cycle, CurvePoint, CycleFailure, CycleObserver, CycleOutcome, EvalSummary, FailureNote, LineageEntry,
    LineageRecord, ModelEvaluator, NoopObserver,
};
pub use data::{Batch, BatchSampler, Corpus, PairDataset};
pub use distill::{distillation_probe, identity_alignment, run_distillation, run_distillation_from, student_clip, DistillOptions, DistillRun};
pub use dropout::apply_patch_dropout;
pub use plan::{derive_seed, validate_clip_stages, CyclePlan, Generation, Objective, SeedModel, TrainStage, DEFAULT_MASK_RATIO};
pub use step::{in_batch_accuracy, StageTrace, StepRecord};
