//! Two-stage training: configuration, co-training data, the total loss,
//! stage loops, paradigms and the end-to-end gradient check.

mod config;
mod data;
mod gradcheck;
mod loss;
mod paradigm;
mod policy;
mod train;

pub use config::{Stage, TrainConfig, TrainableSetSpec, MID_PREFIX};
pub use data::{build_cotrain_sampler, Batch, CotrainSampler, SampleRef, TargetBank, TrainingSet};
pub use gradcheck::{pipeline_gradcheck, CoordCheck, PipelineCheck, PIPELINE_COORDS};
pub use loss::{total_loss, LossTerms, LossValues, Streams};
pub use paradigm::{run_paradigm, Paradigm, ParadigmRun};
pub use policy::{evaluate_policy, MidStream, Policy, PolicyRunner};
pub use train::{
    distill_on_data, mid_train, mid_train_from, post_train, post_train_steps, pyramid_images,
    smoothed_ends, train_stage, StageKind, StageReport, StepMetrics, LAST_GOOD_FILE, METRICS_FILE,
    MID_CHECKPOINT, POST_CHECKPOINT,
};
