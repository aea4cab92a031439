//! Denoising action policy: schedule, DiT-style backbone, loss and sampler.

mod model;
mod sampler;
mod schedule;

pub use model::{
    patchify, sinusoidal, ActionHead, ConditionBatch, ConditionInputs, Conditioning, PolicyConfig,
    PolicyModel, StreamAdapter, StreamOutput, HEAD_PREFIX, POLICY_PREFIX, VISION_PREFIX,
};
pub use sampler::{action_loss, masked_action_loss, predict_clean, sample_actions};
pub use schedule::{
    noise_with_alpha_bar, DiffusionSchedule, DEFAULT_DIFFUSION_STEPS, DEFAULT_SAMPLER_STEPS,
};
