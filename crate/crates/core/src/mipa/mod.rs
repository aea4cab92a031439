//! Mixture of prefix-and-LoRA experts: adapters, router and aggregation.

mod experts;
mod lora;
mod router;

pub use experts::{
    is_expert_param, Expert, ExpertForward, ExpertOptions, ExpertSet, EXPERT_PREFIX, ROUTER_PREFIX,
};
pub use lora::{lora_forward, LoraBundle, LoraPair, LORA_ALPHA, LORA_RANK};
pub use router::{
    aggregate, load_balance_loss, load_balance_value, mix_latents, smooth_weight_values,
    smooth_weights, softmax_values, Router, DEFAULT_SMOOTHING, ROUTER_HIDDEN,
};
