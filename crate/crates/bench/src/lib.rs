//! Fixtures shared by the criterion benchmarks in `benches/`.

use frappe_core::diffusion::{ConditionBatch, ConditionInputs, PolicyConfig};
use frappe_core::Tensor;
use rand::Rng;

/// A batch of `b` random conditions for `cfg`.
pub fn random_conditions(cfg: &PolicyConfig, b: usize, rng: &mut impl Rng) -> ConditionBatch {
    let inputs: Vec<ConditionInputs> = (0..b)
        .map(|_| ConditionInputs {
            observation: Tensor::uniform(
                &[cfg.channels, cfg.image_size, cfg.image_size],
                0.0,
                1.0,
                rng,
            ),
            proprio: (0..cfg.proprio_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            language: rng.random_range(0..cfg.vocab),
            control_freq: cfg.control_freq,
        })
        .collect();
    let refs: Vec<&ConditionInputs> = inputs.iter().collect();
    ConditionBatch::new(cfg, &refs).expect("valid conditions")
}
