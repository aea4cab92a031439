#![allow(dead_code)]

use frappe_core::diffusion::{ConditionBatch, ConditionInputs, PolicyConfig};
use frappe_core::env::{generate_datasets, DataCounts, DataOptions, DataPyramid};
use frappe_core::Tensor;
use rand::Rng;

pub fn inputs(cfg: &PolicyConfig, rng: &mut impl Rng) -> ConditionInputs {
    ConditionInputs {
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
    }
}

pub fn cond_batch(cfg: &PolicyConfig, b: usize, rng: &mut impl Rng) -> ConditionBatch {
    let all: Vec<_> = (0..b).map(|_| inputs(cfg, rng)).collect();
    let refs: Vec<_> = all.iter().collect();
    ConditionBatch::new(cfg, &refs).unwrap()
}

pub fn noisy(cfg: &PolicyConfig, b: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(&[b * cfg.chunk, cfg.action_dim], 1.0, rng)
}

pub fn pyramid(robot: usize, ego_task: usize, ego_web: usize, seed: u64) -> DataPyramid {
    let counts = DataCounts {
        robot,
        ego_task,
        ego_web,
    };
    generate_datasets(counts, &DataOptions::default(), seed).unwrap()
}
