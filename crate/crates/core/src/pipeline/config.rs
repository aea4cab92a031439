use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::{PolicyConfig, DEFAULT_DIFFUSION_STEPS, DEFAULT_SAMPLER_STEPS};
use crate::error::{config_err, FrappeError, Result};
use crate::mipa::{is_expert_param, LORA_ALPHA, LORA_RANK};
use crate::nn::ParamStore;

/// Hyperparameters of both training stages. Serializes to flat
/// `key = value` text whose keys are the field names.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Alignment weight.
    pub lambda1: f64,
    /// Load-balance weight.
    pub lambda2: f64,
    /// Router weight smoothing.
    pub smoothing: f64,
    /// Frames between the observation and its alignment target.
    pub horizon: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub mid_steps: usize,
    pub post_steps: usize,
    pub seed: u64,
    pub ratio_robot: f64,
    pub ratio_ego_task: f64,
    pub ratio_ego_web: f64,
    pub experts: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub prefix_len: usize,
    pub diffusion_steps: usize,
    pub sampler_steps: usize,
    pub distill_steps: usize,
    pub distill_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            lambda1: 0.05,
            lambda2: 0.01,
            smoothing: 0.1,
            horizon: 8,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 1.0,
            batch_size: 16,
            mid_steps: 3000,
            post_steps: 1000,
            seed: 0,
            ratio_robot: 1.0,
            ratio_ego_task: 0.0,
            ratio_ego_web: 0.0,
            experts: 3,
            lora_rank: LORA_RANK,
            lora_alpha: LORA_ALPHA,
            d_model: p.d_model,
            heads: p.heads,
            layers: p.layers,
            mlp_hidden: p.mlp_hidden,
            prefix_len: p.prefix_len,
            diffusion_steps: DEFAULT_DIFFUSION_STEPS,
            sampler_steps: DEFAULT_SAMPLER_STEPS,
            distill_steps: 1000,
            distill_lr: 1e-3,
        }
    }
}

macro_rules! impl_kv {
    ($($f:ident),*) => {
        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($f)),*];

            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $(stringify!($f) => {
                        self.$f = value
                            .parse()
                            .map_err(|e| config_err!("bad value {value:?} for {}: {e}", stringify!($f)))?;
                    })*
                    other => return Err(config_err!("unknown config key {other:?}")),
                }
                Ok(())
            }

            /// Every field as `key = value` lines, in declaration order.
            pub fn to_kv(&self) -> String {
                let mut s = String::new();
                $(let _ = writeln!(s, "{} = {}", stringify!($f), self.$f);)*
                s
            }
        }
    };
}

impl_kv!(
    lambda1,
    lambda2,
    smoothing,
    horizon,
    lr,
    beta1,
    beta2,
    grad_clip,
    batch_size,
    mid_steps,
    post_steps,
    seed,
    ratio_robot,
    ratio_ego_task,
    ratio_ego_web,
    experts,
    lora_rank,
    lora_alpha,
    d_model,
    heads,
    layers,
    mlp_hidden,
    prefix_len,
    diffusion_steps,
    sampler_steps,
    distill_steps,
    distill_lr
);

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_lines(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_lines(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key = value, got {line:?}", i + 1))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FrappeError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err!("override {o:?} is not key=value"))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(config_err!(
                    "{name} must be finite and non-negative, got {v}"
                ))
            }
        };
        finite_nonneg("lambda1", self.lambda1)?;
        finite_nonneg("lambda2", self.lambda2)?;
        finite_nonneg("grad_clip", self.grad_clip)?;
        finite_nonneg("ratio_robot", self.ratio_robot)?;
        finite_nonneg("ratio_ego_task", self.ratio_ego_task)?;
        finite_nonneg("ratio_ego_web", self.ratio_ego_web)?;
        if self.ratios().iter().sum::<f64>() <= 0.0 {
            return Err(config_err!("data-mixture ratios are all zero"));
        }
        if self.mid_steps + self.post_steps == 0 {
            return Err(config_err!("mid_steps + post_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(config_err!("smoothing {} outside [0, 1)", self.smoothing));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!(
                "learning rate must be positive, got {}",
                self.lr
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("Adam betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if self.experts == 0 {
            return Err(config_err!("experts must be positive"));
        }
        if self.sampler_steps == 0 || self.sampler_steps > self.diffusion_steps {
            return Err(config_err!(
                "sampler_steps {} must be in 1..={}",
                self.sampler_steps,
                self.diffusion_steps
            ));
        }
        self.policy_config().validate()
    }

    pub fn ratios(&self) -> [f64; 3] {
        [self.ratio_robot, self.ratio_ego_task, self.ratio_ego_web]
    }

    pub fn grad_clip(&self) -> Option<f64> {
        (self.grad_clip > 0.0).then_some(self.grad_clip)
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            mlp_hidden: self.mlp_hidden,
            prefix_len: self.prefix_len,
            ..PolicyConfig::default()
        }
    }
}

/// Training stage a trainable set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Mid,
    Post,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Mid => "mid",
            Stage::Post => "post",
        }
    }
}

pub const MID_PREFIX: &str = "mid.";

/// Explicit allowlist of the parameter names a stage optimizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableSetSpec {
    pub stage: Stage,
    pub allow: Vec<String>,
}

impl TrainableSetSpec {
    /// Every `policy.*` parameter and the single `mid.*` stream.
    pub fn mid(store: &ParamStore) -> Self {
        Self::select(Stage::Mid, store, |n| {
            n.starts_with("policy.") || n.starts_with(MID_PREFIX)
        })
    }

    /// Only the `mid.*` stream; the backbone stays frozen.
    pub fn mid_adapters(store: &ParamStore) -> Self {
        Self::select(Stage::Mid, store, |n| n.starts_with(MID_PREFIX))
    }

    /// Expert prefixes, LoRA, projections and the router.
    pub fn post(store: &ParamStore) -> Self {
        Self::select(Stage::Post, store, is_expert_param)
    }

    pub fn select(stage: Stage, store: &ParamStore, mut keep: impl FnMut(&str) -> bool) -> Self {
        let allow = store
            .iter()
            .map(|(_, n, _)| n)
            .filter(|n| keep(n))
            .map(str::to_string)
            .collect();
        Self { stage, allow }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.allow.iter().any(|a| a == name)
    }

    /// Sets `requires_grad` on exactly the allowlisted parameters.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        for name in &self.allow {
            if store.id(name).is_none() {
                return Err(config_err!("trainable parameter {name} is not registered"));
            }
        }
        store.set_trainable(|n| self.contains(n));
        Ok(())
    }
}
