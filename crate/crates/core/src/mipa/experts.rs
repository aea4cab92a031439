use rand::Rng;

use super::lora::{LoraBundle, LoraPair, LORA_ALPHA, LORA_RANK};
use super::router::{aggregate, smooth_weights, Router, DEFAULT_SMOOTHING};
use crate::autograd::{Real, Tape, Tensor, Var};
use crate::diffusion::{Conditioning, PolicyModel, StreamAdapter};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{Linear, ParamId, ParamStore};

pub const EXPERT_PREFIX: &str = "expert.";
pub const ROUTER_PREFIX: &str = "router.";

/// One MiPA expert: a prefix bank, an optional LoRA bundle over the
/// backbone, and a projection from model width into its teacher's space.
#[derive(Debug, Clone)]
pub struct Expert {
    pub prefix: ParamId,
    pub lora: Option<LoraBundle>,
    pub proj: Linear,
}

impl Expert {
    pub fn adapter(&self) -> StreamAdapter<'_> {
        StreamAdapter {
            prefix: Some(self.prefix),
            lora: self.lora.as_ref(),
        }
    }
}

/// Options for building an [`ExpertSet`].
#[derive(Debug, Clone)]
pub struct ExpertOptions {
    pub experts: usize,
    pub teacher_dim: usize,
    pub with_lora: bool,
    pub rank: usize,
    pub alpha: f64,
    pub smoothing: f64,
}

impl Default for ExpertOptions {
    fn default() -> Self {
        Self {
            experts: 3,
            teacher_dim: 32,
            with_lora: true,
            rank: LORA_RANK,
            alpha: LORA_ALPHA,
            smoothing: DEFAULT_SMOOTHING,
        }
    }
}

/// M experts sharing one backbone, plus the router that mixes them.
#[derive(Debug, Clone)]
pub struct ExpertSet {
    pub experts: Vec<Expert>,
    pub router: Router,
    pub smoothing: f64,
}

/// Everything one expert-mixture forward produces.
#[derive(Debug, Clone)]
pub struct ExpertForward {
    /// Per-expert action latents `[B*T_a, d]`.
    pub latents: Vec<Var>,
    /// Per-expert prefix outputs `[B*n, d]`.
    pub prefix_outputs: Vec<Var>,
    /// Raw router logits `[B, M]`.
    pub logits: Var,
    /// Smoothed router weights `[B, M]`.
    pub weights: Var,
    /// Decoded clean-action prediction `[B*T_a, action_dim]`, when requested.
    pub actions: Option<Var>,
}

impl ExpertSet {
    /// Registers `expert.{i}.*` and `router.*`. Every prefix bank starts as a
    /// copy of `prefix_init` when given, otherwise at zero.
    pub fn new(
        store: &mut ParamStore,
        model: &PolicyModel,
        opts: &ExpertOptions,
        prefix_init: Option<&Tensor>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cfg = &model.cfg;
        if opts.experts == 0 {
            return Err(config_err!("expert set needs at least one expert"));
        }
        let bank = match prefix_init {
            Some(t) if t.shape() != [cfg.prefix_len, cfg.d_model] => {
                return Err(shape_err!(
                    "prefix init {:?} does not match [{}, {}]",
                    t.shape(),
                    cfg.prefix_len,
                    cfg.d_model
                ))
            }
            Some(t) => t.detach(),
            None => Tensor::zeros(&[cfg.prefix_len, cfg.d_model]),
        };
        let mut experts = Vec::with_capacity(opts.experts);
        for i in 0..opts.experts {
            let prefix = store.insert(format!("expert.{i}.prefix"), bank.clone())?;
            let lora = if opts.with_lora {
                let mut pairs = Vec::new();
                for (l, layer) in model.adapted_layers().iter().enumerate() {
                    pairs.push(LoraPair::new(
                        store,
                        &format!("expert.{i}.lora.{l}"),
                        layer.d_in,
                        layer.d_out,
                        opts.rank,
                        opts.alpha,
                        rng,
                    )?);
                }
                Some(LoraBundle { pairs })
            } else {
                None
            };
            let proj = Linear::new(
                store,
                &format!("expert.{i}.proj"),
                cfg.d_model,
                opts.teacher_dim,
                true,
                1.0,
                rng,
            )?;
            experts.push(Expert { prefix, lora, proj });
        }
        let router = Router::new(store, 2 * cfg.d_model, opts.experts, rng)?;
        Ok(Self {
            experts,
            router,
            smoothing: opts.smoothing,
        })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Runs every expert stream, routes on the conditioning summary and,
    /// with `decode`, decodes the weighted latent mixture with the shared
    /// action head.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        model: &PolicyModel,
        cond: &Conditioning,
        noisy: &Tensor,
        timesteps: &[usize],
        decode: bool,
    ) -> Result<ExpertForward> {
        let mut latents = Vec::with_capacity(self.len());
        let mut prefix_outputs = Vec::with_capacity(self.len());
        for e in &self.experts {
            let out = model.stream(tape, cond, noisy, timesteps, e.adapter())?;
            latents.push(out.action_latents);
            prefix_outputs.push(out.prefix_outputs.expect("expert streams carry a prefix"));
        }
        let (w, logits) = self.router.route(tape, cond.summary)?;
        let weights = smooth_weights(tape, w, self.smoothing)?;
        let actions = if decode {
            Some(aggregate(tape, &latents, weights, &model.head)?)
        } else {
            None
        };
        Ok(ExpertForward {
            latents,
            prefix_outputs,
            logits,
            weights,
            actions,
        })
    }
}

/// Whether `name` belongs to the expert machinery (prefixes, LoRA,
/// projections, router).
pub fn is_expert_param(name: &str) -> bool {
    name.starts_with(EXPERT_PREFIX) || name.starts_with(ROUTER_PREFIX)
}
