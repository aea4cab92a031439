use rand::Rng;

use crate::autograd::{Real, Tape, Tensor, Var};
use crate::error::{config_err, shape_err, FrappeError, Result};
use crate::mipa::LoraBundle;
use crate::nn::{LayerNorm, Linear, ParamId, ParamStore};

/// Architecture of the denoising policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    /// Actions per chunk (T_a).
    pub chunk: usize,
    pub action_dim: usize,
    pub proprio_dim: usize,
    pub vocab: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    /// Future prefix tokens per stream (n).
    pub prefix_len: usize,
    pub control_freq: f32,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 8,
            mlp_hidden: 128,
            chunk: 8,
            action_dim: 3,
            proprio_dim: 5,
            vocab: 8,
            image_size: 32,
            channels: 3,
            patch: 8,
            prefix_len: 4,
            control_freq: 10.0,
        }
    }
}

impl PolicyConfig {
    /// Small configuration for fast tests.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            heads: 2,
            layers: 2,
            mlp_hidden: 16,
            ..Self::default()
        }
    }

    /// 1-based block whose output feeds the prefix alignment: ⌈3L/4⌉.
    pub fn prefix_read_layer(&self) -> usize {
        (3 * self.layers).div_ceil(4)
    }

    pub fn vision_tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Tokens before the action block: timestep, frequency, proprio.
    pub const LEAD_TOKENS: usize = 3;

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 || self.d_model % 2 != 0 {
            return Err(config_err!(
                "d_model {} must be even and divisible by heads {}",
                self.d_model,
                self.heads
            ));
        }
        if self.image_size % self.patch != 0 {
            return Err(config_err!(
                "patch {} must divide image size {}",
                self.patch,
                self.image_size
            ));
        }
        if self.layers == 0 || self.chunk == 0 {
            return Err(config_err!("layers and chunk must be positive"));
        }
        Ok(())
    }
}

/// Conditioning of one sample: image, proprioception, instruction, control rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionInputs {
    /// `[channels, size, size]`, values in [0, 1].
    pub observation: Tensor,
    pub proprio: Vec<f32>,
    pub language: usize,
    pub control_freq: f32,
}

/// A batch of conditions already laid out for the encoder.
#[derive(Debug, Clone)]
pub struct ConditionBatch {
    pub batch: usize,
    /// `[batch*vision_tokens, patch_dim]`
    pub patches: Tensor,
    /// `[batch, proprio_dim]`
    pub proprio: Tensor,
    pub language: Vec<usize>,
    pub control_freq: f32,
}

impl ConditionBatch {
    pub fn new(cfg: &PolicyConfig, inputs: &[&ConditionInputs]) -> Result<Self> {
        if inputs.is_empty() {
            return Err(FrappeError::Data("empty condition batch".into()));
        }
        let mut patches = Vec::with_capacity(inputs.len() * cfg.image_numel());
        let mut proprio = Vec::with_capacity(inputs.len() * cfg.proprio_dim);
        let mut language = Vec::with_capacity(inputs.len());
        for c in inputs {
            if c.observation.shape() != [cfg.channels, cfg.image_size, cfg.image_size] {
                return Err(shape_err!("observation shape {:?}", c.observation.shape()));
            }
            if c.proprio.len() != cfg.proprio_dim {
                return Err(shape_err!(
                    "proprio length {} != {}",
                    c.proprio.len(),
                    cfg.proprio_dim
                ));
            }
            if c.language >= cfg.vocab {
                return Err(FrappeError::Index(format!(
                    "language id {} >= vocabulary {}",
                    c.language, cfg.vocab
                )));
            }
            patchify(cfg, c.observation.data(), &mut patches);
            proprio.extend_from_slice(&c.proprio);
            language.push(c.language);
        }
        let b = inputs.len();
        Ok(Self {
            batch: b,
            patches: Tensor::new(&[b * cfg.vision_tokens(), cfg.patch_dim()], patches)?,
            proprio: Tensor::new(&[b, cfg.proprio_dim], proprio)?,
            language,
            control_freq: inputs[0].control_freq,
        })
    }
}

/// Splits a `[C, H, W]` image into non-overlapping square patches, each
/// flattened channel-major.
pub fn patchify(cfg: &PolicyConfig, image: &[f32], out: &mut Vec<f32>) {
    let (s, p) = (cfg.image_size, cfg.patch);
    let per_side = s / p;
    for py in 0..per_side {
        for px in 0..per_side {
            for c in 0..cfg.channels {
                for y in 0..p {
                    let row = c * s * s + (py * p + y) * s + px * p;
                    out.extend_from_slice(&image[row..row + p]);
                }
            }
        }
    }
}

/// Sinusoidal embedding of a scalar position.
pub fn sinusoidal(value: f64, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out.push((value * freq).sin() as f32);
    }
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out.push((value * freq).cos() as f32);
    }
    out
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    lora: [usize; 4],
}

impl Attention {
    fn new(
        store: &mut ParamStore,
        adapted: &mut Vec<Linear>,
        name: &str,
        d: usize,
        out_gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut idx = [0; 4];
        for (i, (suffix, gain)) in [("q", 1.0), ("k", 1.0), ("v", 1.0), ("o", out_gain)]
            .into_iter()
            .enumerate()
        {
            adapted.push(Linear::new(
                store,
                &format!("{name}.{suffix}"),
                d,
                d,
                true,
                gain,
                rng,
            )?);
            idx[i] = adapted.len() - 1;
        }
        Ok(Self {
            q: adapted[idx[0]].clone(),
            k: adapted[idx[1]].clone(),
            v: adapted[idx[2]].clone(),
            o: adapted[idx[3]].clone(),
            lora: idx,
        })
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_mlp: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    lora_mlp: [usize; 2],
}

/// Two-layer MLP decoding one action per latent token.
#[derive(Debug, Clone)]
pub struct ActionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ActionHead {
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, latents: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, latents)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}

/// Per-stream adapters: which prefix bank and LoRA bundle are active.
#[derive(Debug, Clone, Copy, Default)]
pub struct StreamAdapter<'a> {
    pub prefix: Option<ParamId>,
    pub lora: Option<&'a LoraBundle>,
}

/// Encoded conditioning shared by every stream of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning {
    pub batch: usize,
    /// `[batch*vision_tokens, d]`
    pub vision: Var,
    /// `[batch, d]`
    pub proprio: Var,
    /// `[batch, d]`
    pub frequency: Var,
    /// Cross-attention memory `[batch*(vision_tokens+1), d]`.
    pub context: Var,
    /// Router input: mean-pooled vision tokens ⊕ proprio token, `[batch, 2d]`.
    pub summary: Var,
}

/// Outputs of one stream through the backbone.
#[derive(Debug, Clone, Copy)]
pub struct StreamOutput {
    /// Final hidden states at the action positions, `[batch*chunk, d]`.
    pub action_latents: Var,
    /// Hidden states at the prefix positions after the read layer, `[batch*n, d]`.
    pub prefix_outputs: Option<Var>,
}

/// DiT-style denoiser: condition encoders, transformer backbone with
/// cross-attention, and an action head.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub cfg: PolicyConfig,
    patch_embed: Linear,
    patch_mix: Linear,
    vision_pos: ParamId,
    language: ParamId,
    context_norm: LayerNorm,
    time_fc1: Linear,
    time_fc2: Linear,
    freq_proj: Linear,
    proprio_proj: Linear,
    action_in: Linear,
    action_pos: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    pub head: ActionHead,
    adapted: Vec<Linear>,
}

pub const POLICY_PREFIX: &str = "policy.";
pub const VISION_PREFIX: &str = "policy.vision.";
pub const HEAD_PREFIX: &str = "policy.head.";

impl PolicyModel {
    /// Registers every parameter under `policy.*` in `store`.
    pub fn new(store: &mut ParamStore, cfg: PolicyConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let resid = 1.0 / ((2 * cfg.layers) as f64).sqrt();
        let mut adapted = Vec::new();
        let patch_embed = Linear::new(
            store,
            "policy.vision.patch",
            cfg.patch_dim(),
            d,
            true,
            1.0,
            rng,
        )?;
        let patch_mix = Linear::new(store, "policy.vision.mix", d, d, true, 1.0, rng)?;
        let vision_pos = store.insert(
            "policy.vision.pos",
            Tensor::randn(&[cfg.vision_tokens(), d], 0.02, rng),
        )?;
        let language = store.insert(
            "policy.language.embed",
            Tensor::randn(&[cfg.vocab, d], 1.0, rng),
        )?;
        let context_norm = LayerNorm::new(store, "policy.context_norm", d)?;
        let time_fc1 = Linear::new(store, "policy.time.fc1", d, d, true, 1.0, rng)?;
        let time_fc2 = Linear::new(store, "policy.time.fc2", d, d, true, 1.0, rng)?;
        let freq_proj = Linear::new(store, "policy.freq", d, d, true, 1.0, rng)?;
        let proprio_proj =
            Linear::new(store, "policy.proprio", cfg.proprio_dim, d, true, 1.0, rng)?;
        let action_in = Linear::new(store, "policy.action_in", cfg.action_dim, d, true, 1.0, rng)?;
        let action_pos = store.insert(
            "policy.action_pos",
            Tensor::randn(&[cfg.chunk, d], 0.02, rng),
        )?;

        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let base = format!("policy.blocks.{l}");
            let ln_self = LayerNorm::new(store, &format!("{base}.ln_self"), d)?;
            let self_attn = Attention::new(
                store,
                &mut adapted,
                &format!("{base}.self_attn"),
                d,
                resid,
                rng,
            )?;
            let ln_cross = LayerNorm::new(store, &format!("{base}.ln_cross"), d)?;
            let cross_attn = Attention::new(
                store,
                &mut adapted,
                &format!("{base}.cross_attn"),
                d,
                resid,
                rng,
            )?;
            let ln_mlp = LayerNorm::new(store, &format!("{base}.ln_mlp"), d)?;
            let fc1 = Linear::new(
                store,
                &format!("{base}.mlp.fc1"),
                d,
                cfg.mlp_hidden,
                true,
                1.0,
                rng,
            )?;
            adapted.push(fc1.clone());
            let fc2 = Linear::new(
                store,
                &format!("{base}.mlp.fc2"),
                cfg.mlp_hidden,
                d,
                true,
                resid,
                rng,
            )?;
            adapted.push(fc2.clone());
            let n = adapted.len();
            blocks.push(Block {
                ln_self,
                self_attn,
                ln_cross,
                cross_attn,
                ln_mlp,
                fc1,
                fc2,
                lora_mlp: [n - 2, n - 1],
            });
        }
        let final_norm = LayerNorm::new(store, "policy.final_norm", d)?;
        let head = ActionHead {
            fc1: Linear::new(store, "policy.head.fc1", d, d, true, 1.0, rng)?,
            fc2: Linear::new(store, "policy.head.fc2", d, cfg.action_dim, true, 1.0, rng)?,
        };
        Ok(Self {
            cfg,
            patch_embed,
            patch_mix,
            vision_pos,
            language,
            context_norm,
            time_fc1,
            time_fc2,
            freq_proj,
            proprio_proj,
            action_in,
            action_pos,
            blocks,
            final_norm,
            head,
            adapted,
        })
    }

    /// Backbone projections that accept a LoRA delta, in bundle order.
    pub fn adapted_layers(&self) -> &[Linear] {
        &self.adapted
    }

    /// Encodes vision, language, proprioception and control frequency.
    pub fn condition<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        cond: &ConditionBatch,
    ) -> Result<Conditioning> {
        let b = cond.batch;
        let d = self.cfg.d_model;
        let patches = tape.constant(&cond.patches.cast());
        let v = self.patch_embed.forward(tape, patches)?;
        let v = tape.gelu(v);
        let v = self.patch_mix.forward(tape, v)?;
        let pos = tape.param(self.vision_pos);
        let pos = tape.tile(pos, b);
        let vision = tape.add(v, pos)?;

        let table = tape.param(self.language);
        let lang = tape.embedding(table, &cond.language)?;
        let ctx = tape.group_concat(&[vision, lang], b)?;
        let context = self.context_norm.forward(tape, ctx)?;

        let proprio = tape.constant(&cond.proprio.cast());
        let proprio = self.proprio_proj.forward(tape, proprio)?;

        let f = sinusoidal(cond.control_freq as f64, d);
        let f: Vec<T> = (0..b)
            .flat_map(|_| f.iter().map(|&x| T::of_f32(x)))
            .collect();
        let f = tape.constant_from(&[b, d], f)?;
        let frequency = self.freq_proj.forward(tape, f)?;

        let pooled = tape.group_mean(vision, b)?;
        let summary = tape.concat_cols(pooled, proprio)?;
        Ok(Conditioning {
            batch: b,
            vision,
            proprio,
            frequency,
            context,
            summary,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn attend<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        attn: &Attention,
        x: Var,
        memory: Var,
        groups: usize,
        hidden_from: Option<usize>,
        lora: Option<&LoraBundle>,
    ) -> Result<Var> {
        let pick = |i: usize| lora.and_then(|b| b.get(attn.lora[i]));
        let q = attn.q.forward_adapted(tape, x, pick(0))?;
        let k = attn.k.forward_adapted(tape, memory, pick(1))?;
        let v = attn.v.forward_adapted(tape, memory, pick(2))?;
        let h = tape.attention_masked(q, k, v, groups, self.cfg.heads, hidden_from)?;
        attn.o.forward_adapted(tape, h, pick(3))
    }

    /// Runs one stream: builds the token sequence
    /// `[timestep, frequency, proprio, noisy actions…, prefix…]` and applies
    /// the backbone. `noisy` is `[batch*chunk, action_dim]`, `timesteps` has
    /// one entry per sample.
    pub fn stream<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        cond: &Conditioning,
        noisy: &Tensor,
        timesteps: &[usize],
        adapter: StreamAdapter<'_>,
    ) -> Result<StreamOutput> {
        let b = cond.batch;
        let d = self.cfg.d_model;
        let ta = self.cfg.chunk;
        if timesteps.len() != b || noisy.shape() != [b * ta, self.cfg.action_dim] {
            return Err(shape_err!(
                "stream expects {} timesteps and noisy actions [{}, {}], got {} and {:?}",
                b,
                b * ta,
                self.cfg.action_dim,
                timesteps.len(),
                noisy.shape()
            ));
        }
        let temb: Vec<T> = timesteps
            .iter()
            .flat_map(|&k| sinusoidal(k as f64, d).into_iter().map(T::of_f32))
            .collect();
        let temb = tape.constant_from(&[b, d], temb)?;
        let t = self.time_fc1.forward(tape, temb)?;
        let t = tape.gelu(t);
        let t = self.time_fc2.forward(tape, t)?;

        let a = tape.constant(&noisy.cast());
        let a = self.action_in.forward(tape, a)?;
        let apos = tape.param(self.action_pos);
        let apos = tape.tile(apos, b);
        let a = tape.add(a, apos)?;

        let mut parts = vec![t, cond.frequency, cond.proprio, a];
        let n = match adapter.prefix {
            Some(p) => {
                let bank = tape.param(p);
                let n = tape.shape(bank)[0];
                parts.push(tape.tile(bank, b));
                n
            }
            None => 0,
        };
        let mut x = tape.group_concat(&parts, b)?;
        let read_at = self.cfg.prefix_read_layer();
        let prefix_start = PolicyConfig::LEAD_TOKENS + ta;
        let mut prefix_outputs = None;
        // prefix tokens read the whole sequence but stay invisible to it
        let mask = (n > 0).then_some(prefix_start);
        for (l, blk) in self.blocks.iter().enumerate() {
            let h = blk.ln_self.forward(tape, x)?;
            let h = self.attend(tape, &blk.self_attn, h, h, b, mask, adapter.lora)?;
            x = tape.add(x, h)?;
            let h = blk.ln_cross.forward(tape, x)?;
            let h = self.attend(
                tape,
                &blk.cross_attn,
                h,
                cond.context,
                b,
                None,
                adapter.lora,
            )?;
            x = tape.add(x, h)?;
            let h = blk.ln_mlp.forward(tape, x)?;
            let pick = |i: usize| adapter.lora.and_then(|bd| bd.get(blk.lora_mlp[i]));
            let h = blk.fc1.forward_adapted(tape, h, pick(0))?;
            let h = tape.gelu(h);
            let h = blk.fc2.forward_adapted(tape, h, pick(1))?;
            x = tape.add(x, h)?;
            if l + 1 == read_at && n > 0 {
                prefix_outputs = Some(tape.group_slice(x, b, prefix_start, n)?);
            }
        }
        let x = self.final_norm.forward(tape, x)?;
        let action_latents = tape.group_slice(x, b, PolicyConfig::LEAD_TOKENS, ta)?;
        Ok(StreamOutput {
            action_latents,
            prefix_outputs,
        })
    }

    /// Decodes latents `[batch*chunk, d]` into actions `[batch*chunk, action_dim]`.
    pub fn decode<T: Real>(&self, tape: &mut Tape<'_, T>, latents: Var) -> Result<Var> {
        self.head.forward(tape, latents)
    }
}
