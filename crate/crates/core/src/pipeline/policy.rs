use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::MID_PREFIX;
use crate::autograd::Tensor;
use crate::checkpoint::{load_tensors, restore_into, save_tensors};
use crate::diffusion::{
    sample_actions, ConditionBatch, ConditionInputs, DiffusionSchedule, PolicyConfig, PolicyModel,
    StreamAdapter, DEFAULT_DIFFUSION_STEPS,
};
use crate::env::{evaluate, ChunkPolicy, EvalResult, Observation, TaskSpec};
use crate::error::{config_err, FrappeError, Result};
use crate::mipa::{ExpertOptions, ExpertSet, LoraBundle, LoraPair};
use crate::nn::{Linear, ParamId, ParamStore};

const META_POLICY: &str = "meta.policy";
const META_MID: &str = "meta.mid";
const META_EXPERTS: &str = "meta.experts";

/// The single prefix stream used in mid-training, optionally with its own
/// LoRA bundle.
#[derive(Debug, Clone)]
pub struct MidStream {
    pub prefix: ParamId,
    pub proj: Linear,
    pub lora: Option<LoraBundle>,
    pub rank: usize,
    pub alpha: f64,
}

impl MidStream {
    /// Registers `mid.prefix`, `mid.proj` and, with `lora = Some((r, α))`,
    /// `mid.lora.{l}.{A|U}`.
    pub fn new(
        store: &mut ParamStore,
        model: &PolicyModel,
        teacher_dim: usize,
        lora: Option<(usize, f64)>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let cfg = &model.cfg;
        let prefix = store.insert(
            format!("{MID_PREFIX}prefix"),
            Tensor::randn(&[cfg.prefix_len, cfg.d_model], 0.02, rng),
        )?;
        let proj = Linear::new(
            store,
            &format!("{MID_PREFIX}proj"),
            cfg.d_model,
            teacher_dim,
            true,
            1.0,
            rng,
        )?;
        let (rank, alpha) = lora.unwrap_or((0, 0.0));
        let lora = match lora {
            Some((r, a)) => {
                let mut pairs = Vec::new();
                for (l, layer) in model.adapted_layers().iter().enumerate() {
                    pairs.push(LoraPair::new(
                        store,
                        &format!("{MID_PREFIX}lora.{l}"),
                        layer.d_in,
                        layer.d_out,
                        r,
                        a,
                        rng,
                    )?);
                }
                Some(LoraBundle { pairs })
            }
            None => None,
        };
        Ok(Self {
            prefix,
            proj,
            lora,
            rank,
            alpha,
        })
    }

    pub fn adapter(&self) -> StreamAdapter<'_> {
        StreamAdapter {
            prefix: Some(self.prefix),
            lora: self.lora.as_ref(),
        }
    }

    pub fn teacher_dim(&self) -> usize {
        self.proj.d_out
    }
}

/// A policy backbone with whatever adapter machinery has been attached.
#[derive(Debug, Clone)]
pub struct Policy {
    pub model: PolicyModel,
    pub store: ParamStore,
    pub mid: Option<MidStream>,
    pub experts: Option<ExpertSet>,
    pub expert_opts: Option<ExpertOptions>,
    /// Training timesteps K of the diffusion schedule.
    pub diffusion_steps: usize,
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

impl Policy {
    /// Freshly initialized backbone.
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = PolicyModel::new(&mut store, cfg, &mut rng_for(seed, 1))?;
        Ok(Self {
            model,
            store,
            mid: None,
            experts: None,
            expert_opts: None,
            diffusion_steps: DEFAULT_DIFFUSION_STEPS,
        })
    }

    pub fn attach_mid(
        &mut self,
        teacher_dim: usize,
        lora: Option<(usize, f64)>,
        seed: u64,
    ) -> Result<()> {
        if self.mid.is_some() {
            return Err(config_err!("policy already has a mid-training stream"));
        }
        self.mid = Some(MidStream::new(
            &mut self.store,
            &self.model,
            teacher_dim,
            lora,
            &mut rng_for(seed, 2),
        )?);
        Ok(())
    }

    pub fn attach_experts(
        &mut self,
        opts: &ExpertOptions,
        prefix_init: Option<&Tensor>,
        seed: u64,
    ) -> Result<()> {
        if self.experts.is_some() {
            return Err(config_err!("policy already has an expert set"));
        }
        let set = ExpertSet::new(
            &mut self.store,
            &self.model,
            opts,
            prefix_init,
            &mut rng_for(seed, 3),
        )?;
        self.experts = Some(set);
        self.expert_opts = Some(opts.clone());
        Ok(())
    }

    /// Current value of the mid-training prefix bank.
    pub fn mid_prefix(&self) -> Option<&Tensor> {
        self.mid.as_ref().map(|m| self.store.get(m.prefix))
    }

    pub fn hash(&self) -> String {
        self.store.hash()
    }

    /// Samples one action chunk per conditioning row, mixing experts when
    /// `use_experts` is set.
    pub fn sample(
        &self,
        cond: &ConditionBatch,
        use_experts: bool,
        steps: usize,
        seed: u64,
    ) -> Result<Tensor> {
        let experts = if use_experts {
            Some(
                self.experts
                    .as_ref()
                    .ok_or_else(|| config_err!("policy has no expert set"))?,
            )
        } else {
            None
        };
        let schedule = DiffusionSchedule::cosine(self.diffusion_steps, steps)?;
        sample_actions(
            &self.model,
            &self.store,
            cond,
            experts,
            &schedule,
            steps,
            seed,
        )
    }

    fn meta(&self) -> Vec<(String, Tensor)> {
        let c = &self.model.cfg;
        let vals = [
            c.d_model as f32,
            c.heads as f32,
            c.layers as f32,
            c.mlp_hidden as f32,
            c.chunk as f32,
            c.action_dim as f32,
            c.proprio_dim as f32,
            c.vocab as f32,
            c.image_size as f32,
            c.channels as f32,
            c.patch as f32,
            c.prefix_len as f32,
            c.control_freq,
            self.diffusion_steps as f32,
        ];
        let mut out = vec![(
            META_POLICY.to_string(),
            Tensor::new(&[vals.len()], vals.to_vec()).expect("meta"),
        )];
        if let Some(m) = &self.mid {
            let v = vec![
                m.teacher_dim() as f32,
                m.lora.is_some() as u8 as f32,
                m.rank as f32,
                m.alpha as f32,
            ];
            out.push((META_MID.to_string(), Tensor::new(&[4], v).expect("meta")));
        }
        if let Some(o) = &self.expert_opts {
            let v = vec![
                o.experts as f32,
                o.teacher_dim as f32,
                o.with_lora as u8 as f32,
                o.rank as f32,
                o.alpha as f32,
                o.smoothing as f32,
            ];
            out.push((
                META_EXPERTS.to_string(),
                Tensor::new(&[6], v).expect("meta"),
            ));
        }
        out
    }

    /// Writes every parameter plus the `meta.*` tensors needed to rebuild
    /// the module layout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = self.meta();
        let tensors = self
            .store
            .iter()
            .map(|(_, n, t)| (n, t))
            .chain(meta.iter().map(|(n, t)| (n.as_str(), t)));
        save_tensors(path, tensors)
    }

    /// Rebuilds a policy from [`Policy::save`] output. Every loaded
    /// parameter starts frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let mut meta = Vec::new();
        let mut src = ParamStore::new();
        for (name, t) in load_tensors(path)? {
            if name.starts_with("meta.") {
                meta.push((name, t));
            } else {
                src.insert(name, t)?;
            }
        }
        let get = |key: &str| {
            meta.iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t.data().to_vec())
        };
        let p = get(META_POLICY).ok_or_else(|| {
            FrappeError::Format(format!("{} lacks {META_POLICY}", path.display()))
        })?;
        if p.len() != 14 {
            return Err(FrappeError::Format(format!(
                "{META_POLICY} has {} entries",
                p.len()
            )));
        }
        let u = |x: f32| x as usize;
        let cfg = PolicyConfig {
            d_model: u(p[0]),
            heads: u(p[1]),
            layers: u(p[2]),
            mlp_hidden: u(p[3]),
            chunk: u(p[4]),
            action_dim: u(p[5]),
            proprio_dim: u(p[6]),
            vocab: u(p[7]),
            image_size: u(p[8]),
            channels: u(p[9]),
            patch: u(p[10]),
            prefix_len: u(p[11]),
            control_freq: p[12],
        };
        let mut policy = Self::new(cfg, 0)?;
        policy.diffusion_steps = u(p[13]);
        if let Some(m) = get(META_MID) {
            let lora = (m[1] != 0.0).then_some((u(m[2]), m[3] as f64));
            policy.attach_mid(u(m[0]), lora, 0)?;
        }
        if let Some(e) = get(META_EXPERTS) {
            let opts = ExpertOptions {
                experts: u(e[0]),
                teacher_dim: u(e[1]),
                with_lora: e[2] != 0.0,
                rank: u(e[3]),
                alpha: e[4] as f64,
                smoothing: e[5] as f64,
            };
            policy.attach_experts(&opts, None, 0)?;
        }
        let missing = restore_into(&mut policy.store, &src)?;
        if !missing.is_empty() {
            return Err(FrappeError::Format(format!(
                "{} is missing {} tensors, first {}",
                path.display(),
                missing.len(),
                missing[0]
            )));
        }
        if let Some((_, name, _)) = src.iter().find(|(_, n, _)| policy.store.id(n).is_none()) {
            return Err(FrappeError::Format(format!(
                "{} has unexpected tensor {name}",
                path.display()
            )));
        }
        policy.store.set_trainable(|_| false);
        Ok(policy)
    }
}

/// Closed-loop adapter sampling chunks from a frozen [`Policy`].
pub struct PolicyRunner<'a> {
    policy: &'a Policy,
    use_experts: bool,
    steps: usize,
    seed: u64,
    calls: u64,
}

impl<'a> PolicyRunner<'a> {
    pub fn new(policy: &'a Policy, use_experts: bool, steps: usize, seed: u64) -> Result<Self> {
        if use_experts && policy.experts.is_none() {
            return Err(config_err!(
                "experts requested but the checkpoint holds no expert set (mid-stage checkpoint?)"
            ));
        }
        DiffusionSchedule::cosine(policy.diffusion_steps, steps)?;
        Ok(Self {
            policy,
            use_experts,
            steps,
            seed,
            calls: 0,
        })
    }
}

impl ChunkPolicy for PolicyRunner<'_> {
    fn chunk_len(&self) -> usize {
        self.policy.model.cfg.chunk
    }

    fn plan(&mut self, observations: &[Observation]) -> Result<Vec<Vec<[f32; 3]>>> {
        let cfg = &self.policy.model.cfg;
        let inputs: Vec<ConditionInputs> = observations
            .iter()
            .map(|o| ConditionInputs {
                observation: o.image.clone(),
                proprio: o.proprio.to_vec(),
                language: o.instruction,
                control_freq: cfg.control_freq,
            })
            .collect();
        let refs: Vec<&ConditionInputs> = inputs.iter().collect();
        let cond = ConditionBatch::new(cfg, &refs)?;
        let seed = self.seed.wrapping_mul(1_000_003).wrapping_add(self.calls);
        self.calls += 1;
        let a = self
            .policy
            .sample(&cond, self.use_experts, self.steps, seed)?;
        Ok(a.data()
            .chunks(cfg.chunk * 3)
            .map(|c| c.chunks(3).map(|x| [x[0], x[1], x[2]]).collect())
            .collect())
    }
}

/// Success rate of `policy` over `episodes` seeded layouts.
pub fn evaluate_policy(
    policy: &Policy,
    use_experts: bool,
    task: &TaskSpec,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<EvalResult> {
    let mut runner = PolicyRunner::new(policy, use_experts, steps, seed)?;
    evaluate(&mut runner, task, episodes, seed)
}
