use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::Encoder;
use crate::autograd::Tensor;
use crate::diffusion::{ConditionBatch, ConditionInputs, DiffusionSchedule, PolicyConfig};
use crate::env::{DataPyramid, Dataset, Episode, Source};
use crate::error::{config_err, FrappeError, Result};

/// One training frame: episode `episode` of `source` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub source: Source,
    pub episode: usize,
    pub t: usize,
    pub has_actions: bool,
}

struct SourceIndex {
    source: Source,
    lengths: Vec<usize>,
    has_actions: Vec<bool>,
}

/// Endless per-sample draws from the three data tiers with fixed
/// probabilities.
pub struct CotrainSampler {
    sources: Vec<SourceIndex>,
    cumulative: Vec<f64>,
    rng: ChaCha8Rng,
}

/// Builds a sampler drawing each sample's source with probability
/// proportional to `ratios` (robot, ego-task, ego-web).
pub fn build_cotrain_sampler(
    robot: &Dataset,
    ego_task: &Dataset,
    ego_web: &Dataset,
    ratios: [f64; 3],
    seed: u64,
) -> Result<CotrainSampler> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(config_err!(
            "mixture ratios must be finite and non-negative, got {ratios:?}"
        ));
    }
    if ratios.iter().sum::<f64>() <= 0.0 {
        return Err(config_err!("mixture ratios are all zero"));
    }
    let mut sources = Vec::new();
    let mut cumulative = Vec::new();
    let mut acc = 0.0;
    for ((source, ds), r) in Source::ALL
        .into_iter()
        .zip([robot, ego_task, ego_web])
        .zip(ratios)
    {
        if r == 0.0 {
            continue;
        }
        if ds.episodes.iter().all(|e| e.steps.is_empty()) {
            return Err(config_err!(
                "ratio {r} on empty {} dataset",
                source.file_name()
            ));
        }
        acc += r;
        cumulative.push(acc);
        sources.push(SourceIndex {
            source,
            lengths: ds.episodes.iter().map(|e| e.steps.len()).collect(),
            has_actions: ds.episodes.iter().map(|e| e.has_actions).collect(),
        });
    }
    Ok(CotrainSampler {
        sources,
        cumulative,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl CotrainSampler {
    pub fn batch(&mut self, n: usize) -> Vec<SampleRef> {
        self.take(n).collect()
    }
}

impl Iterator for CotrainSampler {
    type Item = SampleRef;

    fn next(&mut self) -> Option<SampleRef> {
        let total = *self.cumulative.last()?;
        let u = self.rng.random_range(0.0..total);
        let s = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.sources.len() - 1);
        let src = &self.sources[s];
        let episode = loop {
            let e = self.rng.random_range(0..src.lengths.len());
            if src.lengths[e] > 0 {
                break e;
            }
        };
        let t = self.rng.random_range(0..src.lengths[episode]);
        Some(SampleRef {
            source: src.source,
            episode,
            t,
            has_actions: src.has_actions[episode],
        })
    }
}

/// Teacher embeddings of every frame of every episode, computed once.
#[derive(Debug, Clone)]
pub struct TargetBank {
    encoders: usize,
    rows: usize,
    // [source][episode][frame] -> encoders * rows * dim values
    frames: Vec<Vec<Vec<Vec<f32>>>>,
    dim: usize,
}

impl TargetBank {
    pub fn build(data: &DataPyramid, encoders: &[&dyn Encoder]) -> Result<Self> {
        if encoders.is_empty() {
            return Ok(Self {
                encoders: 0,
                rows: 0,
                frames: vec![Vec::new(); 3],
                dim: 0,
            });
        }
        let (mut rows, mut dim) = (0, 0);
        let mut frames = Vec::with_capacity(3);
        for s in Source::ALL {
            let mut eps = Vec::new();
            for ep in &data.get(s).episodes {
                let mut fr = Vec::with_capacity(ep.steps.len());
                for step in &ep.steps {
                    let image = step.image();
                    let mut buf = Vec::new();
                    for enc in encoders {
                        let e = enc.encode(&image)?;
                        rows = e.shape()[0];
                        dim = e.cols();
                        buf.extend_from_slice(e.data());
                    }
                    fr.push(buf);
                }
                eps.push(fr);
            }
            frames.push(eps);
        }
        Ok(Self {
            encoders: encoders.len(),
            rows,
            frames,
            dim,
        })
    }

    pub fn encoders(&self) -> usize {
        self.encoders
    }

    /// Embedding of one frame under encoder `enc`, `rows × dim` values.
    pub fn get(&self, source: Source, episode: usize, frame: usize, enc: usize) -> Option<&[f32]> {
        let buf = self
            .frames
            .get(source_index(source))?
            .get(episode)?
            .get(frame)?;
        let n = self.rows * self.dim;
        (enc < self.encoders).then(|| &buf[enc * n..(enc + 1) * n])
    }
}

fn source_index(s: Source) -> usize {
    match s {
        Source::Robot => 0,
        Source::EgoTask => 1,
        Source::EgoWeb => 2,
    }
}

/// A fully materialized training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub samples: Vec<SampleRef>,
    pub cond: ConditionBatch,
    /// Clean action chunks `[B*T_a, 3]`, zero rows for action-free samples.
    pub actions: Tensor,
    pub labeled: Vec<bool>,
    pub noisy: Tensor,
    pub timesteps: Vec<usize>,
    /// Per-encoder future-frame embeddings `[B*n, d_Φ]`.
    pub targets: Vec<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn any_labeled(&self) -> bool {
        self.labeled.iter().any(|&l| l)
    }
}

/// Data pyramid plus precomputed alignment targets.
pub struct TrainingSet<'a> {
    pub data: &'a DataPyramid,
    pub targets: TargetBank,
    pub horizon: usize,
}

impl<'a> TrainingSet<'a> {
    pub fn new(data: &'a DataPyramid, encoders: &[&dyn Encoder], horizon: usize) -> Result<Self> {
        Ok(Self {
            data,
            targets: TargetBank::build(data, encoders)?,
            horizon,
        })
    }

    fn episode(&self, s: &SampleRef) -> Result<&Episode> {
        let ep = self
            .data
            .get(s.source)
            .episodes
            .get(s.episode)
            .ok_or_else(|| {
                FrappeError::Data(format!(
                    "{:?} episode {} does not exist",
                    s.source, s.episode
                ))
            })?;
        if s.t >= ep.steps.len() {
            return Err(FrappeError::Data(format!(
                "frame {} outside {:?} episode {} of length {}",
                s.t,
                s.source,
                s.episode,
                ep.steps.len()
            )));
        }
        Ok(ep)
    }

    /// Assembles a batch, drawing noise and timesteps from `rng`.
    pub fn batch(
        &self,
        cfg: &PolicyConfig,
        samples: &[SampleRef],
        schedule: &DiffusionSchedule,
        rng: &mut impl Rng,
    ) -> Result<Batch> {
        if samples.is_empty() {
            return Err(FrappeError::Data("empty batch".into()));
        }
        let (ta, ad) = (cfg.chunk, cfg.action_dim);
        let mut inputs = Vec::with_capacity(samples.len());
        let mut actions = Vec::with_capacity(samples.len() * ta * ad);
        let mut labeled = Vec::with_capacity(samples.len());
        let mut targets = vec![Vec::new(); self.targets.encoders()];
        for s in samples {
            let ep = self.episode(s)?;
            let step = &ep.steps[s.t];
            inputs.push(ConditionInputs {
                observation: step.image(),
                proprio: step.proprio.to_vec(),
                language: ep.instruction,
                control_freq: cfg.control_freq,
            });
            match ep.action_chunk(s.t, ta) {
                Some(a) => {
                    actions.extend(a);
                    labeled.push(true);
                }
                None => {
                    actions.extend(std::iter::repeat_n(0.0, ta * ad));
                    labeled.push(false);
                }
            }
            let future = ep.future_index(s.t, self.horizon);
            for (enc, out) in targets.iter_mut().enumerate() {
                let e = self
                    .targets
                    .get(s.source, s.episode, future, enc)
                    .ok_or_else(|| {
                        FrappeError::Data(format!(
                            "no future frame {future} for {:?} episode {}",
                            s.source, s.episode
                        ))
                    })?;
                out.extend_from_slice(e);
            }
        }
        let refs: Vec<&ConditionInputs> = inputs.iter().collect();
        let cond = ConditionBatch::new(cfg, &refs)?;
        let b = samples.len();
        let actions = Tensor::new(&[b * ta, ad], actions)?;
        let timesteps: Vec<usize> = (0..b)
            .map(|_| rng.random_range(1..=schedule.steps()))
            .collect();
        let eps = Tensor::<f32>::randn(&[b * ta, ad], 1.0, rng);
        let mut noisy = Vec::with_capacity(b * ta * ad);
        for (i, &k) in timesteps.iter().enumerate() {
            let ab = schedule.alpha_bar(k)?;
            let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let r = i * ta * ad..(i + 1) * ta * ad;
            noisy.extend(
                actions.data()[r.clone()]
                    .iter()
                    .zip(&eps.data()[r])
                    .map(|(&a, &e)| sa * a + sn * e),
            );
        }
        let noisy = Tensor::new(&[b * ta, ad], noisy)?;
        let targets = targets
            .into_iter()
            .map(|t| {
                let cols = self.targets.dim;
                let rows = t.len() / cols.max(1);
                Tensor::new(&[rows, cols], t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            samples: samples.to_vec(),
            cond,
            actions,
            labeled,
            noisy,
            timesteps,
            targets,
        })
    }
}
