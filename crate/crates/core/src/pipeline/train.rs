use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{debug, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Stage, TrainConfig, TrainableSetSpec};
use super::data::{build_cotrain_sampler, TrainingSet};
use super::loss::{total_loss, LossValues, Streams};
use super::policy::Policy;
use crate::alignment::{
    distill_teacher, Distillation, DistilledTeacher, Encoder, TeacherEncoder, TEACHER_DIM,
};
use crate::autograd::{Tape, Tensor};
use crate::diffusion::DiffusionSchedule;
use crate::env::{DataPyramid, Source};
use crate::error::{config_err, FrappeError, Result};
use crate::mipa::ExpertOptions;
use crate::nn::Adam;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_GOOD_FILE: &str = "last_good.frap";
pub const MID_CHECKPOINT: &str = "mid.frap";
pub const POST_CHECKPOINT: &str = "post.frap";

/// What one stage optimizes and through which streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    /// Backbone only, action loss only.
    Plain,
    /// Backbone plus the single prefix stream.
    MidFull,
    /// Only the single prefix stream (and its LoRA); backbone frozen.
    MidAdapters,
    /// Expert prefixes, LoRA, projections and router; backbone frozen.
    Post,
}

impl StageKind {
    fn salt(self) -> u64 {
        match self {
            StageKind::Plain => 11,
            StageKind::MidFull => 12,
            StageKind::MidAdapters => 13,
            StageKind::Post => 14,
        }
    }
}

/// Logged components of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: LossValues,
    pub grad_norm: f64,
}

/// Per-step log of a finished stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub kind: StageKind,
    pub metrics: Vec<StepMetrics>,
    pub trainable: usize,
    pub total_params: usize,
}

/// Mean of `series` over its first and last `window` entries.
pub fn smoothed_ends(series: &[f64], window: usize) -> Option<(f64, f64)> {
    if series.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(series.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&series[..w]), mean(&series[series.len() - w..])))
}

impl StageReport {
    pub fn series(&self, f: impl Fn(&StepMetrics) -> f64) -> Vec<f64> {
        self.metrics.iter().map(f).collect()
    }

    pub fn action_series(&self) -> Vec<f64> {
        self.series(|m| m.loss.action)
    }

    pub fn align_series(&self) -> Vec<f64> {
        self.series(|m| m.loss.align)
    }

    pub fn expert_align_series(&self, i: usize) -> Vec<f64> {
        self.series(|m| m.loss.align_per.get(i).copied().unwrap_or(f64::NAN))
    }
}

fn csv_header(streams: usize, experts: usize) -> String {
    let mut h = String::from("step,loss_total,loss_action,loss_align");
    for i in 0..streams {
        h.push_str(&format!(",loss_align_{i}"));
    }
    h.push_str(",loss_balance");
    for i in 0..experts {
        h.push_str(&format!(",w_{i}"));
    }
    h.push_str(",grad_norm");
    h
}

fn csv_row(m: &StepMetrics) -> String {
    let l = &m.loss;
    let mut r = format!("{},{},{},{}", m.step, l.total, l.action, l.align);
    for a in &l.align_per {
        r.push_str(&format!(",{a}"));
    }
    r.push_str(&format!(",{}", l.balance));
    for w in &l.weights {
        r.push_str(&format!(",{w}"));
    }
    r.push_str(&format!(",{}", m.grad_norm));
    r
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FrappeError + '_ {
    move |e| FrappeError::io(path, e)
}

fn trainable_spec(kind: StageKind, policy: &Policy) -> Result<TrainableSetSpec> {
    let store = &policy.store;
    let need_mid = || {
        policy
            .mid
            .as_ref()
            .ok_or_else(|| config_err!("stage needs a mid-training stream"))
    };
    Ok(match kind {
        StageKind::Plain => {
            TrainableSetSpec::select(Stage::Mid, store, |n| n.starts_with("policy."))
        }
        StageKind::MidFull => {
            need_mid()?;
            TrainableSetSpec::mid(store)
        }
        StageKind::MidAdapters => {
            need_mid()?;
            TrainableSetSpec::mid_adapters(store)
        }
        StageKind::Post => {
            policy
                .experts
                .as_ref()
                .ok_or_else(|| config_err!("post-training needs an expert set"))?;
            TrainableSetSpec::post(store)
        }
    })
}

/// Runs `steps` optimizer steps of one stage on `policy`. Writes the
/// metrics CSV under `out` when given. A non-finite loss or gradient
/// aborts with a numeric error after saving the last good parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    policy: &mut Policy,
    kind: StageKind,
    encoders: &[&dyn Encoder],
    data: &DataPyramid,
    cfg: &TrainConfig,
    steps: usize,
    out: Option<&Path>,
) -> Result<StageReport> {
    cfg.validate()?;
    let spec = trainable_spec(kind, policy)?;
    spec.apply(&mut policy.store)?;
    let streams_n = match kind {
        StageKind::Plain => 0,
        StageKind::MidFull | StageKind::MidAdapters => 1,
        StageKind::Post => policy.experts.as_ref().map_or(0, |e| e.len()),
    };
    if encoders.len() != streams_n {
        return Err(config_err!(
            "{} teachers for {} alignment streams",
            encoders.len(),
            streams_n
        ));
    }
    let set = TrainingSet::new(data, encoders, cfg.horizon)?;
    let seed = cfg.seed ^ kind.salt().wrapping_mul(0x2545_f491_4f6c_dd1d);
    let mut sampler = build_cotrain_sampler(
        data.get(Source::Robot),
        data.get(Source::EgoTask),
        data.get(Source::EgoWeb),
        cfg.ratios(),
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let schedule = DiffusionSchedule::cosine(policy.diffusion_steps, 1)?;
    let mut opt = Adam::new(&policy.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.grad_clip());
    let experts_n = if kind == StageKind::Post {
        streams_n
    } else {
        0
    };
    let mut csv = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let p = dir.join(METRICS_FILE);
            let mut w = BufWriter::new(File::create(&p).map_err(io_err(&p))?);
            writeln!(w, "{}", csv_header(streams_n, experts_n)).map_err(io_err(&p))?;
            Some((w, p))
        }
        None => None,
    };
    let report_base = StageReport {
        kind,
        metrics: Vec::with_capacity(steps),
        trainable: policy.store.trainable_numel(),
        total_params: policy.store.numel(),
    };
    info!(
        "{kind:?}: {steps} steps, {} of {} parameters trainable",
        report_base.trainable, report_base.total_params
    );
    let mut report = report_base;
    for step in 0..steps {
        let samples = sampler.batch(cfg.batch_size);
        let batch = set.batch(&policy.model.cfg, &samples, &schedule, &mut rng)?;
        let streams = match kind {
            StageKind::Plain => Streams::Plain,
            StageKind::MidFull | StageKind::MidAdapters => {
                Streams::Single(policy.mid.as_ref().expect("checked"))
            }
            StageKind::Post => Streams::Experts(policy.experts.as_ref().expect("checked")),
        };
        let (values, grads) = {
            let mut tape = Tape::with_params(&policy.store);
            let terms = total_loss(
                &mut tape,
                &policy.model,
                streams,
                &batch,
                cfg.lambda1,
                cfg.lambda2,
            )?;
            let values = terms.values(&tape);
            if !values.total.is_finite() {
                (values, None)
            } else {
                (values, Some(tape.backward(terms.total)?))
            }
        };
        let abort = |policy: &Policy, why: String| -> FrappeError {
            if let Some(dir) = out {
                let p = dir.join(LAST_GOOD_FILE);
                match policy.save(&p) {
                    Ok(()) => warn!("saved last good parameters to {}", p.display()),
                    Err(e) => warn!("could not save last good parameters: {e}"),
                }
            }
            FrappeError::Numeric(format!("{kind:?} step {step}: {why}"))
        };
        let Some(grads) = grads else {
            if let Some((w, _)) = csv.as_mut() {
                let _ = w.flush();
            }
            return Err(abort(
                policy,
                format!(
                    "non-finite loss (total {}, action {}, align {}, balance {})",
                    values.total, values.action, values.align, values.balance
                ),
            ));
        };
        policy.store.accumulate(&grads)?;
        // Adam rejects a non-finite norm before touching any value
        let grad_norm = match opt.step(&mut policy.store) {
            Ok(n) => n,
            Err(e) => {
                policy.store.zero_grads();
                return Err(abort(policy, e.to_string()));
            }
        };
        let m = StepMetrics {
            step,
            loss: values,
            grad_norm,
        };
        if let Some((w, p)) = csv.as_mut() {
            writeln!(w, "{}", csv_row(&m)).map_err(io_err(p))?;
        }
        if step % 100 == 0 || step + 1 == steps {
            debug!(
                "{kind:?} step {step}: total {:.4} action {:.4} align {:.4} |g| {:.3}",
                m.loss.total, m.loss.action, m.loss.align, m.grad_norm
            );
        }
        report.metrics.push(m);
    }
    if let Some((mut w, p)) = csv {
        w.flush().map_err(io_err(&p))?;
    }
    policy.store.set_trainable(|_| false);
    Ok(report)
}

/// Every frame image of the three tiers, in source order.
pub fn pyramid_images(data: &DataPyramid) -> Vec<Tensor> {
    Source::ALL
        .iter()
        .flat_map(|&s| data.get(s).episodes.iter())
        .flat_map(|e| e.steps.iter().map(|s| s.image()))
        .collect()
}

/// Distills the teachers into one student on the dataset frames.
pub fn distill_on_data(
    teachers: &[TeacherEncoder],
    data: &DataPyramid,
    cfg: &TrainConfig,
) -> Result<Distillation> {
    distill_teacher(
        teachers,
        &pyramid_images(data),
        cfg.distill_steps,
        cfg.distill_lr,
        cfg.seed,
    )
}

/// Fresh backbone plus one prefix stream, trained at full parameter count
/// against the distilled teacher for `cfg.mid_steps`.
pub fn mid_train(
    teacher: &DistilledTeacher,
    data: &DataPyramid,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(Policy, StageReport)> {
    let mut policy = Policy::new(cfg.policy_config(), cfg.seed)?;
    policy.diffusion_steps = cfg.diffusion_steps;
    policy.attach_mid(TEACHER_DIM, None, cfg.seed)?;
    let report = mid_train_from(
        &mut policy,
        teacher,
        data,
        cfg,
        StageKind::MidFull,
        cfg.mid_steps,
        out,
    )?;
    Ok((policy, report))
}

/// Mid-training stage on an existing policy.
pub fn mid_train_from(
    policy: &mut Policy,
    teacher: &DistilledTeacher,
    data: &DataPyramid,
    cfg: &TrainConfig,
    kind: StageKind,
    steps: usize,
    out: Option<&Path>,
) -> Result<StageReport> {
    if teacher.params().trainable_numel() != 0 {
        return Err(config_err!(
            "distilled teacher must be frozen before mid-training"
        ));
    }
    let report = train_stage(
        policy,
        kind,
        &[teacher as &dyn Encoder],
        data,
        cfg,
        steps,
        out,
    )?;
    if let Some(dir) = out {
        policy.save(&dir.join(MID_CHECKPOINT))?;
    }
    Ok(report)
}

/// Attaches `teachers.len()` experts to a mid-trained policy (prefix banks
/// copied from the mid stream, zero-init LoRA, fresh router) and trains
/// only them for `cfg.post_steps`.
pub fn post_train(
    mut policy: Policy,
    teachers: &[TeacherEncoder],
    data: &DataPyramid,
    cfg: &TrainConfig,
    with_lora: bool,
    out: Option<&Path>,
) -> Result<(Policy, StageReport)> {
    let report = post_train_steps(
        &mut policy,
        teachers,
        data,
        cfg,
        with_lora,
        cfg.post_steps,
        out,
    )?;
    Ok((policy, report))
}

/// [`post_train`] with an explicit step count, in place.
pub fn post_train_steps(
    policy: &mut Policy,
    teachers: &[TeacherEncoder],
    data: &DataPyramid,
    cfg: &TrainConfig,
    with_lora: bool,
    steps: usize,
    out: Option<&Path>,
) -> Result<StageReport> {
    if cfg.experts != teachers.len() {
        return Err(config_err!(
            "config asks for {} experts but {} teachers are available",
            cfg.experts,
            teachers.len()
        ));
    }
    let init = match policy.mid_prefix() {
        Some(t) => t.detach(),
        None => {
            let c = &policy.model.cfg;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
            Tensor::randn(&[c.prefix_len, c.d_model], 0.02, &mut rng)
        }
    };
    let opts = ExpertOptions {
        experts: cfg.experts,
        teacher_dim: TEACHER_DIM,
        with_lora,
        rank: cfg.lora_rank,
        alpha: cfg.lora_alpha,
        smoothing: cfg.smoothing,
    };
    policy.attach_experts(&opts, Some(&init), cfg.seed)?;
    let encoders: Vec<&dyn Encoder> = teachers.iter().map(|t| t as &dyn Encoder).collect();
    let report = train_stage(policy, StageKind::Post, &encoders, data, cfg, steps, out)?;
    if let Some(dir) = out {
        policy.save(&dir.join(POST_CHECKPOINT))?;
    }
    Ok(report)
}
