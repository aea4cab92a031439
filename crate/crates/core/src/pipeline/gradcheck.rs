use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{Batch, SampleRef, TrainingSet};
use super::loss::{total_loss, Streams};
use super::policy::Policy;
use crate::alignment::{DistilledTeacher, Encoder, TeacherEncoder, TEACHER_DIM};
use crate::autograd::{Tape, Tensor, PIPELINE_TOLERANCE};
use crate::diffusion::{DiffusionSchedule, PolicyConfig};
use crate::env::{generate_datasets, DataCounts, DataOptions, Source};
use crate::error::{FrappeError, Result};
use crate::mipa::ExpertOptions;
use crate::nn::{ParamId, ParamStore};

/// Coordinates checked per stage.
pub const PIPELINE_COORDS: usize = 20;
const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-7;

/// One checked scalar parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Result of an end-to-end `total_loss` gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineCheck {
    pub stage: &'static str,
    pub coords: Vec<CoordCheck>,
}

impl PipelineCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < PIPELINE_TOLERANCE
    }
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / REL_FLOOR.max(a.abs()).max(n.abs())
}

#[derive(Clone, Copy)]
enum Kind {
    Mid,
    Post,
}

fn gradients64(
    policy: &Policy,
    store: &ParamStore<f64>,
    kind: Kind,
    batch: &Batch,
) -> Result<Vec<(ParamId, Vec<f64>)>> {
    let mut tape = Tape::with_params(store);
    let streams = match kind {
        Kind::Mid => Streams::Single(policy.mid.as_ref().expect("mid stream")),
        Kind::Post => Streams::Experts(policy.experts.as_ref().expect("experts")),
    };
    let terms = total_loss(&mut tape, &policy.model, streams, batch, 0.05, 0.01)?;
    let v = tape.scalar(terms.total);
    if !v.is_finite() {
        return Err(FrappeError::Numeric(format!("non-finite loss {v}")));
    }
    let grads = tape.backward(terms.total)?;
    Ok(grads.params().map(|(id, g)| (id, g.to_vec())).collect())
}

fn value64(policy: &Policy, store: &ParamStore<f64>, kind: Kind, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::with_params(store);
    let streams = match kind {
        Kind::Mid => Streams::Single(policy.mid.as_ref().expect("mid stream")),
        Kind::Post => Streams::Experts(policy.experts.as_ref().expect("experts")),
    };
    let terms = total_loss(&mut tape, &policy.model, streams, batch, 0.05, 0.01)?;
    Ok(tape.scalar(terms.total))
}

fn check_stage(
    policy: &Policy,
    kind: Kind,
    trainable: impl Fn(&str) -> bool,
    batch: &Batch,
    coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PipelineCheck> {
    let mut store: ParamStore<f64> = policy.store.cast();
    store.set_trainable(&trainable);
    let grads = gradients64(policy, &store, kind, batch)?;
    let ids = store.trainable_ids();
    let total: usize = ids.iter().map(|&id| store.get(id).numel()).sum();
    let mut out = Vec::with_capacity(coords);
    for _ in 0..coords {
        let mut k = rng.random_range(0..total);
        let mut pick = (ids[0], 0);
        for &id in &ids {
            let n = store.get(id).numel();
            if k < n {
                pick = (id, k);
                break;
            }
            k -= n;
        }
        let (id, j) = pick;
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map_or(0.0, |(_, g)| g[j]);
        let orig = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = orig + FD_STEP;
        let up = value64(policy, &store, kind, batch)?;
        store.get_mut(id).data_mut()[j] = orig - FD_STEP;
        let down = value64(policy, &store, kind, batch)?;
        store.get_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        out.push(CoordCheck {
            name: store.name(id).to_string(),
            index: j,
            analytic,
            numeric,
            rel_err: rel(analytic, numeric),
        });
    }
    Ok(PipelineCheck {
        stage: match kind {
            Kind::Mid => "mid",
            Kind::Post => "post",
        },
        coords: out,
    })
}

/// Checks analytic gradients of `total_loss` on a one-sample batch against
/// central differences in 64-bit, for `PIPELINE_COORDS` random trainable
/// coordinates of the mid stage and of the post stage. Zero-initialized
/// adapter tensors are perturbed first so every path carries gradient.
pub fn pipeline_gradcheck(seed: u64) -> Result<Vec<PipelineCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = PolicyConfig::tiny();
    let data = generate_datasets(
        DataCounts {
            robot: 1,
            ego_task: 0,
            ego_web: 0,
        },
        &DataOptions::default(),
        seed,
    )?;
    let mut policy = Policy::new(cfg.clone(), seed)?;
    policy.attach_mid(TEACHER_DIM, None, seed)?;
    let opts = ExpertOptions::default();
    let init = policy.mid_prefix().expect("mid stream").detach();
    policy.attach_experts(&opts, Some(&init), seed)?;
    let ids: Vec<ParamId> = policy.store.ids().collect();
    for id in ids {
        let t = policy.store.get_mut(id);
        if t.data().iter().all(|&v| v == 0.0) {
            let shape = t.shape().to_vec();
            let noise = Tensor::randn(&shape, 0.1, &mut rng);
            t.data_mut().copy_from_slice(noise.data());
        }
    }
    let teachers = TeacherEncoder::all();
    let distilled = DistilledTeacher::new(teachers.len(), &mut rng)?;
    let schedule = DiffusionSchedule::cosine(policy.diffusion_steps, 1)?;
    let t = rng.random_range(0..data.robot.episodes[0].steps.len());
    let sample = [SampleRef {
        source: Source::Robot,
        episode: 0,
        t,
        has_actions: true,
    }];

    let mid_set = TrainingSet::new(&data, &[&distilled as &dyn Encoder], 8)?;
    let mid_batch = mid_set.batch(&cfg, &sample, &schedule, &mut rng)?;
    let mid = check_stage(
        &policy,
        Kind::Mid,
        |n| n.starts_with("policy.") || n.starts_with("mid."),
        &mid_batch,
        PIPELINE_COORDS,
        &mut rng,
    )?;

    let encs: Vec<&dyn Encoder> = teachers.iter().map(|t| t as &dyn Encoder).collect();
    let post_set = TrainingSet::new(&data, &encs, 8)?;
    let post_batch = post_set.batch(&cfg, &sample, &schedule, &mut rng)?;
    let post = check_stage(
        &policy,
        Kind::Post,
        crate::mipa::is_expert_param,
        &post_batch,
        PIPELINE_COORDS,
        &mut rng,
    )?;
    Ok(vec![mid, post])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(rel(1.0, 1.0), 0.0);
        assert!((rel(2.0, 1.0) - 0.5).abs() < 1e-12);
        assert!(rel(0.0, 1e-9) < 0.02);
    }

    #[test]
    fn pipeline_gradients_match_finite_differences() {
        for check in pipeline_gradcheck(4).unwrap() {
            assert_eq!(check.coords.len(), PIPELINE_COORDS);
            assert!(check.passed(), "{}: {:?}", check.stage, check.coords);
            assert!(
                check.coords.iter().any(|c| c.analytic.abs() > 1e-6),
                "{}",
                check.stage
            );
        }
    }
}
