use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{ConditionBatch, PolicyModel, StreamAdapter};
use super::schedule::DiffusionSchedule;
use crate::autograd::{Real, Tape, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::mipa::ExpertSet;
use crate::nn::ParamStore;

/// Mean squared error over every entry of the chunk.
pub fn action_loss<T: Real>(tape: &mut Tape<'_, T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(shape_err!(
            "action loss shapes differ: {:?} vs {:?}",
            tape.shape(pred),
            tape.shape(target)
        ));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Action MSE averaged over the samples with `labeled[i] = true` only.
/// Rows of unlabeled samples are multiplied by an exact zero. Returns `None`
/// when no sample is labeled.
pub fn masked_action_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    pred: Var,
    target: &Tensor,
    labeled: &[bool],
) -> Result<Option<Var>> {
    let shape = tape.shape(pred).to_vec();
    if shape != target.shape() || labeled.is_empty() || shape[0] % labeled.len() != 0 {
        return Err(shape_err!(
            "masked action loss: pred {:?}, target {:?}, {} samples",
            shape,
            target.shape(),
            labeled.len()
        ));
    }
    let n = labeled.iter().filter(|&&l| l).count();
    if n == 0 {
        return Ok(None);
    }
    let per_sample = target.numel() / labeled.len();
    let w = T::of_f64(1.0 / (n * per_sample) as f64);
    let mask: Vec<T> = labeled
        .iter()
        .flat_map(|&l| std::iter::repeat_n(if l { w } else { T::zero() }, per_sample))
        .collect();
    let t = tape.constant(&target.cast());
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d);
    let m = tape.constant_from(&shape, mask)?;
    let weighted = tape.mul(sq, m)?;
    Ok(Some(tape.sum(weighted)))
}

/// Clean-chunk prediction for a batch of noisy chunks at per-sample
/// timesteps, mixing experts when a set is given.
pub fn predict_clean<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &PolicyModel,
    cond: &super::Conditioning,
    experts: Option<&ExpertSet>,
    noisy: &Tensor,
    timesteps: &[usize],
) -> Result<Var> {
    match experts {
        Some(set) => set
            .forward(tape, model, cond, noisy, timesteps, true)?
            .actions
            .ok_or_else(|| shape_err!("expert forward returned no actions")),
        None => {
            let out = model.stream(tape, cond, noisy, timesteps, StreamAdapter::default())?;
            model.decode(tape, out.action_latents)
        }
    }
}

/// Deterministic few-step sampler. Starts from unit Gaussian noise drawn
/// from `seed`, predicts a clipped clean chunk at each timestep of the
/// evenly spaced sub-schedule and moves to the next timestep along the
/// implied noise direction. Returns `[batch*T_a, action_dim]` in [−1, 1].
pub fn sample_actions(
    model: &PolicyModel,
    store: &ParamStore,
    cond: &ConditionBatch,
    experts: Option<&ExpertSet>,
    schedule: &DiffusionSchedule,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let plan = schedule.sub_schedule(steps)?;
    let b = cond.batch;
    let shape = [b * model.cfg.chunk, model.cfg.action_dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::<f32>::randn(&shape, 1.0, &mut rng);
    let mut tape = Tape::with_params(store);
    let c = model.condition(&mut tape, cond)?;
    for (i, &k) in plan.iter().enumerate() {
        let ks = vec![k; b];
        let pred = predict_clean(&mut tape, model, &c, experts, &x, &ks)?;
        let x0: Vec<f32> = tape
            .value(pred)
            .iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect();
        let next = plan.get(i + 1).copied();
        x = match next {
            None => Tensor::new(&shape, x0)?,
            Some(kn) => {
                let (ab, abn) = (schedule.alpha_bar(k)?, schedule.alpha_bar(kn)?);
                let (sa, sn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
                let (sa2, sn2) = (abn.sqrt() as f32, (1.0 - abn).sqrt() as f32);
                let data = x
                    .data()
                    .iter()
                    .zip(&x0)
                    .map(|(&xk, &c0)| {
                        let eps = (xk - sa * c0) / sn;
                        sa2 * c0 + sn2 * eps
                    })
                    .collect();
                Tensor::new(&shape, data)?
            }
        };
    }
    Ok(x)
}
