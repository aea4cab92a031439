use super::data::Batch;
use super::policy::MidStream;
use crate::alignment::{align_loss_multi, align_loss_single};
use crate::autograd::{Real, Tape, Var};
use crate::diffusion::{masked_action_loss, PolicyModel, StreamAdapter};
use crate::error::{config_err, FrappeError, Result};
use crate::mipa::{load_balance_loss, ExpertSet};

/// Which streams a loss evaluation runs.
#[derive(Debug, Clone, Copy)]
pub enum Streams<'a> {
    /// Backbone only, action loss only.
    Plain,
    /// One prefix stream aligned to a single teacher.
    Single(&'a MidStream),
    /// The expert mixture, one teacher per expert.
    Experts(&'a ExpertSet),
}

/// Tape handles of every loss component. Absent terms are `None`.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub action: Option<Var>,
    pub align: Option<Var>,
    pub align_per: Vec<Var>,
    pub balance: Option<Var>,
    /// Smoothed router weights `[B, M]`.
    pub weights: Option<Var>,
}

/// Plain values of [`LossTerms`]; absent terms read as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub action: f64,
    pub align: f64,
    pub align_per: Vec<f64>,
    pub balance: f64,
    /// Batch-mean router weight per expert.
    pub weights: Vec<f64>,
}

impl LossTerms {
    pub fn values<T: Real>(&self, tape: &Tape<'_, T>) -> LossValues {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.scalar(x).as_f64());
        let weights = match self.weights {
            Some(w) => {
                let m = tape.shape(w)[1];
                let vals = tape.value(w);
                let b = vals.len() / m;
                (0..m)
                    .map(|i| (0..b).map(|r| vals[r * m + i].as_f64()).sum::<f64>() / b as f64)
                    .collect()
            }
            None => Vec::new(),
        };
        LossValues {
            total: tape.scalar(self.total).as_f64(),
            action: v(self.action),
            align: v(self.align),
            align_per: self
                .align_per
                .iter()
                .map(|&x| tape.scalar(x).as_f64())
                .collect(),
            balance: v(self.balance),
            weights,
        }
    }
}

/// `L_action + λ1·L_align + λ2·L_balance`. The action term averages over
/// action-labeled samples only and is absent when none are labeled; the
/// balance term exists only for the expert mixture.
pub fn total_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &PolicyModel,
    streams: Streams<'_>,
    batch: &Batch,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(FrappeError::Data("empty batch".into()));
    }
    let want_targets = match streams {
        Streams::Plain => 0,
        Streams::Single(_) => 1,
        Streams::Experts(set) => set.len(),
    };
    if batch.targets.len() < want_targets {
        return Err(config_err!(
            "{} alignment targets for {} streams",
            batch.targets.len(),
            want_targets
        ));
    }
    let rows = batch.len() * model.cfg.prefix_len;
    if batch.targets[..want_targets]
        .iter()
        .any(|t| t.rows() != rows)
    {
        return Err(FrappeError::Data(format!(
            "alignment targets must have {rows} rows"
        )));
    }
    let decode = batch.any_labeled();
    let cond = model.condition(tape, &batch.cond)?;
    let (pred, align, align_per, balance, weights) = match streams {
        Streams::Plain => {
            if !decode {
                return Err(FrappeError::Data(
                    "action-free batch without an alignment stream".into(),
                ));
            }
            let out = model.stream(
                tape,
                &cond,
                &batch.noisy,
                &batch.timesteps,
                StreamAdapter::default(),
            )?;
            (
                Some(model.decode(tape, out.action_latents)?),
                None,
                Vec::new(),
                None,
                None,
            )
        }
        Streams::Single(mid) => {
            let out = model.stream(tape, &cond, &batch.noisy, &batch.timesteps, mid.adapter())?;
            let p = out
                .prefix_outputs
                .ok_or_else(|| config_err!("mid stream produced no prefix outputs"))?;
            let e = tape.constant(&batch.targets[0].cast());
            let a = align_loss_single(tape, p, &mid.proj, e)?;
            let pred = if decode {
                Some(model.decode(tape, out.action_latents)?)
            } else {
                None
            };
            (pred, Some(a), vec![a], None, None)
        }
        Streams::Experts(set) => {
            let f = set.forward(tape, model, &cond, &batch.noisy, &batch.timesteps, decode)?;
            let targets: Vec<Var> = batch.targets[..set.len()]
                .iter()
                .map(|t| tape.constant(&t.cast()))
                .collect();
            let projs: Vec<_> = set.experts.iter().map(|e| &e.proj).collect();
            let (a, per) = align_loss_multi(tape, &f.prefix_outputs, &projs, &targets)?;
            let bal = load_balance_loss(tape, f.logits)?;
            (f.actions, Some(a), per, Some(bal), Some(f.weights))
        }
    };
    let action = match pred {
        Some(p) => masked_action_loss(tape, p, &batch.actions, &batch.labeled)?,
        None => None,
    };
    let mut total: Option<Var> = action;
    for (term, w) in [(align, lambda1), (balance, lambda2)] {
        if let Some(t) = term {
            let s = tape.scale(t, w);
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
    }
    Ok(LossTerms {
        total: total.expect("at least one loss term"),
        action,
        align,
        align_per,
        balance,
        weights,
    })
}
