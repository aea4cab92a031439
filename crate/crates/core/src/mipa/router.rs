use rand::Rng;

use crate::autograd::{logsumexp, softmax_in_place, Real, Tape, Var};
use crate::error::{config_err, shape_err, FrappeError, Result};
use crate::nn::{Linear, ParamStore};

pub const ROUTER_HIDDEN: usize = 32;
pub const DEFAULT_SMOOTHING: f64 = 0.1;

/// Two-layer gating network over the conditioning summary. The output layer
/// starts at zero, so an untrained router weights every expert equally.
#[derive(Debug, Clone)]
pub struct Router {
    pub fc1: Linear,
    pub fc2: Linear,
    pub experts: usize,
}

impl Router {
    pub fn new(
        store: &mut ParamStore,
        d_in: usize,
        experts: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if experts == 0 {
            return Err(config_err!("router needs at least one expert"));
        }
        Ok(Self {
            fc1: Linear::new(store, "router.0", d_in, ROUTER_HIDDEN, true, 1.0, rng)?,
            fc2: Linear::zeros(store, "router.1", ROUTER_HIDDEN, experts)?,
            experts,
        })
    }

    /// Returns `(w, g)`: softmax weights and raw logits, both `[rows, M]`.
    pub fn route<T: Real>(&self, tape: &mut Tape<'_, T>, summary: Var) -> Result<(Var, Var)> {
        let h = self.fc1.forward(tape, summary)?;
        let h = tape.gelu(h);
        let g = self.fc2.forward(tape, h)?;
        let w = tape.softmax_lastdim(g);
        Ok((w, g))
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eps) {
        return Err(config_err!("smoothing ε must lie in [0, 1), got {eps}"));
    }
    Ok(())
}

/// `w′ = (1−ε)·w + ε/M` on tape values; `M` is the last dimension.
pub fn smooth_weights<T: Real>(tape: &mut Tape<'_, T>, w: Var, eps: f64) -> Result<Var> {
    check_eps(eps)?;
    let m = *tape.shape(w).last().unwrap_or(&1);
    let s = tape.scale(w, 1.0 - eps);
    Ok(tape.add_scalar(s, eps / m as f64))
}

/// Plain-value form of [`smooth_weights`] for a single weight vector.
pub fn smooth_weight_values(w: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_eps(eps)?;
    let m = w.len() as f64;
    Ok(w.iter().map(|&x| (1.0 - eps) * x + eps / m).collect())
}

/// Softmax of one logit row.
pub fn softmax_values(g: &[f64]) -> Vec<f64> {
    let mut w = g.to_vec();
    softmax_in_place(&mut w);
    w
}

/// `(1/B)·Σ_j (logsumexp_i g_{j,i})²` over logit rows `[B, M]`.
pub fn load_balance_loss<T: Real>(tape: &mut Tape<'_, T>, g: Var) -> Result<Var> {
    if tape.value(g).iter().any(|v| !v.is_finite()) {
        return Err(FrappeError::Numeric("non-finite router logits".into()));
    }
    let lse = tape.logsumexp_lastdim(g);
    let sq = tape.square(lse);
    Ok(tape.mean(sq))
}

/// Plain-value form of [`load_balance_loss`].
pub fn load_balance_value(rows: &[Vec<f64>]) -> Result<f64> {
    if rows.is_empty() {
        return Err(shape_err!("load balance needs at least one row"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(FrappeError::Numeric("non-finite router logits".into()));
    }
    Ok(rows.iter().map(|r| logsumexp(r).powi(2)).sum::<f64>() / rows.len() as f64)
}

/// `Σ_i w′_i ⊙ z_i` per sample: `z_i` are `[B*T_a, d]`, `w` is `[B, M]`.
/// The result is ready for the shared action head.
pub fn mix_latents<T: Real>(tape: &mut Tape<'_, T>, z: &[Var], w: Var) -> Result<Var> {
    let m = tape.shape(w).last().copied().unwrap_or(0);
    if z.is_empty() || z.len() != m {
        return Err(shape_err!(
            "{} expert latents for {} router weights",
            z.len(),
            m
        ));
    }
    let shape = tape.shape(z[0]).to_vec();
    if z.iter().any(|&zi| tape.shape(zi) != shape.as_slice()) {
        return Err(shape_err!("expert latents differ in shape"));
    }
    let mut acc: Option<Var> = None;
    for (i, &zi) in z.iter().enumerate() {
        let col = tape.select_col(w, i)?;
        let part = tape.scale_groups(zi, col)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, part)?,
            None => part,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// `head(Σ_i w′_i·z_i)`.
pub fn aggregate<T: Real>(
    tape: &mut Tape<'_, T>,
    z: &[Var],
    w: Var,
    head: &crate::diffusion::ActionHead,
) -> Result<Var> {
    let mixed = mix_latents(tape, z, w)?;
    head.forward(tape, mixed)
}
