use rand::Rng;

use super::{ParamId, ParamStore};
use crate::autograd::{Real, Tape, Tensor, Var};
use crate::error::Result;
use crate::mipa::LoraPair;

/// Affine layer `y = x·Wᵀ + b` with `W` stored `[d_out, d_in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = gain / (d_in as f64).sqrt();
        let weight = store.insert(format!("{name}.w"), Tensor::randn(&[d_out, d_in], std, rng))?;
        let bias = if bias {
            Some(store.insert(format!("{name}.b"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    /// Zero-initialized layer (outputs exactly the bias, i.e. zero, at init).
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.insert(format!("{name}.w"), Tensor::zeros(&[d_out, d_in]))?;
        let bias = Some(store.insert(format!("{name}.b"), Tensor::zeros(&[d_out]))?);
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        self.forward_adapted(tape, x, None)
    }

    /// Base projection plus an optional low-rank delta.
    pub fn forward_adapted<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        lora: Option<&LoraPair>,
    ) -> Result<Var> {
        let w = tape.param(self.weight);
        let mut y = tape.matmul_t(x, w, false, true)?;
        if let Some(pair) = lora {
            let delta = pair.delta(tape, x)?;
            y = tape.add(y, delta)?;
        }
        if let Some(b) = self.bias {
            let b = tape.param(b);
            y = tape.add(y, b)?;
        }
        Ok(y)
    }

    pub fn numel(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

/// Per-feature affine applied after [`Tape::layernorm_lastdim`].
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.insert(format!("{name}.g"), Tensor::full(&[d], 1.0))?,
            shift: store.insert(format!("{name}.b"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let n = tape.layernorm_lastdim(x);
        let g = tape.param(self.gain);
        let b = tape.param(self.shift);
        let y = tape.mul(n, g)?;
        tape.add(y, b)
    }
}
