use rand::Rng;

use crate::autograd::{Real, Tape, Tensor, Var};
use crate::error::{config_err, Result};
use crate::nn::{ParamId, ParamStore};

pub const LORA_RANK: usize = 4;
pub const LORA_ALPHA: f64 = 8.0;

/// Low-rank delta `(α/r)·U·A` attached to one linear layer.
///
/// `A` (down) is stored `[r, d_in]` and `U` (up) `[d_out, r]`; `U` starts at
/// zero so an untrained adapter leaves the base layer unchanged.
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub down: ParamId,
    pub up: ParamId,
    pub scale: f64,
}

impl LoraPair {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_rank(rank, d_in, d_out)?;
        let down = store.insert(
            format!("{name}.A"),
            Tensor::randn(&[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
        )?;
        let up = store.insert(format!("{name}.U"), Tensor::zeros(&[d_out, rank]))?;
        Ok(Self {
            down,
            up,
            scale: alpha / rank as f64,
        })
    }

    /// `(α/r)·(x·Aᵀ)·Uᵀ`
    pub fn delta<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let a = tape.param(self.down);
        let u = tape.param(self.up);
        let h = tape.matmul_t(x, a, false, true)?;
        let d = tape.matmul_t(h, u, false, true)?;
        Ok(tape.scale(d, self.scale))
    }

    /// Dense `W + (α/r)·U·A`.
    pub fn merged_weight(&self, store: &ParamStore, base: &Tensor) -> Result<Tensor> {
        let a = store.get(self.down);
        let u = store.get(self.up);
        let (d_out, rank) = (u.shape()[0], u.shape()[1]);
        let d_in = a.shape()[1];
        let mut w = base.data().to_vec();
        f32::gemm(
            d_out,
            rank,
            d_in,
            self.scale as f32,
            u.data(),
            false,
            a.data(),
            false,
            1.0,
            &mut w,
        );
        Tensor::new(&[d_out, d_in], w)
    }
}

pub(crate) fn check_rank(rank: usize, d_in: usize, d_out: usize) -> Result<()> {
    if rank == 0 || rank >= d_in.min(d_out) {
        return Err(config_err!(
            "LoRA rank {rank} must be in 1..min(d_in={d_in}, d_out={d_out})"
        ));
    }
    Ok(())
}

/// `y = x·Wᵀ + (α/r)·(x·Aᵀ)·Uᵀ` on explicit tape values.
pub fn lora_forward<T: Real>(
    tape: &mut Tape<'_, T>,
    base_weight: Var,
    down: Var,
    up: Var,
    alpha: f64,
    x: Var,
) -> Result<Var> {
    let (d_out, d_in) = (tape.shape(base_weight)[0], tape.shape(base_weight)[1]);
    let rank = tape.shape(down)[0];
    check_rank(rank, d_in, d_out)?;
    let base = tape.matmul_t(x, base_weight, false, true)?;
    let h = tape.matmul_t(x, down, false, true)?;
    let d = tape.matmul_t(h, up, false, true)?;
    let d = tape.scale(d, alpha / rank as f64);
    tape.add(base, d)
}

/// One adapter per adapted backbone layer, indexed like
/// [`PolicyModel::adapted_layers`](crate::diffusion::PolicyModel::adapted_layers).
#[derive(Debug, Clone, Default)]
pub struct LoraBundle {
    pub pairs: Vec<LoraPair>,
}

impl LoraBundle {
    pub fn get(&self, layer: usize) -> Option<&LoraPair> {
        self.pairs.get(layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(alpha: f64) -> (ParamStore, LoraPair, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let pair = LoraPair::new(&mut store, "l", 6, 5, 2, alpha, &mut rng).unwrap();
        let w = Tensor::randn(&[5, 6], 0.5, &mut rng);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        (store, pair, w, x)
    }

    fn run(store: &ParamStore, pair: &LoraPair, w: &Tensor, x: &Tensor, alpha: f64) -> Vec<f32> {
        let mut tape = Tape::with_params(store);
        let (wv, xv) = (tape.constant(w), tape.constant(x));
        let (a, u) = (tape.param(pair.down), tape.param(pair.up));
        let y = lora_forward(&mut tape, wv, a, u, alpha, xv).unwrap();
        tape.value(y).to_vec()
    }

    fn base(w: &Tensor, x: &Tensor) -> Vec<f32> {
        let mut tape = Tape::<f32>::new();
        let (wv, xv) = (tape.constant(w), tape.constant(x));
        let y = tape.matmul_t(xv, wv, false, true).unwrap();
        tape.value(y).to_vec()
    }

    #[test]
    fn zero_up_matrix_is_identity() {
        let (store, pair, w, x) = setup(8.0);
        assert_eq!(run(&store, &pair, &w, &x, 8.0), base(&w, &x));
    }

    #[test]
    fn zero_alpha_is_identity() {
        let (mut store, pair, w, x) = setup(0.0);
        store
            .get_mut(pair.up)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.3);
        assert_eq!(run(&store, &pair, &w, &x, 0.0), base(&w, &x));
    }

    #[test]
    fn merged_weight_matches_adapter_path() {
        let (mut store, pair, w, x) = setup(8.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = Tensor::randn(&[5, 2], 0.7, &mut rng);
        store.set_value(pair.up, &u).unwrap();
        let adapted = run(&store, &pair, &w, &x, 8.0);
        let merged = pair.merged_weight(&store, &w).unwrap();
        let direct = base(&merged, &x);
        for (a, b) in adapted.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn oversized_rank_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(LoraPair::new(&mut store, "l", 4, 8, 4, 8.0, &mut rng).is_err());
    }
}
