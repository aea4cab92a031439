use std::collections::HashMap;

use super::{ParamId, ParamStore};
use crate::error::{FrappeError, Result};

/// Adam with constant learning rate and optional global grad-norm clipping.
///
/// The parameter list is fixed at construction from the registry's
/// trainable set; frozen parameters are never touched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    params: Vec<ParamId>,
    step: u64,
    m: HashMap<ParamId, Vec<f32>>,
    v: HashMap<ParamId, Vec<f32>>,
}

impl Adam {
    pub fn new(
        store: &ParamStore,
        lr: f64,
        beta1: f64,
        beta2: f64,
        clip_norm: Option<f64>,
    ) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            clip_norm,
            params: store.trainable_ids(),
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Global L2 norm of the current gradients of the optimized parameters.
    pub fn grad_norm(&self, store: &ParamStore) -> f64 {
        self.params
            .iter()
            .filter_map(|id| store.get(*id).grad())
            .flat_map(|g| g.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update, clears the gradients and returns the pre-clip norm.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        let norm = self.grad_norm(store);
        if !norm.is_finite() {
            return Err(FrappeError::Numeric(format!(
                "non-finite gradient norm {norm}"
            )));
        }
        let factor = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for &id in &self.params {
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let n = g.len();
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; n]);
            let data = t.data_mut();
            for i in 0..n {
                let gi = g[i] * factor as f32;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                data[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
            t.zero_grad();
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;

    #[test]
    fn frozen_parameters_untouched() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::full(&[2], 1.0)).unwrap();
        let b = store.insert("b", Tensor::full(&[2], 1.0)).unwrap();
        store.set_trainable(|n| n == "a");
        let mut opt = Adam::new(&store, 0.1, 0.9, 0.999, None);
        assert_eq!(opt.params(), &[a]);
        store.get_mut(a).accumulate_grad(&[1.0, -1.0]).unwrap();
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
        let av = store.get(a).data();
        assert!((av[0] - 0.9).abs() < 1e-5 && (av[1] - 1.1).abs() < 1e-5);
    }

    #[test]
    fn clipping_reports_preclip_norm() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::zeros(&[2])).unwrap();
        let mut opt = Adam::new(&store, 0.1, 0.9, 0.999, Some(1.0));
        store.get_mut(a).accumulate_grad(&[3.0, 4.0]).unwrap();
        let n = opt.step(&mut store).unwrap();
        assert!((n - 5.0).abs() < 1e-6);
    }
}
