use crate::autograd::Tensor;
use crate::error::{config_err, shape_err, FrappeError, Result};

pub const DEFAULT_DIFFUSION_STEPS: usize = 50;
pub const DEFAULT_SAMPLER_STEPS: usize = 5;
const COSINE_OFFSET: f64 = 0.008;
const MIN_ALPHA_BAR: f64 = 1e-4;

/// Cumulative signal levels `ᾱ_1 > … > ᾱ_K` for timesteps `1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
    pub sampler_steps: usize,
}

impl DiffusionSchedule {
    /// Cosine schedule `ᾱ(k) = f(k)/f(0)`, `f(t) = cos²(((t/K)+s)/(1+s)·π/2)`.
    pub fn cosine(steps: usize, sampler_steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(config_err!("diffusion needs at least one timestep"));
        }
        let f = |t: f64| {
            let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let alpha_bar = (1..=steps)
            .map(|k| (f(k as f64) / f0).max(MIN_ALPHA_BAR))
            .collect();
        Self::from_alpha_bar(alpha_bar, sampler_steps)
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>, sampler_steps: usize) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(config_err!("empty schedule"));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(config_err!("ᾱ values must lie in (0, 1]"));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(config_err!("ᾱ must be strictly decreasing"));
        }
        if sampler_steps == 0 || sampler_steps > alpha_bar.len() {
            return Err(config_err!(
                "sampler steps {} must be in 1..={}",
                sampler_steps,
                alpha_bar.len()
            ));
        }
        Ok(Self {
            alpha_bar,
            sampler_steps,
        })
    }

    /// K, the number of training timesteps.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    /// `ᾱ_k` for `1 ≤ k ≤ K`.
    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        if k == 0 || k > self.alpha_bar.len() {
            return Err(FrappeError::Index(format!(
                "timestep {k} outside 1..={}",
                self.alpha_bar.len()
            )));
        }
        Ok(self.alpha_bar[k - 1])
    }

    /// Evenly spaced descending timesteps starting at K.
    pub fn sub_schedule(&self, steps: usize) -> Result<Vec<usize>> {
        let k = self.steps();
        if steps == 0 || steps > k {
            return Err(config_err!("sampler steps {steps} must be in 1..={k}"));
        }
        Ok((0..steps).map(|i| k - i * k / steps).collect())
    }

    /// `√ᾱ_k·a + √(1−ᾱ_k)·ε`
    pub fn noise_actions(&self, actions: &Tensor, k: usize, eps: &Tensor) -> Result<Tensor> {
        noise_with_alpha_bar(actions, self.alpha_bar(k)?, eps)
    }
}

pub fn noise_with_alpha_bar(actions: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    if actions.shape() != eps.shape() {
        return Err(shape_err!(
            "noise shape {:?} differs from actions {:?}",
            eps.shape(),
            actions.shape()
        ));
    }
    let (s, n) = (alpha_bar.sqrt() as f32, (1.0 - alpha_bar).sqrt() as f32);
    let data = actions
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &e)| s * a + n * e)
        .collect();
    Tensor::new(actions.shape(), data)
}
