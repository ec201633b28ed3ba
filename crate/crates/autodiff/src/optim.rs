//! AdamW with decoupled weight decay and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::{ParamStore, Parameter};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, clip_norm: None }
    }
}

impl AdamW {
    /// One update of every parameter from its gradient slot. Parameters
    /// without a gradient are treated as having a zero gradient.
    ///
    /// Per element, with `t` the parameter's step count after increment:
    ///
    /// ```text
    /// theta <- theta - lr * wd * theta
    /// m <- b1 m + (1 - b1) g,   v <- b2 v + (1 - b2) g^2
    /// theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    /// ```
    pub fn step<F: Real>(&self, store: &mut ParamStore<F>, lr: f64) {
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = store
                    .iter()
                    .filter_map(|p| p.tensor.grad())
                    .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
                    .sum::<f64>()
                    .sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        for p in store.iter_mut() {
            self.update(p, lr, scale);
        }
    }

    fn update<F: Real>(&self, p: &mut Parameter<F>, lr: f64, grad_scale: f64) {
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr_f, decay) = (F::of(lr), F::of(1.0 - lr * self.weight_decay));
        let (b1, b2, eps) = (F::of(self.beta1), F::of(self.beta2), F::of(self.eps));
        let (bc1, bc2, gs) = (F::of(bc1), F::of(bc2), F::of(grad_scale));
        let grad = p.tensor.grad().map(<[F]>::to_vec);
        let values = p.tensor.values_mut();
        for i in 0..values.len() {
            let g = grad.as_ref().map_or(F::zero(), |g| g[i] * gs);
            values[i] *= decay;
            p.first_moment[i] = b1 * p.first_moment[i] + (F::one() - b1) * g;
            p.second_moment[i] = b2 * p.second_moment[i] + (F::one() - b2) * g * g;
            let m_hat = p.first_moment[i] / bc1;
            let v_hat = p.second_moment[i] / bc2;
            values[i] -= lr_f * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Learning rate multiplied by `factor` at each milestone epoch (0-based epochs;
/// a milestone of 100 affects epoch index 100 onward).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * self.factor.powi(drops as i32)
    }
}
