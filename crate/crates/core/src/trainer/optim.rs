//! AdamW and the warmup/step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Adam with decoupled weight decay. Moments are kept in `f64`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update<T: Scalar>(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer sized for another model");
        assert_eq!(grads.len(), params.len(), "gradient length mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = g.f64();
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            let mut x = p.f64();
            x -= lr * self.weight_decay * x;
            x -= lr * m_hat / (v_hat.sqrt() + self.eps);
            *p = T::c(x);
        }
    }
}

/// Rescales `grads` so its L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Linear warmup over the first `warmup_steps` updates, then
/// `factor^⌊e / every⌋` where `e` counts epochs finished after warmup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub factor: f64,
    pub every_n_epochs: usize,
}

impl LrSchedule {
    /// Rate for update number `update` (1-based).
    pub fn lr(&self, update: usize, epochs_after_warmup: usize) -> f64 {
        if self.warmup_steps > 0 && update < self.warmup_steps {
            return self.peak * update as f64 / self.warmup_steps as f64;
        }
        let periods = epochs_after_warmup / self.every_n_epochs.max(1);
        self.peak * self.factor.powi(periods as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            peak: 2e-4,
            warmup_steps: 100,
            factor: 0.98,
            every_n_epochs: 2,
        }
    }

    #[test]
    fn warmup_is_linear() {
        let s = sched();
        assert_eq!(s.lr(50, 0), 1e-4);
        assert_eq!(s.lr(100, 0), 2e-4);
        assert_eq!(s.lr(25, 0), 5e-5);
    }

    #[test]
    fn decay_counts_post_warmup_epochs() {
        let s = sched();
        assert_eq!(s.lr(500, 1), 2e-4);
        assert_eq!(s.lr(500, 4), 2e-4 * 0.98 * 0.98);
        assert_eq!(s.lr(500, 5), 2e-4 * 0.98 * 0.98);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut opt = AdamW::new(2, 0.0);
        let mut p = vec![1.0f64, -1.0];
        opt.update(&mut p, &[0.5, -3.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut opt = AdamW::new(1, 1e-2);
        let mut p = vec![2.0f64];
        opt.update(&mut p, &[0.0], 0.5);
        assert!((p[0] - (2.0 - 0.5 * 1e-2 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        let mut g = vec![3.0f64, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
        let mut small = vec![0.1f64];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1]);
    }
}
