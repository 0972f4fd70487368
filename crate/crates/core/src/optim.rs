//! AdamW with linear warmup and cosine decay.

use std::collections::HashMap;

use crate::tensor::{Scalar, Tensor, TensorId};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Decoupled-weight-decay Adam. Reads each parameter's gradient, updates the
/// parameter and clears the gradient.
#[derive(Debug)]
pub struct AdamW<T: Scalar> {
    cfg: AdamConfig,
    steps: u64,
    moments: HashMap<TensorId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamW {
            cfg,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        let decay = T::lit(1.0 - lr * c.weight_decay);
        for p in params.iter_mut() {
            let Some(grad) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let n = grad.len();
            let (m, v) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let data = p.data_mut();
            for i in 0..n {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                data[i] = data[i] * decay - step_size * m[i] / denom;
            }
            p.zero_grad();
        }
    }
}

/// Linear warmup over `ceil(warmup_ratio · total)` steps to `peak`, then
/// cosine decay towards zero at `total`. Steps are counted from 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        LrSchedule {
            peak,
            warmup_steps: (warmup_ratio * total_steps as f64).ceil() as usize,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scales all gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Scalar>(params: &mut [&mut Tensor<T>], max_norm: Option<f64>) -> f64 {
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if let Some(limit) = max_norm {
        if norm > limit && norm > 0.0 {
            let f = limit / norm;
            for p in params.iter_mut() {
                if let Some(g) = p.grad().map(|g| g.iter().map(|x| *x * T::lit(f)).collect::<Vec<_>>()) {
                    p.zero_grad();
                    p.accumulate_grad(&g).expect("same length");
                }
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(5e-4, 0.03, 1000);
        assert_eq!(s.warmup_steps, 30);
        assert!((s.lr(0) - 5e-4 / 30.0).abs() < 1e-15);
        assert!((s.lr(30) - 5e-4).abs() < 1e-15);
        assert!(s.lr(15) > 0.0 && s.lr(15) < 5e-4);
        assert!(s.lr(1000) < 1e-12);
        assert!(s.lr(999) < 1e-8);
        for k in 31..1000 {
            assert!(s.lr(k) <= s.lr(k - 1));
        }
    }

    #[test]
    fn adam_moves_against_gradient_and_clears() {
        let mut p = Tensor::<f64>::from_fn(&[2], |_| 1.0).with_requires_grad(true);
        p.accumulate_grad(&[1.0, -2.0]).unwrap();
        let mut opt = AdamW::new(AdamConfig::default());
        opt.step(&mut [&mut p], 0.1);
        // first Adam step moves each coordinate by lr·sign(g)
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - 1.1).abs() < 1e-6);
        assert!(p.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut p = Tensor::<f32>::from_fn(&[3], |i| i as f32);
        let before = p.to_le_bytes();
        AdamW::new(AdamConfig::default()).step(&mut [&mut p], 1.0);
        assert_eq!(before, p.to_le_bytes());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut p = Tensor::<f64>::zeros(&[2]).with_requires_grad(true);
        p.accumulate_grad(&[3.0, 4.0]).unwrap();
        let n = clip_global_norm(&mut [&mut p], Some(1.0));
        assert_eq!(n, 5.0);
        let g = p.grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}
