//! AdamW with decoupled weight decay, global-norm clipping, and the
//! warmup-cosine learning-rate schedule.

use std::collections::HashMap;

use crate::nn::NnModule;
use crate::real::Real;

/// Learning-rate multiplier at `step`: linear warmup from 0 over
/// `warmup_steps`, then cosine decay to 0 at `total_steps`.
pub fn lr_multiplier(step: usize, total_steps: usize, warmup_steps: usize) -> f64 {
    assert!(total_steps > 0, "schedule needs at least one step");
    let step = step.min(total_steps - 1);
    if warmup_steps > 0 && step < warmup_steps {
        return (step + 1) as f64 / warmup_steps as f64;
    }
    let decay_len = total_steps.saturating_sub(warmup_steps);
    if decay_len == 0 {
        return 1.0;
    }
    let progress = (step - warmup_steps) as f64 / decay_len as f64;
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<F: Real, M: NnModule<F> + ?Sized>(module: &mut M, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    module.visit_params("", &mut |_, p| {
        for g in p.grad() {
            let v = g.as_f64();
            sq += v * v;
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        module.visit_params("", &mut |_, p| {
            for g in p.grad_mut() {
                *g *= scale;
            }
        });
    }
    norm
}

/// AdamW keyed by parameter path. Moments are held in f64 regardless of the
/// model dtype. Weight decay is decoupled and applied only to parameters with
/// two or more axes (matrices and conv kernels), never to biases, norm gains,
/// or the mask token.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update with effective learning rate `lr` (schedule applied by the
    /// caller). Gradients are left untouched; callers zero them per step.
    pub fn step<F: Real, M: NnModule<F> + ?Sized>(&mut self, module: &mut M, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let wd = self.weight_decay;
        let (m_map, v_map) = (&mut self.m, &mut self.v);
        module.visit_params("", &mut |name, p| {
            let n = p.grad().len();
            let m = m_map.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = v_map.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let decay = if p.shape().len() >= 2 { wd } else { 0.0 };
            let grads: Vec<f64> = p.grad().iter().map(|g| g.as_f64()).collect();
            let vals = p.value_mut();
            for i in 0..n {
                let g = grads[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let cur = vals[i].as_f64();
                let upd = mhat / (vhat.sqrt() + eps) + decay * cur;
                vals[i] = F::from_f64(cur - lr * upd);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, ParamSlot};
    use ndarray::{Ix1, Ix2};

    struct Toy {
        a: Param<f64, Ix1>,
        w: Param<f64, Ix2>,
    }

    impl NnModule<f64> for Toy {
        fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<f64>)) {
            f(&crate::nn::join(prefix, "a"), &mut self.a);
            f(&crate::nn::join(prefix, "w"), &mut self.w);
        }
    }

    fn toy() -> Toy {
        Toy {
            a: Param::new(ndarray::arr1(&[1.0, 2.0])),
            w: Param::new(ndarray::arr2(&[[1.0, -1.0], [0.5, 0.25]])),
        }
    }

    #[test]
    fn clip_scales_gradients_to_max_norm() {
        let mut t = toy();
        t.a.grad.assign(&ndarray::arr1(&[3.0, 4.0]));
        let norm = clip_grad_norm(&mut t, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((t.a.grad[0] - 0.6).abs() < 1e-12);
        assert!((t.a.grad[1] - 0.8).abs() < 1e-12);
        let after = clip_grad_norm(&mut t, 1.0);
        assert!((after - 1.0).abs() < 1e-12, "already at the ceiling");
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut t = toy();
        t.a.grad.assign(&ndarray::arr1(&[0.3, 0.4]));
        let norm = clip_grad_norm(&mut t, 1.0);
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(t.a.grad[0], 0.3);
        assert_eq!(t.a.grad[1], 0.4);
    }

    #[test]
    fn adamw_matches_reference_recurrence() {
        // Constant gradient 0.5 on one scalar; replay the update rule
        // independently and compare five steps.
        let mut t = toy();
        let mut opt = AdamW::new(0.0);
        let lr = 0.1;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut expect = t.a.value[0];
        for step in 1..=5 {
            t.a.grad.fill(0.5);
            t.w.grad.fill(0.0);
            opt.step(&mut t, lr);
            m = 0.9 * m + 0.1 * 0.5;
            v = 0.999 * v + 0.001 * 0.25;
            let mhat = m / (1.0 - 0.9f64.powi(step));
            let vhat = v / (1.0 - 0.999f64.powi(step));
            expect -= lr * mhat / (vhat.sqrt() + 1e-8);
            assert!(
                (t.a.value[0] - expect).abs() < 1e-12,
                "step {step}: {} vs {expect}",
                t.a.value[0]
            );
        }
    }

    #[test]
    fn weight_decay_only_touches_matrices() {
        let mut t = toy();
        let mut opt = AdamW::new(0.1);
        // Zero gradients: the only update comes from decay.
        opt.step(&mut t, 1.0);
        assert_eq!(t.a.value[0], 1.0, "1-D parameters are never decayed");
        assert!((t.w.value[[0, 0]] - 0.9).abs() < 1e-12);
        assert!((t.w.value[[0, 1]] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn schedule_shape() {
        // Warmup 100 of 1000: halfway through warmup is 0.5, warmup end 1.0,
        // midpoint of decay 0.5, final step near 0.
        assert!((lr_multiplier(49, 1000, 100) - 0.5).abs() < 1e-12);
        assert!((lr_multiplier(99, 1000, 100) - 1.0).abs() < 1e-12);
        assert!((lr_multiplier(550, 1000, 100) - 0.5).abs() < 1e-12);
        assert!(lr_multiplier(999, 1000, 100) < 1e-4);
        // Monotone rise then fall.
        for s in 1..100 {
            assert!(lr_multiplier(s, 1000, 100) >= lr_multiplier(s - 1, 1000, 100));
        }
        for s in 101..1000 {
            assert!(lr_multiplier(s, 1000, 100) <= lr_multiplier(s - 1, 1000, 100));
        }
        // No warmup: starts at the peak.
        assert_eq!(lr_multiplier(0, 10, 0), 1.0);
    }

    #[test]
    fn adamw_is_deterministic() {
        let run = || {
            let mut t = toy();
            let mut opt = AdamW::new(0.01);
            for s in 0..10 {
                t.a.grad.fill(0.1 * s as f64);
                t.w.grad.fill(-0.05);
                opt.step(&mut t, 1e-2);
            }
            (t.a.value.to_vec(), t.w.value.iter().cloned().collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_learning_rate_leaves_weights_bit_identical() {
        let mut t = toy();
        t.a.grad.assign(&ndarray::arr1(&[3.0, -4.0]));
        t.w.grad.assign(&ndarray::arr2(&[[1.0, 1.0], [1.0, 1.0]]));
        let (a0, w0) = (t.a.value.to_vec(), t.w.value.clone());
        let mut opt = AdamW::new(0.1);
        opt.step(&mut t, 0.0);
        assert_eq!(t.a.value.to_vec(), a0);
        assert_eq!(t.w.value, w0);
    }
}
