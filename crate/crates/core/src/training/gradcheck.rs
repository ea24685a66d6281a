//! Finite-difference verification of analytic gradients.
//!
//! The harness perturbs parameters one scalar at a time with central
//! differences and compares against the gradients produced by a
//! caller-supplied loss closure. It is the reference oracle for every
//! hand-written backward pass in the crate and is meant to run on small f64
//! model instances.

use crate::error::{Error, Result};
use crate::nn::NnModule;
use crate::real::Real;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Cap on probed scalars per tensor; probes are evenly spaced. `None`
    /// probes every scalar.
    pub max_probes_per_tensor: Option<usize>,
    /// Relative-error threshold for recording a failure.
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-5, max_probes_per_tensor: None, tolerance: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct GradFailure {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter and flat index where the worst error occurred.
    pub worst: String,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn param_inventory<F: Real, M: NnModule<F> + ?Sized>(module: &mut M) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    module.visit_params("", &mut |name, p| {
        out.push((name.to_string(), p.value().len()));
    });
    out
}

fn read_grads<F: Real, M: NnModule<F> + ?Sized>(module: &mut M) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    module.visit_params("", &mut |name, p| {
        out.push((name.to_string(), p.grad().iter().map(|g| g.as_f64()).collect()));
    });
    out
}

/// Overwrites one scalar and returns its previous value, so probes can
/// restore parameters exactly instead of relying on `x + e - e` cancelling.
fn swap_param<F: Real, M: NnModule<F> + ?Sized>(
    module: &mut M,
    target: &str,
    index: usize,
    value: F,
) -> F {
    let mut old = F::zero();
    module.visit_params("", &mut |name, p| {
        if name == target {
            let v = p.value_mut();
            old = v[index];
            v[index] = value;
        }
    });
    old
}

/// Compares analytic gradients against central differences.
///
/// `loss` must zero the module's gradients, run forward and backward, and
/// return the scalar loss; it is called once for the analytic gradients and
/// twice per probe for the numeric ones. Parameters are restored exactly
/// after each probe.
pub fn gradient_check<F: Real, M: NnModule<F> + ?Sized>(
    module: &mut M,
    mut loss: impl FnMut(&mut M) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if cfg.eps <= 0.0 || !cfg.eps.is_finite() {
        return Err(Error::invalid("gradient check eps must be positive"));
    }
    loss(module)?;
    let analytic = read_grads(module);
    let inventory = param_inventory(module);

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        failures: Vec::new(),
    };
    for (ti, (name, len)) in inventory.iter().enumerate() {
        let probes: Vec<usize> = match cfg.max_probes_per_tensor {
            Some(cap) if *len > cap => (0..cap).map(|k| k * *len / cap).collect(),
            _ => (0..*len).collect(),
        };
        for idx in probes {
            let base = swap_param(module, name, idx, F::zero());
            swap_param(module, name, idx, F::from_f64(base.as_f64() + cfg.eps));
            let up = loss(module)?;
            swap_param(module, name, idx, F::from_f64(base.as_f64() - cfg.eps));
            let down = loss(module)?;
            swap_param(module, name, idx, base);
            let numeric = (up - down) / (2.0 * cfg.eps);
            let a = analytic[ti].1[idx];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{name}[{idx}]");
            }
            if e > cfg.tolerance {
                report.failures.push(GradFailure {
                    name: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err: e,
                });
            }
        }
    }
    // The probe loop leaves parameters bit-restored; recompute gradients so
    // the module is in the same state as after a plain loss call.
    loss(module)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{join, Linear, NnModule, ParamSlot};
    use ndarray::Array2;

    struct Quad {
        lin: Linear<f64>,
        x: Array2<f64>,
        /// When set, the backward pass reports a corrupted gradient.
        sabotage: bool,
    }

    impl NnModule<f64> for Quad {
        fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<f64>)) {
            self.lin.visit_params(&join(prefix, "lin"), f);
        }
    }

    fn quad_loss(q: &mut Quad) -> Result<f64> {
        q.zero_grads();
        let x = q.x.clone();
        let (y, cache) = q.lin.forward(&x);
        let loss: f64 = y.iter().map(|v| v * v).sum();
        let mut g = y.mapv(|v| 2.0 * v);
        if q.sabotage {
            g[[0, 0]] += 0.5;
        }
        q.lin.backward(&cache, &g);
        Ok(loss)
    }

    fn quad() -> Quad {
        let mut rng = crate::rng::rng_from_seed(3);
        Quad {
            lin: Linear::new(&mut rng, 3, 2, true),
            x: ndarray::arr2(&[[0.3, -0.2, 0.9], [1.1, 0.4, -0.5]]),
            sabotage: false,
        }
    }

    #[test]
    fn correct_gradients_pass() {
        let mut q = quad();
        let report = gradient_check(&mut q, quad_loss, &GradCheckConfig::default()).unwrap();
        assert_eq!(report.checked, 8, "3x2 weights + 2 biases");
        assert!(report.max_rel_err < 1e-7, "max rel err {}", report.max_rel_err);
        assert!(report.failures.is_empty());
    }

    #[test]
    fn corrupted_gradients_are_detected() {
        let mut q = quad();
        q.sabotage = true;
        let report = gradient_check(&mut q, quad_loss, &GradCheckConfig::default()).unwrap();
        assert!(!report.passed(1e-4));
        assert!(!report.failures.is_empty());
        assert!(report.worst.starts_with("lin."));
    }

    #[test]
    fn probe_cap_subsamples() {
        let mut q = quad();
        let cfg = GradCheckConfig { max_probes_per_tensor: Some(2), ..Default::default() };
        let report = gradient_check(&mut q, quad_loss, &cfg).unwrap();
        assert_eq!(report.checked, 4, "two tensors, two probes each");
    }

    #[test]
    fn parameters_are_restored_after_probing() {
        let mut q = quad();
        let before: Vec<f64> = q.lin.w.value.iter().cloned().collect();
        gradient_check(&mut q, quad_loss, &GradCheckConfig::default()).unwrap();
        let after: Vec<f64> = q.lin.w.value.iter().cloned().collect();
        assert_eq!(before, after);
    }

    #[test]
    fn composed_backbone_and_goal_head_pass_at_64_bit() {
        use crate::encoders::{EncoderConfig, TextConfig};
        use crate::grid::patchify;
        use crate::mask::sample_mask;
        use crate::model::{FusionConfig, Model, OutputGrads};
        use crate::training::{pretext_loss, LossScope};
        use ndarray::Array3;
        use rand::Rng;

        let enc = EncoderConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            depth_self: 1,
            depth_bidir: 1,
            heads: 2,
            mlp_ratio: 2.0,
        };
        let text = TextConfig { embed_dim: 8, depth: 1, heads: 2, mlp_ratio: 2.0, max_len: 6 };
        let fusion = FusionConfig {
            stages: 1,
            heads: 2,
            decoder_depth: 1,
            decoder_dim: 12,
            decoder_heads: 2,
            mlp_ratio: 2.0,
        };
        let mut model =
            Model::<f64>::new(&mut crate::rng::rng_from_seed(2), enc, text, fusion, 9, "t".into())
                .unwrap();
        let grid = *model.grid();
        let mut rng = crate::rng::rng_from_seed(3);
        let start = Array3::from_shape_fn((16, 16, 3), |_| rng.gen_range(0.0..1.0));
        let goal = Array3::from_shape_fn((16, 16, 3), |_| rng.gen_range(0.0..1.0));
        let target = patchify(&goal, &grid).unwrap();
        let mask = sample_mask(&grid, 0.5, 7).unwrap();
        let ids = vec![1usize, 4, 2];

        let loss = |m: &mut Model<f64>| -> Result<f64> {
            m.zero_grads();
            let (out, cache) = m.forward(&start, Some(&goal), &mask, &ids)?;
            let (l, d) = pretext_loss(&out.goal.per_patch, &target, &mask, LossScope::AllPatches)?;
            m.backward(&cache, OutputGrads { d_per_patch: Some(d), ..Default::default() })?;
            Ok(l)
        };
        let cfg = GradCheckConfig { max_probes_per_tensor: Some(3), ..Default::default() };
        let report = gradient_check(&mut model, loss, &cfg).unwrap();
        assert!(report.checked > 100, "expected broad coverage, got {}", report.checked);
        assert!(
            report.passed(1e-4),
            "worst {} at {} ({} failures)",
            report.max_rel_err,
            report.worst,
            report.failures.len()
        );
    }
}
