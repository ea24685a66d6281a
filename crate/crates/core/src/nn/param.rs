use crate::real::Real;
use ndarray::{Array, Dimension};

/// Trainable tensor with its accumulated gradient. Gradients are added into
/// by backward passes and cleared explicitly by the optimizer step.
#[derive(Debug, Clone)]
pub struct Param<F: Real, D: Dimension> {
    pub value: Array<F, D>,
    pub grad: Array<F, D>,
}

impl<F: Real, D: Dimension> Param<F, D> {
    pub fn new(value: Array<F, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

/// Flat view of one parameter tensor, used by the optimizer, the checkpoint
/// writer, and the finite-difference harness. Params are always stored in
/// standard layout so the slice views cannot fail.
pub trait ParamSlot<F: Real> {
    fn shape(&self) -> Vec<usize>;
    fn value(&self) -> &[F];
    fn value_mut(&mut self) -> &mut [F];
    fn grad(&self) -> &[F];
    fn grad_mut(&mut self) -> &mut [F];
}

impl<F: Real, D: Dimension> ParamSlot<F> for Param<F, D> {
    fn shape(&self) -> Vec<usize> {
        self.value.shape().to_vec()
    }

    fn value(&self) -> &[F] {
        self.value.as_slice().expect("param stored in standard layout")
    }

    fn value_mut(&mut self) -> &mut [F] {
        self.value.as_slice_mut().expect("param stored in standard layout")
    }

    fn grad(&self) -> &[F] {
        self.grad.as_slice().expect("param grad stored in standard layout")
    }

    fn grad_mut(&mut self) -> &mut [F] {
        self.grad.as_slice_mut().expect("param grad stored in standard layout")
    }
}

/// Anything holding trainable parameters. Visitation order is deterministic
/// and names are stable across runs; both properties are load-bearing for
/// checkpoints and optimizer state.
pub trait NnModule<F: Real> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>));

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |_, p| {
            p.grad_mut().fill(F::zero());
        });
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value().len());
        n
    }
}

/// Joins a visitation prefix with a field name ("enc" + "blocks.0" -> "enc.blocks.0").
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
