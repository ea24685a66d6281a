use crate::nn::init;
use crate::nn::param::{join, NnModule, Param, ParamSlot};
use crate::real::Real;
use ndarray::{Array1, Array2, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;

/// Affine map y = x W + b with W stored [in, out].
#[derive(Debug, Clone)]
pub struct Linear<F: Real> {
    pub w: Param<F, Ix2>,
    pub b: Option<Param<F, Ix1>>,
}

/// Forward activations needed by backward.
pub struct LinearCache<F: Real> {
    x: Array2<F>,
}

impl<F: Real> Linear<F> {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            w: Param::new(init::xavier(rng, in_dim, out_dim)),
            b: if bias { Some(Param::new(init::zeros1(out_dim))) } else { None },
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LinearCache<F>) {
        let mut y = x.dot(&self.w.value);
        if let Some(b) = &self.b {
            y += &b.value;
        }
        (y, LinearCache { x: x.clone() })
    }

    /// Accumulates parameter grads, returns grad w.r.t. the input.
    pub fn backward(&mut self, cache: &LinearCache<F>, gout: &Array2<F>) -> Array2<F> {
        self.w.grad = &self.w.grad + &cache.x.t().dot(gout);
        if let Some(b) = &mut self.b {
            let col_sum: Array1<F> = gout.sum_axis(ndarray::Axis(0));
            b.grad = &b.grad + &col_sum;
        }
        gout.dot(&self.w.value.t())
    }
}

impl<F: Real> NnModule<F> for Linear<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        f(&join(prefix, "w"), &mut self.w);
        if let Some(b) = &mut self.b {
            f(&join(prefix, "b"), b);
        }
    }
}
