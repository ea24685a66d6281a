use crate::nn::init;
use crate::nn::param::{join, NnModule, Param, ParamSlot};
use crate::real::Real;
use ndarray::{Array1, Array2, Axis, Ix1};

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm<F: Real> {
    pub gamma: Param<F, Ix1>,
    pub beta: Param<F, Ix1>,
    eps: F,
}

pub struct LayerNormCache<F: Real> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(init::ones1(dim)),
            beta: Param::new(init::zeros1(dim)),
            eps: F::from_f64(1e-6),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let n = x.shape()[1];
        let inv_n = F::from_f64(1.0 / n as f64);
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.shape()[0]);
        for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
            let mean = row.sum() * inv_n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| *v * *v).fold(F::zero(), |a, b| a + b) * inv_n;
            let rs = F::one() / (var + self.eps).sqrt();
            row.mapv_inplace(|v| v * rs);
            *r = rs;
        }
        let y = &xhat * &self.gamma.value + &self.beta.value;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<F>, gout: &Array2<F>) -> Array2<F> {
        let n = cache.xhat.shape()[1];
        let inv_n = F::from_f64(1.0 / n as f64);
        self.gamma.grad = &self.gamma.grad + &(gout * &cache.xhat).sum_axis(Axis(0));
        self.beta.grad = &self.beta.grad + &gout.sum_axis(Axis(0));

        let mut gin = Array2::zeros(cache.xhat.raw_dim());
        for i in 0..cache.xhat.shape()[0] {
            let xh = cache.xhat.row(i);
            let go = gout.row(i);
            // dxhat = gout * gamma; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
            let mut m1 = F::zero();
            let mut m2 = F::zero();
            let dxhat: Vec<F> = go
                .iter()
                .zip(self.gamma.value.iter())
                .map(|(g, w)| *g * *w)
                .collect();
            for (d, x) in dxhat.iter().zip(xh.iter()) {
                m1 = m1 + *d;
                m2 = m2 + *d * *x;
            }
            m1 = m1 * inv_n;
            m2 = m2 * inv_n;
            let rs = cache.rstd[i];
            for (j, d) in dxhat.iter().enumerate() {
                gin[[i, j]] = rs * (*d - m1 - xh[j] * m2);
            }
        }
        gin
    }
}

impl<F: Real> NnModule<F> for LayerNorm<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}
