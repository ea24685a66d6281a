use crate::nn::act::{gelu, gelu_backward};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::param::{join, NnModule, ParamSlot};
use crate::real::Real;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Transformer feed-forward sublayer: Linear -> GELU -> Linear.
#[derive(Debug, Clone)]
pub struct Mlp<F: Real> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

pub struct MlpCache<F: Real> {
    c1: LinearCache<F>,
    pre_act: Array2<F>,
    c2: LinearCache<F>,
}

impl<F: Real> Mlp<F> {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> Self {
        Mlp { fc1: Linear::new(rng, dim, hidden, true), fc2: Linear::new(rng, hidden, dim, true) }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, MlpCache<F>) {
        let (pre_act, c1) = self.fc1.forward(x);
        let hidden = gelu(&pre_act);
        let (y, c2) = self.fc2.forward(&hidden);
        (y, MlpCache { c1, pre_act, c2 })
    }

    pub fn backward(&mut self, cache: &MlpCache<F>, gout: &Array2<F>) -> Array2<F> {
        let ghidden = self.fc2.backward(&cache.c2, gout);
        let gpre = gelu_backward(&cache.pre_act, &ghidden);
        self.fc1.backward(&cache.c1, &gpre)
    }
}

impl<F: Real> NnModule<F> for Mlp<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}
