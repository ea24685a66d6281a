use crate::error::{Error, Result};
use crate::nn::act::{softmax_rows, softmax_rows_backward};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::param::{join, NnModule, ParamSlot};
use crate::real::Real;
use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;

/// Multi-head scaled dot-product attention. The query stream has width
/// `q_dim`; keys/values may come from a stream of different width `kv_dim`
/// (text attending into the vision stream and vice versa). Output width is
/// `q_dim` so the result can be residually added to the query stream.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<F: Real> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    heads: usize,
}

pub struct AttentionCache<F: Real> {
    q_cache: LinearCache<F>,
    k_cache: LinearCache<F>,
    v_cache: LinearCache<F>,
    o_cache: LinearCache<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
}

impl<F: Real> MultiHeadAttention<F> {
    pub fn new(rng: &mut ChaCha8Rng, q_dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || q_dim % heads != 0 {
            return Err(Error::invalid(format!(
                "attention width {q_dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(rng, q_dim, q_dim, true),
            wk: Linear::new(rng, kv_dim, q_dim, true),
            wv: Linear::new(rng, kv_dim, q_dim, true),
            wo: Linear::new(rng, q_dim, q_dim, true),
            heads,
        })
    }

    pub fn forward(&self, q_in: &Array2<F>, kv_in: &Array2<F>) -> (Array2<F>, AttentionCache<F>) {
        let dm = self.wq.out_dim();
        let dh = dm / self.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());

        let (q, q_cache) = self.wq.forward(q_in);
        let (k, k_cache) = self.wk.forward(kv_in);
        let (v, v_cache) = self.wv.forward(kv_in);

        let lq = q.shape()[0];
        let mut ctx = Array2::zeros((lq, dm));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols).to_owned();
            let kh = k.slice(cols).to_owned();
            let vh = v.slice(cols).to_owned();
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            let p = softmax_rows(&scores);
            let ctx_h = p.dot(&vh);
            ctx.slice_mut(cols).assign(&ctx_h);
            probs.push(p);
        }
        let (out, o_cache) = self.wo.forward(&ctx);
        (out, AttentionCache { q_cache, k_cache, v_cache, o_cache, q, k, v, probs })
    }

    /// Returns (grad w.r.t. query input, grad w.r.t. key/value input).
    pub fn backward(
        &mut self,
        cache: &AttentionCache<F>,
        gout: &Array2<F>,
    ) -> (Array2<F>, Array2<F>) {
        let dm = self.wq.out_dim();
        let dh = dm / self.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());

        let gctx = self.wo.backward(&cache.o_cache, gout);
        let mut gq = Array2::zeros(cache.q.raw_dim());
        let mut gk = Array2::zeros(cache.k.raw_dim());
        let mut gv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = cache.q.slice(cols).to_owned();
            let kh = cache.k.slice(cols).to_owned();
            let vh = cache.v.slice(cols).to_owned();
            let p = &cache.probs[h];
            let gctx_h = gctx.slice(cols).to_owned();

            let gp = gctx_h.dot(&vh.t());
            let gvh = p.t().dot(&gctx_h);
            let mut gscores = softmax_rows_backward(p, &gp);
            gscores.mapv_inplace(|s| s * scale);
            let gqh = gscores.dot(&kh);
            let gkh = gscores.t().dot(&qh);

            gq.slice_mut(cols).assign(&gqh);
            gk.slice_mut(cols).assign(&gkh);
            gv.slice_mut(cols).assign(&gvh);
        }
        let g_q_in = self.wq.backward(&cache.q_cache, &gq);
        let g_k_in = self.wk.backward(&cache.k_cache, &gk);
        let g_v_in = self.wv.backward(&cache.v_cache, &gv);
        (g_q_in, g_k_in + g_v_in)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
}

impl<F: Real> NnModule<F> for MultiHeadAttention<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        self.wq.visit_params(&join(prefix, "wq"), f);
        self.wk.visit_params(&join(prefix, "wk"), f);
        self.wv.visit_params(&join(prefix, "wv"), f);
        self.wo.visit_params(&join(prefix, "wo"), f);
    }
}
