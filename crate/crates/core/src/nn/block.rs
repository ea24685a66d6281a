use crate::error::Result;
use crate::nn::attention::{AttentionCache, MultiHeadAttention};
use crate::nn::mlp::{Mlp, MlpCache};
use crate::nn::norm::{LayerNorm, LayerNormCache};
use crate::nn::param::{join, NnModule, ParamSlot};
use crate::real::Real;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Pre-LN transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
#[derive(Debug, Clone)]
pub struct Block<F: Real> {
    pub ln1: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln2: LayerNorm<F>,
    pub mlp: Mlp<F>,
}

pub struct BlockCache<F: Real> {
    ln1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    mlp: MlpCache<F>,
}

impl<F: Real> Block<F> {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, mlp_ratio: f64) -> Result<Self> {
        let hidden = ((dim as f64) * mlp_ratio).round() as usize;
        Ok(Block {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(rng, dim, dim, heads)?,
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, hidden),
        })
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, BlockCache<F>) {
        let (n1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(&n1, &n1);
        let x1 = x + &a;
        let (n2, ln2) = self.ln2.forward(&x1);
        let (m, mlp) = self.mlp.forward(&n2);
        let y = &x1 + &m;
        (y, BlockCache { ln1, attn, ln2, mlp })
    }

    pub fn backward(&mut self, cache: &BlockCache<F>, gout: &Array2<F>) -> Array2<F> {
        let gm = self.mlp.backward(&cache.mlp, gout);
        let gn2 = self.ln2.backward(&cache.ln2, &gm);
        let gx1 = gout + &gn2;
        let (gq, gkv) = self.attn.backward(&cache.attn, &gx1);
        let gn1 = gq + gkv;
        let gx = self.ln1.backward(&cache.ln1, &gn1);
        &gx1 + &gx
    }
}

impl<F: Real> NnModule<F> for Block<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        self.ln1.visit_params(&join(prefix, "ln1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.ln2.visit_params(&join(prefix, "ln2"), f);
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }
}

/// Cross-branch block for the Siamese encoder. Both branches share every
/// weight; each queries the other's pre-update normed tokens, so swapping the
/// branch inputs swaps the outputs and identical inputs stay bit-identical.
#[derive(Debug, Clone)]
pub struct BidirBlock<F: Real> {
    pub ln_attn: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln_mlp: LayerNorm<F>,
    pub mlp: Mlp<F>,
}

pub struct BidirBlockCache<F: Real> {
    ln_s: LayerNormCache<F>,
    ln_f: LayerNormCache<F>,
    attn_s: AttentionCache<F>,
    attn_f: AttentionCache<F>,
    lnm_s: LayerNormCache<F>,
    lnm_f: LayerNormCache<F>,
    mlp_s: MlpCache<F>,
    mlp_f: MlpCache<F>,
}

impl<F: Real> BidirBlock<F> {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, mlp_ratio: f64) -> Result<Self> {
        let hidden = ((dim as f64) * mlp_ratio).round() as usize;
        Ok(BidirBlock {
            ln_attn: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(rng, dim, dim, heads)?,
            ln_mlp: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, hidden),
        })
    }

    pub fn forward(
        &self,
        xs: &Array2<F>,
        xf: &Array2<F>,
    ) -> (Array2<F>, Array2<F>, BidirBlockCache<F>) {
        let (ns, ln_s) = self.ln_attn.forward(xs);
        let (nf, ln_f) = self.ln_attn.forward(xf);
        let (attn_sf, attn_s) = self.attn.forward(&ns, &nf);
        let (attn_fs, attn_f) = self.attn.forward(&nf, &ns);
        let xs1 = xs + &attn_sf;
        let xf1 = xf + &attn_fs;
        let (nms, lnm_s) = self.ln_mlp.forward(&xs1);
        let (nmf, lnm_f) = self.ln_mlp.forward(&xf1);
        let (ms, mlp_s) = self.mlp.forward(&nms);
        let (mf, mlp_f) = self.mlp.forward(&nmf);
        let ys = &xs1 + &ms;
        let yf = &xf1 + &mf;
        (ys, yf, BidirBlockCache { ln_s, ln_f, attn_s, attn_f, lnm_s, lnm_f, mlp_s, mlp_f })
    }

    pub fn backward(
        &mut self,
        cache: &BidirBlockCache<F>,
        gys: &Array2<F>,
        gyf: &Array2<F>,
    ) -> (Array2<F>, Array2<F>) {
        let gms = self.mlp.backward(&cache.mlp_s, gys);
        let gx1s = gys + &self.ln_mlp.backward(&cache.lnm_s, &gms);
        let gmf = self.mlp.backward(&cache.mlp_f, gyf);
        let gx1f = gyf + &self.ln_mlp.backward(&cache.lnm_f, &gmf);

        let (gns_a, gnf_a) = self.attn.backward(&cache.attn_s, &gx1s);
        let (gnf_b, gns_b) = self.attn.backward(&cache.attn_f, &gx1f);
        let gns = gns_a + gns_b;
        let gnf = gnf_a + gnf_b;
        let gxs = &gx1s + &self.ln_attn.backward(&cache.ln_s, &gns);
        let gxf = &gx1f + &self.ln_attn.backward(&cache.ln_f, &gnf);
        (gxs, gxf)
    }
}

impl<F: Real> NnModule<F> for BidirBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        self.ln_attn.visit_params(&join(prefix, "ln_attn"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.ln_mlp.visit_params(&join(prefix, "ln_mlp"), f);
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }
}
