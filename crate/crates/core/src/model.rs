//! Full backbone: Siamese vision encoder + text encoder, multi-stage
//! bidirectional image-text fusion, and a decoder whose queries are the
//! (masked) goal-branch tokens. A one-layer goal head maps decoder tokens
//! back to patch pixels.
//!
//! Fusion stages are cross-attention only (no feed-forward sublayer): each
//! stage lets vision tokens query text tokens and text tokens query vision
//! tokens, both residually. Zeroing a stage's two output projections turns
//! it into an exact identity on both streams.

use crate::encoders::text::{TextCache, TextConfig, TextEncoder};
use crate::encoders::vision::{EncoderConfig, VisionCache, VisionEncoder};
use crate::error::{Error, Result};
use crate::grid::{patchify, unpatchify, PatchGrid};
use crate::mask::MaskSpec;
use crate::nn::attention::{AttentionCache, MultiHeadAttention};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::mlp::{Mlp, MlpCache};
use crate::nn::norm::{LayerNorm, LayerNormCache};
use crate::nn::param::{join, NnModule, ParamSlot};
use crate::real::Real;
use ndarray::{s, Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Number of bidirectional image-text cross-attention stages.
    pub stages: usize,
    pub heads: usize,
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: f64,
}

impl FusionConfig {
    pub fn desk() -> Self {
        FusionConfig {
            stages: 2,
            heads: 4,
            decoder_depth: 2,
            decoder_dim: 128,
            decoder_heads: 4,
            mlp_ratio: 4.0,
        }
    }

    pub fn paper_scale() -> Self {
        FusionConfig {
            stages: 2,
            heads: 8,
            decoder_depth: 8,
            decoder_dim: 512,
            decoder_heads: 16,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self, vision_dim: usize, text_dim: usize) -> Result<()> {
        if self.stages == 0 || self.decoder_depth == 0 {
            return Err(Error::invalid("fusion stages and decoder depth must be >= 1"));
        }
        if self.heads == 0
            || vision_dim % self.heads != 0
            || text_dim % self.heads != 0
        {
            return Err(Error::invalid(format!(
                "fusion heads {} must divide vision dim {vision_dim} and text dim {text_dim}",
                self.heads
            )));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return Err(Error::invalid(format!(
                "decoder dim {} must be a positive multiple of decoder heads {}",
                self.decoder_dim, self.decoder_heads
            )));
        }
        Ok(())
    }
}

/// One bidirectional cross-attention stage between the vision token stream
/// (both Siamese branches, concatenated) and the text token stream.
#[derive(Debug, Clone)]
pub struct FusionStage<F: Real> {
    pub ln_v: LayerNorm<F>,
    pub ln_t: LayerNorm<F>,
    /// Vision queries attending into text.
    pub ca_v: MultiHeadAttention<F>,
    /// Text queries attending into vision.
    pub ca_t: MultiHeadAttention<F>,
}

pub struct FusionStageCache<F: Real> {
    ln_v: LayerNormCache<F>,
    ln_t: LayerNormCache<F>,
    ca_v: AttentionCache<F>,
    ca_t: AttentionCache<F>,
}

impl<F: Real> FusionStage<F> {
    pub fn new(rng: &mut ChaCha8Rng, vision_dim: usize, text_dim: usize, heads: usize) -> Result<Self> {
        Ok(FusionStage {
            ln_v: LayerNorm::new(vision_dim),
            ln_t: LayerNorm::new(text_dim),
            ca_v: MultiHeadAttention::new(rng, vision_dim, text_dim, heads)?,
            ca_t: MultiHeadAttention::new(rng, text_dim, vision_dim, heads)?,
        })
    }

    pub fn forward(
        &self,
        v: &Array2<F>,
        t: &Array2<F>,
    ) -> (Array2<F>, Array2<F>, FusionStageCache<F>) {
        let (nv, ln_v) = self.ln_v.forward(v);
        let (nt, ln_t) = self.ln_t.forward(t);
        let (av, ca_v) = self.ca_v.forward(&nv, &nt);
        let (at, ca_t) = self.ca_t.forward(&nt, &nv);
        (v + &av, t + &at, FusionStageCache { ln_v, ln_t, ca_v, ca_t })
    }

    pub fn backward(
        &mut self,
        cache: &FusionStageCache<F>,
        gv_out: &Array2<F>,
        gt_out: &Array2<F>,
    ) -> (Array2<F>, Array2<F>) {
        let (gnv_a, gnt_a) = self.ca_v.backward(&cache.ca_v, gv_out);
        let (gnt_b, gnv_b) = self.ca_t.backward(&cache.ca_t, gt_out);
        let gnv = gnv_a + gnv_b;
        let gnt = gnt_a + gnt_b;
        let gv = gv_out + &self.ln_v.backward(&cache.ln_v, &gnv);
        let gt = gt_out + &self.ln_t.backward(&cache.ln_t, &gnt);
        (gv, gt)
    }
}

impl<F: Real> NnModule<F> for FusionStage<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        self.ln_v.visit_params(&join(prefix, "ln_v"), f);
        self.ln_t.visit_params(&join(prefix, "ln_t"), f);
        self.ca_v.visit_params(&join(prefix, "ca_v"), f);
        self.ca_t.visit_params(&join(prefix, "ca_t"), f);
    }
}

/// Decoder block: self-attention over the goal queries, cross-attention into
/// the fused memory, feed-forward. Pre-LN with residuals throughout, so a
/// zeroed cross-attention output projection leaves the pure self path.
#[derive(Debug, Clone)]
pub struct DecoderBlock<F: Real> {
    pub ln1: LayerNorm<F>,
    pub self_attn: MultiHeadAttention<F>,
    pub ln2: LayerNorm<F>,
    pub cross: MultiHeadAttention<F>,
    pub ln3: LayerNorm<F>,
    pub mlp: Mlp<F>,
}

pub struct DecoderBlockCache<F: Real> {
    ln1: LayerNormCache<F>,
    self_attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    cross: AttentionCache<F>,
    ln3: LayerNormCache<F>,
    mlp: MlpCache<F>,
}

impl<F: Real> DecoderBlock<F> {
    fn new(rng: &mut ChaCha8Rng, dim: usize, mem_dim: usize, heads: usize, mlp_ratio: f64) -> Result<Self> {
        let hidden = ((dim as f64) * mlp_ratio).round() as usize;
        Ok(DecoderBlock {
            ln1: LayerNorm::new(dim),
            self_attn: MultiHeadAttention::new(rng, dim, dim, heads)?,
            ln2: LayerNorm::new(dim),
            cross: MultiHeadAttention::new(rng, dim, mem_dim, heads)?,
            ln3: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, hidden),
        })
    }

    pub fn forward(&self, x: &Array2<F>, mem_n: &Array2<F>) -> (Array2<F>, DecoderBlockCache<F>) {
        let (n1, ln1) = self.ln1.forward(x);
        let (a, self_attn) = self.self_attn.forward(&n1, &n1);
        let x1 = x + &a;
        let (n2, ln2) = self.ln2.forward(&x1);
        let (c, cross) = self.cross.forward(&n2, mem_n);
        let x2 = &x1 + &c;
        let (n3, ln3) = self.ln3.forward(&x2);
        let (m, mlp) = self.mlp.forward(&n3);
        let y = &x2 + &m;
        (y, DecoderBlockCache { ln1, self_attn, ln2, cross, ln3, mlp })
    }

    /// Returns (grad w.r.t. x, grad w.r.t. normed memory).
    fn backward(
        &mut self,
        cache: &DecoderBlockCache<F>,
        gout: &Array2<F>,
    ) -> (Array2<F>, Array2<F>) {
        let gm = self.mlp.backward(&cache.mlp, gout);
        let gx2 = gout + &self.ln3.backward(&cache.ln3, &gm);
        let (gq, gmem) = self.cross.backward(&cache.cross, &gx2);
        let gx1 = &gx2 + &self.ln2.backward(&cache.ln2, &gq);
        let (gq2, gkv2) = self.self_attn.backward(&cache.self_attn, &gx1);
        let gn1 = gq2 + gkv2;
        let gx = &gx1 + &self.ln1.backward(&cache.ln1, &gn1);
        (gx, gmem)
    }
}

impl<F: Real> NnModule<F> for DecoderBlock<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        self.ln1.visit_params(&join(prefix, "ln1"), f);
        self.self_attn.visit_params(&join(prefix, "self_attn"), f);
        self.ln2.visit_params(&join(prefix, "ln2"), f);
        self.cross.visit_params(&join(prefix, "cross"), f);
        self.ln3.visit_params(&join(prefix, "ln3"), f);
        self.mlp.visit_params(&join(prefix, "mlp"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<F: Real> {
    pub input_proj: Linear<F>,
    pub ln_mem: LayerNorm<F>,
    pub blocks: Vec<DecoderBlock<F>>,
    pub norm: LayerNorm<F>,
}

pub struct DecoderCache<F: Real> {
    proj: LinearCache<F>,
    ln_mem: LayerNormCache<F>,
    blocks: Vec<DecoderBlockCache<F>>,
    norm: LayerNormCache<F>,
}

impl<F: Real> Decoder<F> {
    fn new(rng: &mut ChaCha8Rng, vision_dim: usize, cfg: &FusionConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.decoder_depth);
        for _ in 0..cfg.decoder_depth {
            blocks.push(DecoderBlock::new(
                rng,
                cfg.decoder_dim,
                vision_dim,
                cfg.decoder_heads,
                cfg.mlp_ratio,
            )?);
        }
        Ok(Decoder {
            input_proj: Linear::new(rng, vision_dim, cfg.decoder_dim, true),
            ln_mem: LayerNorm::new(vision_dim),
            blocks,
            norm: LayerNorm::new(cfg.decoder_dim),
        })
    }

    pub fn forward(&self, queries: &Array2<F>, memory: &Array2<F>) -> (Array2<F>, DecoderCache<F>) {
        let (mem_n, ln_mem) = self.ln_mem.forward(memory);
        let (mut x, proj) = self.input_proj.forward(queries);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, &mem_n);
            x = y;
            blocks.push(c);
        }
        let (h, norm) = self.norm.forward(&x);
        (h, DecoderCache { proj, ln_mem, blocks, norm })
    }

    fn backward(
        &mut self,
        cache: &DecoderCache<F>,
        gh: &Array2<F>,
        mem_rows: usize,
    ) -> (Array2<F>, Array2<F>) {
        let mut gx = self.norm.backward(&cache.norm, gh);
        let mut gmem_n: Array2<F> = Array2::zeros((mem_rows, self.input_proj.in_dim()));
        for (b, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            let (gxn, gm) = b.backward(c, &gx);
            gx = gxn;
            gmem_n = gmem_n + gm;
        }
        let g_queries = self.input_proj.backward(&cache.proj, &gx);
        let g_memory = self.ln_mem.backward(&cache.ln_mem, &gmem_n);
        (g_queries, g_memory)
    }
}

impl<F: Real> NnModule<F> for Decoder<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        self.input_proj.visit_params(&join(prefix, "input_proj"), f);
        self.ln_mem.visit_params(&join(prefix, "ln_mem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}

/// Representation produced by one forward pass.
#[derive(Debug, Clone)]
pub struct FusedFeatures<F: Real> {
    /// Decoder output, one row per goal-grid token [N, decoder_dim].
    pub h: Array2<F>,
    /// Fused vision tokens before the decoder [2N, embed_dim]; rows 0..N are
    /// the input branch, rows N..2N the goal branch. State-based heads
    /// (action, bounding box) pool these.
    pub pre_decoder: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct GoalPrediction<F: Real> {
    /// Raw per-patch pixel regression [N, P*P*3].
    pub per_patch: Array2<F>,
    /// Reassembled prediction clamped to [0, 1], shape [H, W, 3].
    pub image: Array3<F>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput<F: Real> {
    pub features: FusedFeatures<F>,
    pub goal: GoalPrediction<F>,
    /// Mean-pooled fused text tokens (bounding-box head input).
    pub text_pooled: Array1<F>,
}

pub struct ModelCache<F: Real> {
    text: TextCache<F>,
    vision: VisionCache<F>,
    stages: Vec<FusionStageCache<F>>,
    decoder: DecoderCache<F>,
    goal_head: LinearCache<F>,
    /// 1 where the raw per-patch value was inside [0, 1] (clamp pass-through).
    clamp_pass: Array2<F>,
    text_len: usize,
}

/// Gradients flowing into a backward pass, all optional; absent means zero.
pub struct OutputGrads<F: Real> {
    pub d_h: Option<Array2<F>>,
    pub d_per_patch: Option<Array2<F>>,
    /// Gradient w.r.t. the clamped goal image.
    pub d_goal_image: Option<Array3<F>>,
    pub d_pre_decoder: Option<Array2<F>>,
    pub d_text_pooled: Option<Array1<F>>,
}

impl<F: Real> Default for OutputGrads<F> {
    fn default() -> Self {
        OutputGrads {
            d_h: None,
            d_per_patch: None,
            d_goal_image: None,
            d_pre_decoder: None,
            d_text_pooled: None,
        }
    }
}

/// Gradients w.r.t. the image inputs (diagnostics and invariant tests).
pub struct InputGrads<F: Real> {
    pub start_image: Array3<F>,
    pub goal_image: Array3<F>,
}

#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    pub vision: VisionEncoder<F>,
    pub text: TextEncoder<F>,
    pub stages: Vec<FusionStage<F>>,
    pub decoder: Decoder<F>,
    pub goal_head: Linear<F>,
    fusion_cfg: FusionConfig,
    vocabulary_id: String,
}

impl<F: Real> Model<F> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        enc_cfg: EncoderConfig,
        text_cfg: TextConfig,
        fusion_cfg: FusionConfig,
        vocab_size: usize,
        vocabulary_id: String,
    ) -> Result<Self> {
        enc_cfg.validate()?;
        text_cfg.validate()?;
        fusion_cfg.validate(enc_cfg.embed_dim, text_cfg.embed_dim)?;
        let vision = VisionEncoder::new(rng, enc_cfg)?;
        let text = TextEncoder::new(rng, text_cfg, vocab_size)?;
        let mut stages = Vec::with_capacity(fusion_cfg.stages);
        for _ in 0..fusion_cfg.stages {
            stages.push(FusionStage::new(
                rng,
                enc_cfg.embed_dim,
                text_cfg.embed_dim,
                fusion_cfg.heads,
            )?);
        }
        let decoder = Decoder::new(rng, enc_cfg.embed_dim, &fusion_cfg)?;
        let grid = enc_cfg.grid()?;
        let goal_head = Linear::new(rng, fusion_cfg.decoder_dim, grid.patch_dim(), true);
        Ok(Model { vision, text, stages, decoder, goal_head, fusion_cfg, vocabulary_id })
    }

    pub fn grid(&self) -> &PatchGrid {
        self.vision.grid()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        self.vision.config()
    }

    pub fn text_config(&self) -> TextConfig {
        self.text.config()
    }

    pub fn fusion_config(&self) -> FusionConfig {
        self.fusion_cfg
    }

    pub fn vocabulary_id(&self) -> &str {
        &self.vocabulary_id
    }

    pub fn vocab_size(&self) -> usize {
        self.text.vocab_size()
    }

    /// Full forward pass. `goal` may be omitted only under a full mask (the
    /// inference path); the result is bit-identical to passing any goal
    /// image with ratio 1.0, because masked rows never read patch content.
    pub fn forward(
        &self,
        start: &Array3<F>,
        goal: Option<&Array3<F>>,
        mask: &MaskSpec,
        ids: &[usize],
    ) -> Result<(ModelOutput<F>, ModelCache<F>)> {
        let grid = *self.vision.grid();
        let n = grid.token_count();
        let ps = patchify(start, &grid)?;
        let pf = match goal {
            Some(g) => patchify(g, &grid)?,
            None => {
                if !mask.is_full() {
                    return Err(Error::invalid(
                        "goal image omitted but mask does not cover all tokens",
                    ));
                }
                Array2::zeros((n, grid.patch_dim()))
            }
        };
        let (temb, tcache) = self.text.forward(ids)?;
        let (vs, vf, vcache) = self.vision.forward(&ps, &pf, mask)?;

        let d = vs.shape()[1];
        let mut v = Array2::zeros((2 * n, d));
        v.slice_mut(s![..n, ..]).assign(&vs);
        v.slice_mut(s![n.., ..]).assign(&vf);
        let mut t = temb.tokens.clone();
        let mut stage_caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (vn, tn, c) = stage.forward(&v, &t);
            v = vn;
            t = tn;
            stage_caches.push(c);
        }

        let queries = v.slice(s![n.., ..]).to_owned();
        let (h, dcache) = self.decoder.forward(&queries, &v);
        let (per_patch, ghead_cache) = self.goal_head.forward(&h);

        let zero = F::zero();
        let one = F::one();
        let clamp_pass = per_patch.mapv(|x| if x >= zero && x <= one { one } else { zero });
        let clamped = per_patch.mapv(|x| x.max(zero).min(one));
        let image = unpatchify(&clamped, &grid)?;

        let text_len = t.shape()[0];
        let text_pooled = t.sum_axis(Axis(0)) * F::from_f64(1.0 / text_len as f64);

        Ok((
            ModelOutput {
                features: FusedFeatures { h, pre_decoder: v },
                goal: GoalPrediction { per_patch, image },
                text_pooled,
            },
            ModelCache {
                text: tcache,
                vision: vcache,
                stages: stage_caches,
                decoder: dcache,
                goal_head: ghead_cache,
                clamp_pass,
                text_len,
            },
        ))
    }

    /// Inference helper: goal branch fully masked, no goal image needed.
    pub fn infer(&self, start: &Array3<F>, ids: &[usize]) -> Result<ModelOutput<F>> {
        let mask = MaskSpec::full(self.vision.grid());
        let (out, _) = self.forward(start, None, &mask, ids)?;
        Ok(out)
    }

    /// Accumulates parameter gradients from any combination of output grads
    /// and returns gradients w.r.t. the raw input images.
    pub fn backward(&mut self, cache: &ModelCache<F>, grads: OutputGrads<F>) -> Result<InputGrads<F>> {
        let grid = *self.vision.grid();
        let n = grid.token_count();

        let mut d_per_patch: Array2<F> = Array2::zeros((n, grid.patch_dim()));
        let mut any_patch_grad = false;
        if let Some(dp) = grads.d_per_patch {
            d_per_patch = d_per_patch + &dp;
            any_patch_grad = true;
        }
        if let Some(dgi) = grads.d_goal_image {
            let dp = patchify_grad(&dgi, &grid)?;
            d_per_patch = d_per_patch + &(&dp * &cache.clamp_pass);
            any_patch_grad = true;
        }

        let mut d_h: Array2<F> = Array2::zeros((n, self.fusion_cfg.decoder_dim));
        if any_patch_grad {
            d_h = d_h + &self.goal_head.backward(&cache.goal_head, &d_per_patch);
        }
        if let Some(dh) = grads.d_h {
            d_h = d_h + &dh;
        }

        let (d_queries, d_memory) = self.decoder.backward(&cache.decoder, &d_h, 2 * n);
        let mut d_v = d_memory;
        {
            let mut tail = d_v.slice_mut(s![n.., ..]);
            tail += &d_queries;
        }
        if let Some(dp) = grads.d_pre_decoder {
            d_v = d_v + &dp;
        }

        let text_dim = self.text.config().embed_dim;
        let mut d_t: Array2<F> = Array2::zeros((cache.text_len, text_dim));
        if let Some(dtp) = grads.d_text_pooled {
            let scale = F::from_f64(1.0 / cache.text_len as f64);
            for mut row in d_t.rows_mut() {
                row.zip_mut_with(&dtp, |a, b| *a = *a + *b * scale);
            }
        }

        for (stage, c) in self.stages.iter_mut().zip(cache.stages.iter()).rev() {
            let (dv, dt) = stage.backward(c, &d_v, &d_t);
            d_v = dv;
            d_t = dt;
        }

        let d_vs = d_v.slice(s![..n, ..]).to_owned();
        let d_vf = d_v.slice(s![n.., ..]).to_owned();
        let vis_grads = self.vision.backward(&cache.vision, &d_vs, &d_vf);
        self.text.backward(&cache.text, &d_t, None);

        Ok(InputGrads {
            start_image: unpatchify(&vis_grads.start_patches, &grid)?,
            goal_image: unpatchify(&vis_grads.goal_patches, &grid)?,
        })
    }
}

/// patchify without the finiteness check (gradients may legally be zero or
/// denormal; layout transform only).
fn patchify_grad<F: Real>(image: &Array3<F>, grid: &PatchGrid) -> Result<Array2<F>> {
    let p = grid.patch_size;
    if image.shape() != [grid.image_height, grid.image_width, 3] {
        return Err(Error::mismatch("gradient image shape does not match grid".to_string()));
    }
    let mut out = Array2::zeros((grid.token_count(), grid.patch_dim()));
    for t in 0..grid.token_count() {
        let (pr, pc) = grid.token_position(t);
        for dy in 0..p {
            for dx in 0..p {
                for c in 0..3 {
                    out[[t, (dy * p + dx) * 3 + c]] = image[[pr * p + dy, pc * p + dx, c]];
                }
            }
        }
    }
    Ok(out)
}

impl<F: Real> NnModule<F> for Model<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        self.vision.visit_params(&join(prefix, "vision"), f);
        self.text.visit_params(&join(prefix, "text"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params(&join(prefix, &format!("fusion.stages.{i}")), f);
        }
        self.decoder.visit_params(&join(prefix, "decoder"), f);
        self.goal_head.visit_params(&join(prefix, "goal_head"), f);
    }
}
