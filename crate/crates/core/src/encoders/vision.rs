use crate::error::{Error, Result};
use crate::grid::PatchGrid;
use crate::mask::MaskSpec;
use crate::nn::block::{BidirBlock, BidirBlockCache, Block, BlockCache};
use crate::nn::init;
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::norm::{LayerNorm, LayerNormCache};
use crate::nn::param::{join, NnModule, Param, ParamSlot};
use crate::real::Real;
use ndarray::{Array2, Ix1};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pos::sincos_2d;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Leading blocks that attend within each branch independently.
    pub depth_self: usize,
    /// Trailing blocks where the two branches cross-attend to each other.
    pub depth_bidir: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    /// Desk-scale default: 64x64 images, 8x8 patches, 64 tokens.
    pub fn desk() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 128,
            depth_self: 2,
            depth_bidir: 2,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }

    /// Published-scale preset (ViT-Base/16 on 224x224). Untrainable on this
    /// machine in reasonable time; exists so configs can express it.
    pub fn paper_scale() -> Self {
        EncoderConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            depth_self: 6,
            depth_bidir: 6,
            heads: 12,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::invalid("embed_dim must be divisible by 4 for 2d sincos codes"));
        }
        if self.depth_self == 0 || self.depth_bidir == 0 {
            return Err(Error::invalid("encoder depths must be >= 1"));
        }
        self.grid().map(|_| ())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_size, self.image_size, self.patch_size)
    }
}

/// Siamese two-branch ViT. Both branches run the SAME weights; the goal
/// branch may carry mask tokens. Mask tokens are inserted before the first
/// block and travel through the full encoder (they are never dropped), so
/// the fully-masked inference path is architecturally identical to training.
#[derive(Debug, Clone)]
pub struct VisionEncoder<F: Real> {
    pub patch_embed: Linear<F>,
    pub mask_token: Param<F, Ix1>,
    pub self_blocks: Vec<Block<F>>,
    pub bidir_blocks: Vec<BidirBlock<F>>,
    pub norm: LayerNorm<F>,
    pos: Array2<F>,
    grid: PatchGrid,
    cfg: EncoderConfig,
}

pub struct VisionCache<F: Real> {
    embed_s: LinearCache<F>,
    embed_f: LinearCache<F>,
    mask: MaskSpec,
    self_s: Vec<BlockCache<F>>,
    self_f: Vec<BlockCache<F>>,
    bidir: Vec<BidirBlockCache<F>>,
    norm_s: LayerNormCache<F>,
    norm_f: LayerNormCache<F>,
}

/// Gradients w.r.t. the two patchified inputs.
pub struct VisionInputGrads<F: Real> {
    pub start_patches: Array2<F>,
    pub goal_patches: Array2<F>,
}

impl<F: Real> VisionEncoder<F> {
    pub fn new(rng: &mut ChaCha8Rng, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let patch_embed = Linear::new(rng, grid.patch_dim(), cfg.embed_dim, true);
        let mask_token = Param::new(init::normal_vec(rng, cfg.embed_dim, 0.02));
        let mut self_blocks = Vec::with_capacity(cfg.depth_self);
        for _ in 0..cfg.depth_self {
            self_blocks.push(Block::new(rng, cfg.embed_dim, cfg.heads, cfg.mlp_ratio)?);
        }
        let mut bidir_blocks = Vec::with_capacity(cfg.depth_bidir);
        for _ in 0..cfg.depth_bidir {
            bidir_blocks.push(BidirBlock::new(rng, cfg.embed_dim, cfg.heads, cfg.mlp_ratio)?);
        }
        let norm = LayerNorm::new(cfg.embed_dim);
        let pos = sincos_2d(&grid, cfg.embed_dim)?;
        Ok(VisionEncoder { patch_embed, mask_token, self_blocks, bidir_blocks, norm, pos, grid, cfg })
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn config(&self) -> EncoderConfig {
        self.cfg
    }

    pub fn positional(&self) -> &Array2<F> {
        &self.pos
    }

    /// Encodes (start, goal) patch rows with the goal branch masked.
    /// Returns per-branch token features [N, D].
    pub fn forward(
        &self,
        start_patches: &Array2<F>,
        goal_patches: &Array2<F>,
        mask: &MaskSpec,
    ) -> Result<(Array2<F>, Array2<F>, VisionCache<F>)> {
        let n = self.grid.token_count();
        if start_patches.shape() != [n, self.grid.patch_dim()]
            || goal_patches.shape() != [n, self.grid.patch_dim()]
        {
            return Err(Error::mismatch(format!(
                "patch inputs must be [{n}, {}], got {:?} and {:?}",
                self.grid.patch_dim(),
                start_patches.shape(),
                goal_patches.shape()
            )));
        }
        if mask.token_count() != n {
            return Err(Error::mismatch(format!(
                "mask covers {} tokens, grid has {n}",
                mask.token_count()
            )));
        }

        let (es, embed_s) = self.patch_embed.forward(start_patches);
        let (ef, embed_f) = self.patch_embed.forward(goal_patches);
        let mut xs = es + &self.pos;
        let mut xf = ef + &self.pos;
        // Masked rows are wholly replaced: token content cannot leak.
        for &i in mask.masked_indices() {
            let replacement = &self.mask_token.value + &self.pos.row(i);
            xf.row_mut(i).assign(&replacement);
        }

        let mut self_s = Vec::with_capacity(self.self_blocks.len());
        let mut self_f = Vec::with_capacity(self.self_blocks.len());
        for b in &self.self_blocks {
            let (ys, cs) = b.forward(&xs);
            let (yf, cf) = b.forward(&xf);
            xs = ys;
            xf = yf;
            self_s.push(cs);
            self_f.push(cf);
        }
        let mut bidir = Vec::with_capacity(self.bidir_blocks.len());
        for b in &self.bidir_blocks {
            let (ys, yf, c) = b.forward(&xs, &xf);
            xs = ys;
            xf = yf;
            bidir.push(c);
        }
        let (vs, norm_s) = self.norm.forward(&xs);
        let (vf, norm_f) = self.norm.forward(&xf);
        Ok((vs, vf, VisionCache {
            embed_s,
            embed_f,
            mask: mask.clone(),
            self_s,
            self_f,
            bidir,
            norm_s,
            norm_f,
        }))
    }

    /// Accumulates parameter grads; returns grads w.r.t. both patch inputs.
    /// Masked goal rows get exactly zero gradient (their pixels never enter
    /// the forward pass).
    pub fn backward(
        &mut self,
        cache: &VisionCache<F>,
        gvs: &Array2<F>,
        gvf: &Array2<F>,
    ) -> VisionInputGrads<F> {
        let mut gs = self.norm.backward(&cache.norm_s, gvs);
        let mut gf = self.norm.backward(&cache.norm_f, gvf);
        for (b, c) in self.bidir_blocks.iter_mut().zip(cache.bidir.iter()).rev() {
            let (ns, nf) = b.backward(c, &gs, &gf);
            gs = ns;
            gf = nf;
        }
        for (b, (cs, cf)) in self
            .self_blocks
            .iter_mut()
            .zip(cache.self_s.iter().zip(cache.self_f.iter()))
            .rev()
        {
            gs = b.backward(cs, &gs);
            gf = b.backward(cf, &gf);
        }
        // Masked rows feed the mask token, not the goal patch embedding.
        for &i in cache.mask.masked_indices() {
            let row = gf.row(i).to_owned();
            self.mask_token.grad = &self.mask_token.grad + &row;
            gf.row_mut(i).fill(F::zero());
        }
        let g_start = self.patch_embed.backward(&cache.embed_s, &gs);
        let g_goal = self.patch_embed.backward(&cache.embed_f, &gf);
        VisionInputGrads { start_patches: g_start, goal_patches: g_goal }
    }
}

impl<F: Real> NnModule<F> for VisionEncoder<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        self.patch_embed.visit_params(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "mask_token"), &mut self.mask_token);
        for (i, b) in self.self_blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("self_blocks.{i}")), f);
        }
        for (i, b) in self.bidir_blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("bidir_blocks.{i}")), f);
        }
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}
