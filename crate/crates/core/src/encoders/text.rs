use crate::error::{Error, Result};
use crate::nn::block::{Block, BlockCache};
use crate::nn::init;
use crate::nn::norm::{LayerNorm, LayerNormCache};
use crate::nn::param::{join, NnModule, Param, ParamSlot};
use crate::real::Real;
use ndarray::{Array1, Array2, Axis, Ix2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;

pub const UNK: &str = "<unk>";

/// Closed token inventory. Instructions come from templates, so the
/// vocabulary is small and written as a sidecar file next to checkpoints
/// (one token per line, line index = id). Index 0 is always `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercases and splits on any non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

impl Vocabulary {
    /// Builds from raw strings: tokenize everything, dedup, sort for a
    /// stable id assignment, prepend `<unk>`.
    pub fn from_corpus<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut set: Vec<String> = texts
            .iter()
            .flat_map(|t| tokenize(t.as_ref()))
            .collect();
        set.sort_unstable();
        set.dedup();
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(set.into_iter().filter(|t| t != UNK));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Content hash identifying this vocabulary in checkpoints.
    pub fn id(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        let mut s = String::with_capacity(16);
        for b in &digest[..8] {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    /// Token ids for an instruction; unknown words map to `<unk>`, output is
    /// truncated to `max_len`. Empty instructions are an error.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        let words = tokenize(text);
        if words.is_empty() {
            return Err(Error::invalid("instruction is empty after tokenization"));
        }
        Ok(words
            .iter()
            .take(max_len)
            .map(|w| self.index.get(w).copied().unwrap_or(0))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens.join("\n") + "\n";
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let tokens: Vec<String> = body.lines().map(str::to_string).collect();
        if tokens.is_empty() || tokens[0] != UNK {
            return Err(Error::corrupt(
                path.display().to_string(),
                format!("vocabulary must start with {UNK}"),
            ));
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub max_len: usize,
}

impl TextConfig {
    pub fn desk() -> Self {
        TextConfig { embed_dim: 64, depth: 1, heads: 4, mlp_ratio: 4.0, max_len: 12 }
    }

    pub fn paper_scale() -> Self {
        TextConfig { embed_dim: 512, depth: 4, heads: 8, mlp_ratio: 4.0, max_len: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "text embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.max_len == 0 {
            return Err(Error::invalid("text depth and max_len must be >= 1"));
        }
        Ok(())
    }
}

/// Per-instruction embedding: one row per token plus a mean-pooled summary.
#[derive(Debug, Clone)]
pub struct TextEmbedding<F: Real> {
    pub tokens: Array2<F>,
    pub pooled: Array1<F>,
}

/// Small trainable transformer over the template vocabulary. Learned
/// positional embeddings (sequences are short and never padded).
#[derive(Debug, Clone)]
pub struct TextEncoder<F: Real> {
    pub tok_embed: Param<F, Ix2>,
    pub pos_embed: Param<F, Ix2>,
    pub blocks: Vec<Block<F>>,
    pub norm: LayerNorm<F>,
    cfg: TextConfig,
    vocab_size: usize,
}

pub struct TextCache<F: Real> {
    ids: Vec<usize>,
    blocks: Vec<BlockCache<F>>,
    norm: LayerNormCache<F>,
}

impl<F: Real> TextEncoder<F> {
    pub fn new(rng: &mut ChaCha8Rng, cfg: TextConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        if vocab_size == 0 {
            return Err(Error::invalid("vocabulary is empty"));
        }
        let tok_embed = Param::new(init::normal(rng, vocab_size, cfg.embed_dim, 0.02));
        let pos_embed = Param::new(init::normal(rng, cfg.max_len, cfg.embed_dim, 0.02));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            blocks.push(Block::new(rng, cfg.embed_dim, cfg.heads, cfg.mlp_ratio)?);
        }
        Ok(TextEncoder { tok_embed, pos_embed, blocks, norm: LayerNorm::new(cfg.embed_dim), cfg, vocab_size })
    }

    pub fn config(&self) -> TextConfig {
        self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn forward(&self, ids: &[usize]) -> Result<(TextEmbedding<F>, TextCache<F>)> {
        if ids.is_empty() {
            return Err(Error::invalid("text encoder got an empty id sequence"));
        }
        if ids.len() > self.cfg.max_len {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_len {}",
                ids.len(),
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} out of range for vocab of {}",
                self.vocab_size
            )));
        }
        let l = ids.len();
        let d = self.cfg.embed_dim;
        let mut x = Array2::zeros((l, d));
        for (r, &id) in ids.iter().enumerate() {
            let row = &self.tok_embed.value.row(id) + &self.pos_embed.value.row(r);
            x.row_mut(r).assign(&row);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x);
            x = y;
            caches.push(c);
        }
        let (y, norm_cache) = self.norm.forward(&x);
        let pooled = y.sum_axis(Axis(0)) * F::from_f64(1.0 / l as f64);
        Ok((
            TextEmbedding { tokens: y, pooled },
            TextCache { ids: ids.to_vec(), blocks: caches, norm: norm_cache },
        ))
    }

    /// Accumulates grads from the per-token stream and optionally the pooled
    /// summary (the pooled path is only used by the bounding-box head).
    pub fn backward(
        &mut self,
        cache: &TextCache<F>,
        g_tokens: &Array2<F>,
        g_pooled: Option<&Array1<F>>,
    ) {
        let l = cache.ids.len();
        let mut g = g_tokens.clone();
        if let Some(gp) = g_pooled {
            let scale = F::from_f64(1.0 / l as f64);
            for mut row in g.rows_mut() {
                row.zip_mut_with(gp, |a, b| *a = *a + *b * scale);
            }
        }
        let mut g = self.norm.backward(&cache.norm, &g);
        for (b, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            g = b.backward(c, &g);
        }
        for (r, &id) in cache.ids.iter().enumerate() {
            let grow = g.row(r);
            let mut t = self.tok_embed.grad.row_mut(id);
            t += &grow;
            let mut p = self.pos_embed.grad.row_mut(r);
            p += &grow;
        }
    }
}

impl<F: Real> NnModule<F> for TextEncoder<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        f(&join(prefix, "tok_embed"), &mut self.tok_embed);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}
