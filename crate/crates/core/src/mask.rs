use crate::error::{Error, Result};
use crate::grid::PatchGrid;
use crate::rng::rng_from_seed;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which goal-image tokens are replaced by the learned mask token. Masking is
/// asymmetric: only the goal branch is ever masked, the input branch and text
/// always stay complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    token_count: usize,
    ratio: f64,
    seed: u64,
    /// Sorted, unique token indices.
    masked: Vec<usize>,
}

/// Number of masked tokens: round-half-up of ratio * token_count.
pub fn masked_count(ratio: f64, token_count: usize) -> usize {
    (ratio * token_count as f64 + 0.5).floor() as usize
}

/// Samples a uniform subset of `masked_count(ratio, N)` token indices.
/// Same (grid, ratio, seed) always yields the same subset.
pub fn sample_mask(grid: &PatchGrid, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&ratio) || !ratio.is_finite() {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let n = grid.token_count();
    let k = masked_count(ratio, n);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(seed);
    // Partial Fisher-Yates: after i steps the prefix is a uniform k-subset.
    for i in 0..k {
        let j = rng.gen_range(i..n);
        indices.swap(i, j);
    }
    let mut masked = indices[..k].to_vec();
    masked.sort_unstable();
    Ok(MaskSpec { token_count: n, ratio, seed, masked })
}

impl MaskSpec {
    /// Mask covering every token (inference path: no goal image available).
    pub fn full(grid: &PatchGrid) -> Self {
        MaskSpec {
            token_count: grid.token_count(),
            ratio: 1.0,
            seed: 0,
            masked: (0..grid.token_count()).collect(),
        }
    }

    /// Empty mask (goal fully visible).
    pub fn none(grid: &PatchGrid) -> Self {
        MaskSpec { token_count: grid.token_count(), ratio: 0.0, seed: 0, masked: Vec::new() }
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn masked_indices(&self) -> &[usize] {
        &self.masked
    }

    pub fn masked_len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_masked(&self, token: usize) -> bool {
        self.masked.binary_search(&token).is_ok()
    }

    pub fn is_full(&self) -> bool {
        self.masked.len() == self.token_count
    }
}
