use crate::error::{Error, Result};
use crate::real::Real;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// Partition of an image into non-overlapping square patches. Token order is
/// row-major over the patch grid; within a patch, values are laid out
/// (dy, dx, channel) row-major, matching the goal head's output layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn new(image_height: usize, image_width: usize, patch_size: usize) -> Result<Self> {
        if image_height == 0 || image_width == 0 || patch_size == 0 {
            return Err(Error::invalid(format!(
                "patch grid dims must be positive, got {image_height}x{image_width} patch {patch_size}"
            )));
        }
        if image_height % patch_size != 0 || image_width % patch_size != 0 {
            return Err(Error::invalid(format!(
                "image {image_height}x{image_width} is not a multiple of patch size {patch_size}"
            )));
        }
        Ok(PatchGrid { image_height, image_width, patch_size })
    }

    pub fn tokens_high(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn tokens_wide(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn token_count(&self) -> usize {
        self.tokens_high() * self.tokens_wide()
    }

    /// Flattened per-patch dimensionality (patch_size^2 * 3 channels).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// (row, col) of a token in the patch grid.
    pub fn token_position(&self, token: usize) -> (usize, usize) {
        (token / self.tokens_wide(), token % self.tokens_wide())
    }
}

fn check_image_shape<F: Real>(image: &Array3<F>, grid: &PatchGrid) -> Result<()> {
    let shape = image.shape();
    if shape != [grid.image_height, grid.image_width, 3] {
        return Err(Error::mismatch(format!(
            "image shape {:?} does not match grid {}x{}x3",
            shape, grid.image_height, grid.image_width
        )));
    }
    Ok(())
}

/// Splits an image [H, W, 3] into patch rows [N, P*P*3].
pub fn patchify<F: Real>(image: &Array3<F>, grid: &PatchGrid) -> Result<Array2<F>> {
    check_image_shape(image, grid)?;
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("patchify input contains non-finite values".to_string()));
    }
    let p = grid.patch_size;
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

/// Inverse of `patchify`: reassembles patch rows [N, P*P*3] into [H, W, 3].
pub fn unpatchify<F: Real>(patches: &Array2<F>, grid: &PatchGrid) -> Result<Array3<F>> {
    let shape = patches.shape();
    if shape != [grid.token_count(), grid.patch_dim()] {
        return Err(Error::mismatch(format!(
            "patch array shape {:?} does not match grid ({} tokens, {} per patch)",
            shape,
            grid.token_count(),
            grid.patch_dim()
        )));
    }
    let p = grid.patch_size;
    let mut out = Array3::zeros((grid.image_height, grid.image_width, 3));
    for t in 0..grid.token_count() {
        let (pr, pc) = grid.token_position(t);
        for dy in 0..p {
            for dx in 0..p {
                for c in 0..3 {
                    out[[pr * p + dy, pc * p + dx, c]] = patches[[t, (dy * p + dx) * 3 + c]];
                }
            }
        }
    }
    Ok(out)
}
