//! Axis-aligned workspace partitioning.
//!
//! A scene is laid out by recursively splitting the workspace rectangle into
//! disjoint leaf regions (a KD tree). Intervals are half-open, so the leaves
//! tile the workspace exactly: every point belongs to exactly one leaf.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Half-open rectangle `[x0, x1) x [y0, y1)` in world units.
///
/// `x` is the column axis, `y` the row axis (image convention, y grows
/// downward).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Rect> {
        let r = Rect { x0, y0, x1, y1 };
        if !(r.x0.is_finite() && r.y0.is_finite() && r.x1.is_finite() && r.y1.is_finite()) {
            return Err(Error::invalid("rect coordinates must be finite"));
        }
        if r.x1 <= r.x0 || r.y1 <= r.y0 {
            return Err(Error::invalid(format!(
                "rect must have positive extent, got [{}, {}) x [{}, {})",
                r.x0, r.x1, r.y0, r.y1
            )));
        }
        Ok(r)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Smaller of width and height.
    pub fn min_side(&self) -> f64 {
        self.width().min(self.height())
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) * 0.5, (self.y0 + self.y1) * 0.5)
    }

    /// Half-open containment test.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Rectangle inset by `m` on every side. Collapses are reported as errors.
    pub fn shrink(&self, m: f64) -> Result<Rect> {
        Rect::new(self.x0 + m, self.y0 + m, self.x1 - m, self.y1 - m)
    }
}

/// Leaf of the partition tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Region {
    pub bounds: Rect,
    /// Number of splits above this leaf.
    pub depth: usize,
}

/// Fraction band of the parent extent inside which split points are sampled.
/// Keeps leaves from degenerating into slivers.
const SPLIT_BAND: (f64, f64) = (0.35, 0.65);

fn sample_split<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    let mut s = [0.0f64; 3];
    for v in s.iter_mut() {
        let u: f64 = rng.gen();
        *v = lo + w * (SPLIT_BAND.0 + (SPLIT_BAND.1 - SPLIT_BAND.0) * u);
    }
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s[1]
}

/// Splits `workspace` into `n_regions` disjoint leaves.
///
/// The largest-area leaf is split repeatedly; the split axis alternates with
/// depth (even depth splits along x) and the split point is the median of
/// three uniform draws from the middle band of the extent. Children share the
/// split coordinate, so the union of leaves is exactly the workspace.
pub fn partition_regions(workspace: Rect, n_regions: usize, seed: u64) -> Result<Vec<Region>> {
    if n_regions == 0 {
        return Err(Error::invalid("n_regions must be at least 1"));
    }
    if workspace.min_side() < 2.0 {
        return Err(Error::invalid("workspace too small to partition"));
    }
    let mut rng = rng_from_seed(derive_seed(seed, 0x5245_4749_4f4e_53));
    let mut leaves = vec![Region { bounds: workspace, depth: 0 }];
    while leaves.len() < n_regions {
        // Largest area first; ties resolve to the earliest leaf.
        let mut best = 0;
        for (i, leaf) in leaves.iter().enumerate() {
            if leaf.bounds.area() > leaves[best].bounds.area() {
                best = i;
            }
        }
        let Region { bounds, depth } = leaves[best].clone();
        let (a, b) = if depth % 2 == 0 {
            let m = sample_split(&mut rng, bounds.x0, bounds.x1);
            (
                Rect { x1: m, ..bounds },
                Rect { x0: m, ..bounds },
            )
        } else {
            let m = sample_split(&mut rng, bounds.y0, bounds.y1);
            (
                Rect { y1: m, ..bounds },
                Rect { y0: m, ..bounds },
            )
        };
        leaves[best] = Region { bounds: a, depth: depth + 1 };
        leaves.insert(best + 1, Region { bounds: b, depth: depth + 1 });
    }
    Ok(leaves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ws() -> Rect {
        Rect::new(0.0, 0.0, 64.0, 64.0).unwrap()
    }

    #[test]
    fn partition_leaf_count_and_area() {
        for n in [1, 2, 5, 8, 13] {
            let leaves = partition_regions(ws(), n, 7).unwrap();
            assert_eq!(leaves.len(), n);
            let total: f64 = leaves.iter().map(|l| l.bounds.area()).sum();
            assert!((total - 64.0 * 64.0).abs() < 1e-9, "area sum {total}");
        }
    }

    #[test]
    fn partition_tiles_exactly() {
        // Every probe point must land in exactly one half-open leaf.
        let leaves = partition_regions(ws(), 8, 42).unwrap();
        let mut rng = crate::rng::rng_from_seed(99);
        for _ in 0..1000 {
            let x: f64 = rng.gen::<f64>() * 64.0;
            let y: f64 = rng.gen::<f64>() * 64.0;
            let hits = leaves.iter().filter(|l| l.bounds.contains(x, y)).count();
            assert_eq!(hits, 1, "point ({x}, {y}) hit {hits} leaves");
        }
    }

    #[test]
    fn partition_is_deterministic() {
        let a = partition_regions(ws(), 8, 5).unwrap();
        let b = partition_regions(ws(), 8, 5).unwrap();
        for (l, r) in a.iter().zip(&b) {
            assert_eq!(l.bounds, r.bounds);
        }
        let c = partition_regions(ws(), 8, 6).unwrap();
        let same = a.iter().zip(&c).all(|(l, r)| l.bounds == r.bounds);
        assert!(!same, "different seeds should split differently");
    }

    #[test]
    fn partition_leaves_not_slivers() {
        // The band-limited split keeps every leaf usable for placement.
        for seed in 0..50 {
            let leaves = partition_regions(ws(), 8, seed).unwrap();
            for l in &leaves {
                assert!(l.bounds.min_side() >= 6.0, "seed {seed} leaf {:?}", l.bounds);
            }
        }
    }

    #[test]
    fn partition_rejects_zero_regions() {
        assert!(partition_regions(ws(), 0, 1).is_err());
    }

    #[test]
    fn rect_validation() {
        assert!(Rect::new(0.0, 0.0, 0.0, 4.0).is_err());
        assert!(Rect::new(0.0, 0.0, f64::NAN, 4.0).is_err());
        let r = Rect::new(1.0, 2.0, 5.0, 8.0).unwrap();
        assert_eq!(r.width(), 4.0);
        assert_eq!(r.height(), 6.0);
        assert_eq!(r.area(), 24.0);
        assert!(r.contains(1.0, 2.0));
        assert!(!r.contains(5.0, 2.0), "upper edge is exclusive");
        let s = r.shrink(1.0).unwrap();
        assert_eq!(s, Rect::new(2.0, 3.0, 4.0, 7.0).unwrap());
        assert!(r.shrink(3.0).is_err());
    }
}
