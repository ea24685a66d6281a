use crate::error::{Error, Result};
use crate::grid::PatchGrid;
use crate::real::Real;
use ndarray::Array2;

/// Fixed 2D sinusoidal positional encoding over the patch grid. Half the
/// embedding encodes the token row, half the column; each half interleaves
/// sin/cos at geometrically spaced frequencies. Not trainable.
pub fn sincos_2d<F: Real>(grid: &PatchGrid, dim: usize) -> Result<Array2<F>> {
    if dim % 4 != 0 {
        return Err(Error::invalid(format!(
            "2d sinusoidal encoding needs dim divisible by 4, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Array2::zeros((grid.token_count(), dim));
    for t in 0..grid.token_count() {
        let (row, col) = grid.token_position(t);
        fill_1d(out.row_mut(t).slice_mut(ndarray::s![..half]).as_slice_mut().unwrap(), row, half);
        fill_1d(out.row_mut(t).slice_mut(ndarray::s![half..]).as_slice_mut().unwrap(), col, half);
    }
    Ok(out)
}

fn fill_1d<F: Real>(out: &mut [F], pos: usize, dim: usize) {
    let pairs = dim / 2;
    for i in 0..pairs {
        let omega = 1.0 / 10000f64.powf(i as f64 / pairs as f64);
        let angle = pos as f64 * omega;
        out[2 * i] = F::from_f64(angle.sin());
        out[2 * i + 1] = F::from_f64(angle.cos());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_positions_distinct_codes() {
        let grid = PatchGrid::new(16, 16, 2).unwrap();
        let pe = sincos_2d::<f64>(&grid, 16).unwrap();
        for a in 0..grid.token_count() {
            for b in (a + 1)..grid.token_count() {
                let diff: f64 = pe
                    .row(a)
                    .iter()
                    .zip(pe.row(b).iter())
                    .map(|(x, y)| (x - y).abs())
                    .sum();
                assert!(diff > 1e-6, "tokens {a} and {b} share a code");
            }
        }
    }

    // Oracle: recompute a handful of entries from the closed form.
    #[test]
    fn matches_closed_form() {
        let grid = PatchGrid::new(8, 8, 2).unwrap(); // 4x4 tokens
        let dim = 8; // halves of 4, 2 freq pairs each
        let pe = sincos_2d::<f64>(&grid, dim).unwrap();
        // token 6 -> row 1, col 2
        let t = 6;
        assert!((pe[[t, 0]] - (1.0f64).sin()).abs() < 1e-12); // row, freq 0 sin
        assert!((pe[[t, 1]] - (1.0f64).cos()).abs() < 1e-12);
        let w1 = 1.0 / 10000f64.powf(0.5);
        assert!((pe[[t, 2]] - (1.0 * w1).sin()).abs() < 1e-12);
        assert!((pe[[t, 4]] - (2.0f64).sin()).abs() < 1e-12); // col half
        assert!((pe[[t, 7]] - (2.0 * w1).cos()).abs() < 1e-12);
    }

    #[test]
    fn values_bounded_and_deterministic() {
        let grid = PatchGrid::new(64, 64, 8).unwrap();
        let a = sincos_2d::<f32>(&grid, 128).unwrap();
        let b = sincos_2d::<f32>(&grid, 128).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn rejects_odd_dim() {
        let grid = PatchGrid::new(8, 8, 2).unwrap();
        assert!(sincos_2d::<f64>(&grid, 18).is_err());
    }
}
