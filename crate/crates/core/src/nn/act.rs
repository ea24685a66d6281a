use crate::real::Real;
use ndarray::{Array2, Array3};

/// Tanh-approximated GELU, matching the form used in ViT reference code.
pub fn gelu<F: Real>(x: &Array2<F>) -> Array2<F> {
    x.mapv(gelu_scalar)
}

fn gelu_scalar<F: Real>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

/// Elementwise d gelu(x)/dx evaluated at the cached input.
pub fn gelu_backward<F: Real>(x: &Array2<F>, gout: &Array2<F>) -> Array2<F> {
    let mut gin = x.mapv(gelu_grad_scalar);
    gin *= gout;
    gin
}

pub fn relu3<F: Real>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu3_backward<F: Real>(x: &Array3<F>, gout: &Array3<F>) -> Array3<F> {
    let mut gin = gout.clone();
    gin.zip_mut_with(x, |g, v| {
        if *v <= F::zero() {
            *g = F::zero();
        }
    });
    gin
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Row-wise softmax with max subtraction for stability.
pub fn softmax_rows<F: Real>(x: &Array2<F>) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backward through row-wise softmax: g_in = p .* (g_out - rowsum(g_out .* p)).
pub fn softmax_rows_backward<F: Real>(probs: &Array2<F>, gout: &Array2<F>) -> Array2<F> {
    let mut gin = Array2::zeros(probs.raw_dim());
    for i in 0..probs.shape()[0] {
        let p = probs.row(i);
        let g = gout.row(i);
        let dot = p.iter().zip(g.iter()).map(|(a, b)| *a * *b).fold(F::zero(), |a, b| a + b);
        for j in 0..probs.shape()[1] {
            gin[[i, j]] = p[j] * (g[j] - dot);
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_matches_finite_difference() {
        let xs = array![[-2.0f64, -0.5, 0.0, 0.3, 1.7]];
        let g = gelu_backward(&xs, &Array2::from_elem((1, 5), 1.0));
        let eps = 1e-6;
        for j in 0..5 {
            let mut hi = xs.clone();
            hi[[0, j]] += eps;
            let mut lo = xs.clone();
            lo[[0, j]] -= eps;
            let fd = (gelu(&hi)[[0, j]] - gelu(&lo)[[0, j]]) / (2.0 * eps);
            assert!((fd - g[[0, j]]).abs() < 1e-8, "j={j} fd={fd} an={}", g[[0, j]]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = array![[1.0f64, 2.0, 3.0], [1000.0, 1000.0, 1000.0]];
        let p = softmax_rows(&x);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((p[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }
}
