//! Loss functions with analytic gradients.
//!
//! Every function returns the scalar loss in f64 together with the gradient
//! of the loss w.r.t. its prediction argument, shaped like that argument.

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::heads::{AffordanceMaps, BoundingBox, PixelPose, SE2Action, ACTION_DIM, ROTATION_BINS, ROTATION_BIN_DEG};
use crate::mask::MaskSpec;
use crate::real::Real;
use crate::training::LossScope;

/// Mean squared error between predicted and target goal patches.
///
/// `AllPatches` averages over every element; `MaskedOnly` averages over the
/// masked rows only and defines the loss of an empty mask as zero.
pub fn pretext_loss<F: Real>(
    pred: &Array2<F>,
    target: &Array2<F>,
    mask: &MaskSpec,
    scope: LossScope,
) -> Result<(f64, Array2<F>)> {
    if pred.dim() != target.dim() {
        return Err(Error::mismatch(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let (n, pd) = pred.dim();
    if mask.token_count() != n {
        return Err(Error::mismatch(format!(
            "mask covers {} tokens but prediction has {n} rows",
            mask.token_count()
        )));
    }
    let rows: Vec<usize> = match scope {
        LossScope::AllPatches => (0..n).collect(),
        LossScope::MaskedOnly => mask.masked_indices().to_vec(),
    };
    let mut grad = Array2::zeros((n, pd));
    if rows.is_empty() {
        return Ok((0.0, grad));
    }
    let count = (rows.len() * pd) as f64;
    let mut loss = 0.0;
    for &r in &rows {
        for c in 0..pd {
            let d = (pred[[r, c]] - target[[r, c]]).as_f64();
            loss += d * d;
            grad[[r, c]] = F::from_f64(2.0 * d / count);
        }
    }
    loss /= count;
    if !loss.is_finite() {
        return Err(Error::numeric("pretext loss is not finite"));
    }
    Ok((loss, grad))
}

fn spatial_ce(logits: &[f64], target_idx: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &l in logits {
        z += (l - max).exp();
    }
    let lse = max + z.ln();
    let loss = lse - logits[target_idx];
    let mut grad: Vec<f64> = logits.iter().map(|l| ((l - max).exp()) / z).collect();
    grad[target_idx] -= 1.0;
    (loss, grad)
}

/// Cross entropy over spatial softmaxes: the pick map is one distribution
/// over H*W pixels, the place maps one distribution over bins*H*W cells.
/// Returns (loss, grad over pick map, grad over place maps).
pub fn affordance_loss<F: Real>(
    maps: &AffordanceMaps<F>,
    target: &SE2Action,
) -> Result<(f64, Array2<F>, Array3<F>)> {
    let (h, w) = maps.pick.dim();
    let (bins, ph, pw) = maps.place.dim();
    if bins != ROTATION_BINS || ph != h || pw != w {
        return Err(Error::mismatch(format!(
            "place maps {:?} do not match pick map {:?}",
            maps.place.dim(),
            maps.pick.dim()
        )));
    }
    target.validate(h, w)?;

    let pick_logits: Vec<f64> = maps.pick.iter().map(|v| v.as_f64()).collect();
    let pick_idx = target.pick.u * w + target.pick.v;
    let (pick_loss, pick_grad) = spatial_ce(&pick_logits, pick_idx);

    let place_logits: Vec<f64> = maps.place.iter().map(|v| v.as_f64()).collect();
    let bin = (target.place.theta_deg / ROTATION_BIN_DEG) as usize;
    let place_idx = bin * h * w + target.place.u * w + target.place.v;
    let (place_loss, place_grad) = spatial_ce(&place_logits, place_idx);

    let loss = pick_loss + place_loss;
    if !loss.is_finite() {
        return Err(Error::numeric("affordance loss is not finite"));
    }
    let g_pick = Array2::from_shape_vec((h, w), pick_grad.into_iter().map(F::from_f64).collect())
        .expect("shape matches");
    let g_place = Array3::from_shape_vec(
        (bins, h, w),
        place_grad.into_iter().map(F::from_f64).collect(),
    )
    .expect("shape matches");
    Ok((loss, g_pick, g_place))
}

/// Continuous regression target for a scripted action: normalized pick and
/// place coordinates, rotation encoded as (sin, cos), and a grasp-engaged
/// flag. The scripted gripper always grasps, so the flag is 1.
pub fn action_target(action: &SE2Action, height: usize, width: usize) -> [f64; ACTION_DIM] {
    let enc = |p: &PixelPose| {
        let t = (p.theta_deg as f64).to_radians();
        [
            p.u as f64 / height as f64,
            p.v as f64 / width as f64,
            t.sin(),
            t.cos(),
        ]
    };
    let p = enc(&action.pick);
    let q = enc(&action.place);
    [p[0], p[1], p[2], p[3], q[0], q[1], q[2], q[3], 1.0]
}

/// Mean squared error over the action vector.
pub fn action_loss<F: Real>(pred: &Array1<F>, target: &[f64; ACTION_DIM]) -> Result<(f64, Array1<F>)> {
    if pred.len() != ACTION_DIM {
        return Err(Error::mismatch(format!(
            "action prediction has {} dims, expected {ACTION_DIM}",
            pred.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Array1::zeros(ACTION_DIM);
    for i in 0..ACTION_DIM {
        let d = pred[i].as_f64() - target[i];
        loss += d * d;
        grad[i] = F::from_f64(2.0 * d / ACTION_DIM as f64);
    }
    loss /= ACTION_DIM as f64;
    if !loss.is_finite() {
        return Err(Error::numeric("action loss is not finite"));
    }
    Ok((loss, grad))
}

struct IouParts {
    iou: f64,
    /// d(iou)/d(pred.x, pred.y, pred.w, pred.h)
    grad: [f64; 4],
}

fn iou_with_grad(p: &BoundingBox, g: &BoundingBox) -> IouParts {
    let ix0 = p.x.max(g.x);
    let ix1 = (p.x + p.w).min(g.x + g.w);
    let iy0 = p.y.max(g.y);
    let iy1 = (p.y + p.h).min(g.y + g.h);
    let iw = (ix1 - ix0).max(0.0);
    let ih = (iy1 - iy0).max(0.0);
    let inter = iw * ih;
    let union = p.w * p.h + g.w * g.h - inter;
    let iou = inter / union;

    // Indicator subgradients; ties resolve to zero.
    let dx0_dpx = if p.x > g.x { 1.0 } else { 0.0 };
    let dx1_dpx = if p.x + p.w < g.x + g.w { 1.0 } else { 0.0 };
    let dy0_dpy = if p.y > g.y { 1.0 } else { 0.0 };
    let dy1_dpy = if p.y + p.h < g.y + g.h { 1.0 } else { 0.0 };
    let (diw_dpx, diw_dpw) = if iw > 0.0 { (dx1_dpx - dx0_dpx, dx1_dpx) } else { (0.0, 0.0) };
    let (dih_dpy, dih_dph) = if ih > 0.0 { (dy1_dpy - dy0_dpy, dy1_dpy) } else { (0.0, 0.0) };

    let dinter = [ih * diw_dpx, iw * dih_dpy, ih * diw_dpw, iw * dih_dph];
    let dunion = [
        -dinter[0],
        -dinter[1],
        p.h - dinter[2],
        p.w - dinter[3],
    ];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = (dinter[k] * union - inter * dunion[k]) / (union * union);
    }
    IouParts { iou, grad }
}

/// L1 plus IoU loss for box regression: `sum |pred - gt| + (1 - IoU)`.
/// Returns the gradient w.r.t. the predicted (x, y, w, h).
pub fn bbox_loss(pred: &BoundingBox, gt: &BoundingBox) -> Result<(f64, [f64; 4])> {
    pred.validate()?;
    gt.validate()?;
    let dp = [pred.x - gt.x, pred.y - gt.y, pred.w - gt.w, pred.h - gt.h];
    let l1: f64 = dp.iter().map(|d| d.abs()).sum();
    let parts = iou_with_grad(pred, gt);
    let loss = l1 + 1.0 - parts.iou;
    if !loss.is_finite() {
        return Err(Error::numeric("bbox loss is not finite"));
    }
    let mut grad = [0.0; 4];
    for k in 0..4 {
        // |x| subgradient, zero at the kink.
        let sign = if dp[k] == 0.0 { 0.0 } else { dp[k].signum() };
        grad[k] = sign - parts.grad[k];
    }
    Ok((loss, grad))
}
