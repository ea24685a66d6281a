//! Task heads attached to the pretrained backbone.
//!
//! - Affordance: dense SE(2) pick/place maps from upsampled decoder tokens
//!   concatenated with the input image and the predicted goal image.
//! - Action: shallow MLP regressing a 9-DoF vector (7 joint offsets + 2
//!   gripper) from pooled pre-decoder features.
//! - Bounding box: shallow MLP over pooled pre-decoder features and pooled
//!   text, squashed so the box always stays inside the unit square.

use crate::error::{Error, Result};
use crate::grid::PatchGrid;
use crate::nn::act::{gelu, gelu_backward, relu3, relu3_backward, sigmoid};
use crate::nn::conv::{Conv1x1, Conv1x1Cache, Conv2d, ConvCache};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::param::{join, NnModule, ParamSlot};
use crate::real::Real;
use ndarray::{s, Array1, Array2, Array3, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ROTATION_BINS: usize = 36;
pub const ROTATION_BIN_DEG: u32 = 10;

/// Pixel-space pose: u is the image row, v the column, theta in degrees
/// counter-clockwise, always a multiple of 10 in [0, 360).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelPose {
    pub u: usize,
    pub v: usize,
    pub theta_deg: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SE2Action {
    pub pick: PixelPose,
    pub place: PixelPose,
}

impl SE2Action {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for (name, p) in [("pick", &self.pick), ("place", &self.place)] {
            if p.u >= height || p.v >= width {
                return Err(Error::invalid(format!(
                    "{name} pixel ({}, {}) outside {height}x{width}",
                    p.u, p.v
                )));
            }
            if p.theta_deg >= 360 || p.theta_deg % ROTATION_BIN_DEG != 0 {
                return Err(Error::invalid(format!(
                    "{name} theta {} not a multiple of {ROTATION_BIN_DEG} below 360",
                    p.theta_deg
                )));
            }
        }
        Ok(())
    }
}

/// Dense affordance logits: pick is one map over pixels, place is one map
/// per rotation bin.
#[derive(Debug, Clone)]
pub struct AffordanceMaps<F: Real> {
    pub pick: Array2<F>,
    pub place: Array3<F>,
}

impl<F: Real> AffordanceMaps<F> {
    /// Softmax over the whole pick plane and over the whole place stack, so
    /// each distribution sums to one. Argmax decoding is unchanged.
    pub fn normalized(&self) -> AffordanceMaps<F> {
        fn softmax_flat<F: Real>(vals: &mut [F]) {
            let max = vals.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in vals.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = F::one() / sum;
            for v in vals.iter_mut() {
                *v *= inv;
            }
        }
        let mut out = self.clone();
        softmax_flat(out.pick.as_slice_mut().expect("pick map is contiguous"));
        softmax_flat(out.place.as_slice_mut().expect("place stack is contiguous"));
        out
    }
}

/// Greedy decode: flattened-row-major argmax with lowest-index tie-break.
/// Pick rotation is fixed at 0 degrees (top-down grasp of the scripted
/// policy); place rotation is the winning bin times 10 degrees.
pub fn extract_se2<F: Real>(maps: &AffordanceMaps<F>) -> SE2Action {
    let (h, w) = (maps.pick.shape()[0], maps.pick.shape()[1]);
    let mut best = (0usize, F::neg_infinity());
    for (i, &val) in maps.pick.iter().enumerate() {
        if val > best.1 {
            best = (i, val);
        }
    }
    let pick = PixelPose { u: best.0 / w, v: best.0 % w, theta_deg: 0 };

    debug_assert_eq!(maps.place.shape()[0], ROTATION_BINS);
    let mut best = (0usize, F::neg_infinity());
    for (i, &val) in maps.place.iter().enumerate() {
        if val > best.1 {
            best = (i, val);
        }
    }
    let per_map = h * w;
    let bin = best.0 / per_map;
    let rem = best.0 % per_map;
    let place = PixelPose {
        u: rem / w,
        v: rem % w,
        theta_deg: bin as u32 * ROTATION_BIN_DEG,
    };
    SE2Action { pick, place }
}

/// Nearest-neighbor upsampling of per-token features [N, D] to a dense
/// [D, H, W] plane over the patch grid.
pub fn upsample_tokens<F: Real>(h: &Array2<F>, grid: &PatchGrid) -> Array3<F> {
    let d = h.shape()[1];
    let p = grid.patch_size;
    let mut out = Array3::zeros((d, grid.image_height, grid.image_width));
    for t in 0..grid.token_count() {
        let (pr, pc) = grid.token_position(t);
        for c in 0..d {
            let val = h[[t, c]];
            for dy in 0..p {
                for dx in 0..p {
                    out[[c, pr * p + dy, pc * p + dx]] = val;
                }
            }
        }
    }
    out
}

fn upsample_tokens_backward<F: Real>(gout: &Array3<F>, grid: &PatchGrid, n: usize) -> Array2<F> {
    let d = gout.shape()[0];
    let p = grid.patch_size;
    let mut g = Array2::zeros((n, d));
    for t in 0..n {
        let (pr, pc) = grid.token_position(t);
        for c in 0..d {
            let mut acc = F::zero();
            for dy in 0..p {
                for dx in 0..p {
                    acc = acc + gout[[c, pr * p + dy, pc * p + dx]];
                }
            }
            g[[t, c]] = acc;
        }
    }
    g
}

fn hwc_to_chw<F: Real>(img: &Array3<F>) -> Array3<F> {
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[ch, y, x]] = img[[y, x, ch]];
            }
        }
    }
    out
}

fn chw_to_hwc<F: Real>(img: &Array3<F>) -> Array3<F> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[y, x, ch]] = img[[ch, y, x]];
            }
        }
    }
    out
}

/// Four 3x3 convs (widths 64, 64, 64, 1 + 36) over the concatenation of
/// upsampled decoder tokens, the input image, and the predicted goal image,
/// with a 1x1-projected skip from the concatenated input to the last conv.
#[derive(Debug, Clone)]
pub struct AffordanceHead<F: Real> {
    pub conv1: Conv2d<F>,
    pub conv2: Conv2d<F>,
    pub conv3: Conv2d<F>,
    pub skip: Conv1x1<F>,
    pub conv4: Conv2d<F>,
    grid: PatchGrid,
    token_dim: usize,
}

pub struct AffordanceCache<F: Real> {
    c1: ConvCache<F>,
    c2: ConvCache<F>,
    c3: ConvCache<F>,
    cskip: Conv1x1Cache<F>,
    c4: ConvCache<F>,
    pre1: Array3<F>,
    pre2: Array3<F>,
    pre3: Array3<F>,
}

impl<F: Real> AffordanceHead<F> {
    pub const WIDTH: usize = 64;

    pub fn new(rng: &mut ChaCha8Rng, token_dim: usize, grid: PatchGrid) -> Self {
        let cin = token_dim + 6;
        let w = Self::WIDTH;
        AffordanceHead {
            conv1: Conv2d::new(rng, cin, w, 3),
            conv2: Conv2d::new(rng, w, w, 3),
            conv3: Conv2d::new(rng, w, w, 3),
            skip: Conv1x1::new(rng, cin, w),
            conv4: Conv2d::new(rng, w, 1 + ROTATION_BINS, 3),
            grid,
            token_dim,
        }
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    fn assemble_input(
        &self,
        h: &Array2<F>,
        start: &Array3<F>,
        goal_pred: &Array3<F>,
    ) -> Result<Array3<F>> {
        if h.shape() != [self.grid.token_count(), self.token_dim] {
            return Err(Error::mismatch(format!(
                "affordance head expects h [{}, {}], got {:?}",
                self.grid.token_count(),
                self.token_dim,
                h.shape()
            )));
        }
        let (ih, iw) = (self.grid.image_height, self.grid.image_width);
        if start.shape() != [ih, iw, 3] || goal_pred.shape() != [ih, iw, 3] {
            return Err(Error::mismatch("affordance head image shapes do not match grid"));
        }
        let up = upsample_tokens(h, &self.grid);
        let mut input = Array3::zeros((self.token_dim + 6, ih, iw));
        input.slice_mut(s![..self.token_dim, .., ..]).assign(&up);
        input
            .slice_mut(s![self.token_dim..self.token_dim + 3, .., ..])
            .assign(&hwc_to_chw(start));
        input
            .slice_mut(s![self.token_dim + 3.., .., ..])
            .assign(&hwc_to_chw(goal_pred));
        Ok(input)
    }

    pub fn forward(
        &self,
        h: &Array2<F>,
        start: &Array3<F>,
        goal_pred: &Array3<F>,
    ) -> Result<(AffordanceMaps<F>, AffordanceCache<F>)> {
        let input = self.assemble_input(h, start, goal_pred)?;
        let (pre1, c1) = self.conv1.forward(&input);
        let x1 = relu3(&pre1);
        let (pre2, c2) = self.conv2.forward(&x1);
        let x2 = relu3(&pre2);
        let (pre3, c3) = self.conv3.forward(&x2);
        let x3 = relu3(&pre3);
        let (skip, cskip) = self.skip.forward(&input);
        let fused = &x3 + &skip;
        let (out, c4) = self.conv4.forward(&fused);
        let pick = out.slice(s![0, .., ..]).to_owned();
        let place = out.slice(s![1.., .., ..]).to_owned();
        Ok((
            AffordanceMaps { pick, place },
            AffordanceCache { c1, c2, c3, cskip, c4, pre1, pre2, pre3 },
        ))
    }

    /// Returns (grad wrt h, grad wrt start image, grad wrt predicted goal
    /// image), both image grads in [H, W, 3].
    pub fn backward(
        &mut self,
        cache: &AffordanceCache<F>,
        g_pick: &Array2<F>,
        g_place: &Array3<F>,
    ) -> (Array2<F>, Array3<F>, Array3<F>) {
        let (ih, iw) = (self.grid.image_height, self.grid.image_width);
        let mut g_out = Array3::zeros((1 + ROTATION_BINS, ih, iw));
        g_out.slice_mut(s![0, .., ..]).assign(g_pick);
        g_out.slice_mut(s![1.., .., ..]).assign(g_place);

        let g_fused = self.conv4.backward(&cache.c4, &g_out);
        let g_input_skip = self.skip.backward(&cache.cskip, &g_fused);
        let g_pre3 = relu3_backward(&cache.pre3, &g_fused);
        let g_x2 = self.conv3.backward(&cache.c3, &g_pre3);
        let g_pre2 = relu3_backward(&cache.pre2, &g_x2);
        let g_x1 = self.conv2.backward(&cache.c2, &g_pre2);
        let g_pre1 = relu3_backward(&cache.pre1, &g_x1);
        let g_input_main = self.conv1.backward(&cache.c1, &g_pre1);
        let g_input = g_input_main + g_input_skip;

        let g_up = g_input.slice(s![..self.token_dim, .., ..]).to_owned();
        let g_h = upsample_tokens_backward(&g_up, &self.grid, self.grid.token_count());
        let g_start = chw_to_hwc(&g_input.slice(s![self.token_dim..self.token_dim + 3, .., ..]).to_owned());
        let g_goal = chw_to_hwc(&g_input.slice(s![self.token_dim + 3.., .., ..]).to_owned());
        (g_h, g_start, g_goal)
    }
}

impl<F: Real> NnModule<F> for AffordanceHead<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.conv3.visit_params(&join(prefix, "conv3"), f);
        self.skip.visit_params(&join(prefix, "skip"), f);
        self.conv4.visit_params(&join(prefix, "conv4"), f);
    }
}

pub const ACTION_DIM: usize = 9;

/// Shallow MLP over mean-pooled pre-decoder features.
#[derive(Debug, Clone)]
pub struct ActionHead<F: Real> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

pub struct ActionCache<F: Real> {
    c1: LinearCache<F>,
    pre: Array2<F>,
    c2: LinearCache<F>,
}

impl<F: Real> ActionHead<F> {
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, hidden: usize) -> Self {
        ActionHead {
            fc1: Linear::new(rng, in_dim, hidden, true),
            fc2: Linear::new(rng, hidden, ACTION_DIM, true),
        }
    }

    pub fn forward(&self, pooled: &Array1<F>) -> (Array1<F>, ActionCache<F>) {
        let x = pooled.clone().insert_axis(Axis(0));
        let (pre, c1) = self.fc1.forward(&x);
        let hidden = gelu(&pre);
        let (y, c2) = self.fc2.forward(&hidden);
        (y.row(0).to_owned(), ActionCache { c1, pre, c2 })
    }

    pub fn backward(&mut self, cache: &ActionCache<F>, g_out: &Array1<F>) -> Array1<F> {
        let g = g_out.clone().insert_axis(Axis(0));
        let gh = self.fc2.backward(&cache.c2, &g);
        let gpre = gelu_backward(&cache.pre, &gh);
        let gx = self.fc1.backward(&cache.c1, &gpre);
        gx.row(0).to_owned()
    }
}

impl<F: Real> NnModule<F> for ActionHead<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}

/// Axis-aligned box in normalized image coordinates; (x, y) is the top-left
/// corner. Construction guarantees containment in the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn validate(&self) -> Result<()> {
        let ok = self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= 1.0 + 1e-9
            && self.y + self.h <= 1.0 + 1e-9;
        if !ok {
            return Err(Error::invalid(format!("box {self:?} escapes the unit square")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    let inter = ix.max(0.0) * iy.max(0.0);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

const MIN_SIDE: f64 = 1e-3;

/// Referring-expression box head: concat(pooled vision, pooled text) ->
/// hidden -> 4 raw values squashed into a valid box.
#[derive(Debug, Clone)]
pub struct BboxHead<F: Real> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

pub struct BboxCache<F: Real> {
    c1: LinearCache<F>,
    pre: Array2<F>,
    c2: LinearCache<F>,
    raw: Array1<F>,
    vision_dim: usize,
}

impl<F: Real> BboxHead<F> {
    pub fn new(rng: &mut ChaCha8Rng, vision_dim: usize, text_dim: usize, hidden: usize) -> Self {
        BboxHead {
            fc1: Linear::new(rng, vision_dim + text_dim, hidden, true),
            fc2: Linear::new(rng, hidden, 4, true),
        }
    }

    /// Squash raw (a, b, c, d) into a box: sides are sigmoids bounded away
    /// from zero, corners scale the remaining room, so x+w <= 1 always.
    fn squash(raw: &Array1<F>) -> [F; 4] {
        let min_side = F::from_f64(MIN_SIDE);
        let one = F::one();
        let w = min_side + (one - min_side) * sigmoid(raw[2]);
        let h = min_side + (one - min_side) * sigmoid(raw[3]);
        let x = sigmoid(raw[0]) * (one - w);
        let y = sigmoid(raw[1]) * (one - h);
        [x, y, w, h]
    }

    pub fn forward(
        &self,
        pooled_vision: &Array1<F>,
        pooled_text: &Array1<F>,
    ) -> (BoundingBox, BboxCache<F>) {
        let vision_dim = pooled_vision.len();
        let mut joint = Array1::zeros(vision_dim + pooled_text.len());
        joint.slice_mut(s![..vision_dim]).assign(pooled_vision);
        joint.slice_mut(s![vision_dim..]).assign(pooled_text);
        let x = joint.insert_axis(Axis(0));
        let (pre, c1) = self.fc1.forward(&x);
        let hidden = gelu(&pre);
        let (y, c2) = self.fc2.forward(&hidden);
        let raw = y.row(0).to_owned();
        let [bx, by, bw, bh] = Self::squash(&raw);
        let bbox = BoundingBox {
            x: bx.as_f64(),
            y: by.as_f64(),
            w: bw.as_f64(),
            h: bh.as_f64(),
        };
        (bbox, BboxCache { c1, pre, c2, raw, vision_dim })
    }

    /// g_box is the loss gradient w.r.t. (x, y, w, h). Returns grads w.r.t.
    /// the two pooled inputs.
    pub fn backward(&mut self, cache: &BboxCache<F>, g_box: [F; 4]) -> (Array1<F>, Array1<F>) {
        let min_side = F::from_f64(MIN_SIDE);
        let one = F::one();
        let sa = sigmoid(cache.raw[0]);
        let sb = sigmoid(cache.raw[1]);
        let sc = sigmoid(cache.raw[2]);
        let sd = sigmoid(cache.raw[3]);
        let w = min_side + (one - min_side) * sc;
        let h = min_side + (one - min_side) * sd;
        // dw/dc and dh/dd.
        let dwdc = (one - min_side) * sc * (one - sc);
        let dhdd = (one - min_side) * sd * (one - sd);
        // x = sa*(1-w): dx/da = sa'(1-w); dx/dc = -sa*dwdc.
        let dxda = sa * (one - sa) * (one - w);
        let dydb = sb * (one - sb) * (one - h);
        let [gx, gy, gw, gh] = g_box;
        let mut g_raw = Array1::zeros(4);
        g_raw[0] = gx * dxda;
        g_raw[1] = gy * dydb;
        g_raw[2] = gw * dwdc - gx * sa * dwdc;
        g_raw[3] = gh * dhdd - gy * sb * dhdd;

        let g = g_raw.insert_axis(Axis(0));
        let ghid = self.fc2.backward(&cache.c2, &g);
        let gpre = gelu_backward(&cache.pre, &ghid);
        let gjoint = self.fc1.backward(&cache.c1, &gpre);
        let row = gjoint.row(0);
        (
            row.slice(s![..cache.vision_dim]).to_owned(),
            row.slice(s![cache.vision_dim..]).to_owned(),
        )
    }
}

impl<F: Real> NnModule<F> for BboxHead<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut dyn ParamSlot<F>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}
