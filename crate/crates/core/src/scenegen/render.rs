//! Deterministic rasterizer for tabletop scenes.
//!
//! Rendering is pure integer-pixel sampling at pixel centers with no
//! anti-aliasing, so a scene renders to identical bytes on every run and
//! platform. Coordinates follow image convention: `x` is the column, `y` the
//! row, `y` grows downward. Rotations are in degrees; a positive rotation
//! turns the orientation notch from "up" toward "+x".

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::scenegen::catalog::{ObjectSpec, ShapeKind, BACKGROUND_RGB};
use crate::scenegen::regions::Rect;

/// 8-bit RGB image, row-major interleaved. The canonical in-memory and
/// on-disk pixel format; model inputs are produced by [`ImageU8::to_array`]
/// so training on saved and freshly generated corpora is bit-identical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(height: usize, width: usize) -> ImageU8 {
        ImageU8 { height, width, data: vec![0; height * width * 3] }
    }

    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<ImageU8> {
        if data.len() != height * width * 3 {
            return Err(Error::mismatch(format!(
                "image buffer has {} bytes, expected {}",
                data.len(),
                height * width * 3
            )));
        }
        Ok(ImageU8 { height, width, data })
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Converts to a float array in [0, 1], shape `[H, W, 3]`.
    pub fn to_array<F: Real>(&self) -> Array3<F> {
        let mut out = Array3::zeros((self.height, self.width, 3));
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.get(y, x);
                for c in 0..3 {
                    out[[y, x, c]] = F::from_f64(px[c] as f64 / 255.0);
                }
            }
        }
        out
    }

    /// Quantizes a float array in [0, 1] to 8-bit, rounding to nearest.
    pub fn from_array<F: Real>(img: &Array3<F>) -> Result<ImageU8> {
        let (h, w, c) = img.dim();
        if c != 3 {
            return Err(Error::mismatch(format!("expected 3 channels, got {c}")));
        }
        let mut out = ImageU8::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let mut px = [0u8; 3];
                for ch in 0..3 {
                    let v = img[[y, x, ch]].as_f64();
                    if !v.is_finite() {
                        return Err(Error::numeric("non-finite pixel value"));
                    }
                    px[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                out.set(y, x, px);
            }
        }
        Ok(out)
    }
}

/// Destination zone: a colored rectangle on the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub rect: Rect,
    pub color_name: String,
    pub rgb: [f64; 3],
}

/// An object instance at a pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub object: ObjectSpec,
    /// Center, world units (pixels).
    pub x: f64,
    pub y: f64,
    /// Degrees, counter-rotated by the scripted place action.
    pub rot_deg: f64,
}

/// Full scene description; rendering is a pure function of this value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub zone: Zone,
    /// Painter order: later placements occlude earlier ones.
    pub placements: Vec<Placement>,
}

/// Unit direction of the orientation notch at `rot_deg`. Points up (negative
/// y) at zero rotation.
fn notch_dir(rot_deg: f64) -> (f64, f64) {
    let a = rot_deg.to_radians();
    (a.sin(), -a.cos())
}

/// Rotates an offset into the local (unrotated) frame of a shape.
fn to_local(dx: f64, dy: f64, rot_deg: f64) -> (f64, f64) {
    let a = rot_deg.to_radians();
    let (s, c) = (a.sin(), a.cos());
    (dx * c + dy * s, -dx * s + dy * c)
}

/// Inner radius of a ring as a fraction of the outer radius.
const RING_INNER: f64 = 0.55;

/// Membership test at a point, pixel-center sampling.
pub fn point_in_shape(shape: ShapeKind, cx: f64, cy: f64, diameter: f64, rot_deg: f64, px: f64, py: f64) -> bool {
    let r = diameter * 0.5;
    let (dx, dy) = (px - cx, py - cy);
    let d2 = dx * dx + dy * dy;
    match shape {
        ShapeKind::Disc => d2 <= r * r,
        ShapeKind::Ring => {
            let ri = RING_INNER * r;
            d2 <= r * r && d2 >= ri * ri
        }
        ShapeKind::Square => {
            // Circumradius r: the half-side is r / sqrt(2).
            let half = r / std::f64::consts::SQRT_2;
            let (lx, ly) = to_local(dx, dy, rot_deg);
            lx.abs() <= half + 1e-9 && ly.abs() <= half + 1e-9
        }
        ShapeKind::Triangle => {
            // Equilateral, circumradius r, vertex 0 on the notch axis.
            let (lx, ly) = to_local(dx, dy, rot_deg);
            let v = [
                (0.0, -r),
                (r * (120f64).to_radians().sin(), -r * (120f64).to_radians().cos()),
                (r * (240f64).to_radians().sin(), -r * (240f64).to_radians().cos()),
            ];
            let mut sign = 0.0f64;
            for k in 0..3 {
                let (ax, ay) = v[k];
                let (bx, by) = v[(k + 1) % 3];
                let cross = (bx - ax) * (ly - ay) - (by - ay) * (lx - ax);
                if cross.abs() <= 1e-9 {
                    continue;
                }
                if sign == 0.0 {
                    sign = cross.signum();
                } else if cross.signum() != sign {
                    return false;
                }
            }
            true
        }
    }
}

fn dist_to_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (vx, vy) = (bx - ax, by - ay);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - ax) * vx + (py - ay) * vy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (ax + t * vx, ay + t * vy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Radial span of the notch segment as fractions of the outer radius.
fn notch_span(shape: ShapeKind) -> (f64, f64) {
    match shape {
        // Keeps the mark on the annulus rather than the hole.
        ShapeKind::Ring => (0.62, 0.92),
        _ => (0.25, 0.80),
    }
}

const NOTCH_HALF_WIDTH: f64 = 0.9;
const NOTCH_RGB: [f64; 3] = [0.0, 0.0, 0.0];

fn point_on_notch(p: &Placement, px: f64, py: f64) -> bool {
    let r = p.object.diameter * 0.5;
    let (ux, uy) = notch_dir(p.rot_deg);
    let (lo, hi) = notch_span(p.object.shape);
    let (ax, ay) = (p.x + ux * lo * r, p.y + uy * lo * r);
    let (bx, by) = (p.x + ux * hi * r, p.y + uy * hi * r);
    dist_to_segment(px, py, ax, ay, bx, by) <= NOTCH_HALF_WIDTH
}

/// A grasp point guaranteed to lie on the object body: the center for solid
/// shapes, the middle of the annulus on the notch axis for rings.
pub fn grasp_point(p: &Placement) -> (f64, f64) {
    match p.object.shape {
        ShapeKind::Ring => {
            let r = p.object.diameter * 0.5;
            let mid = (RING_INNER + 1.0) * 0.5;
            let (ux, uy) = notch_dir(p.rot_deg);
            (p.x + ux * mid * r, p.y + uy * mid * r)
        }
        _ => (p.x, p.y),
    }
}

const ZONE_BORDER_FACTOR: f64 = 0.7;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders a scene to an 8-bit image: background, then the zone with a 1px
/// darker border, then objects in painter order with their notches.
pub fn render_scene(scene: &Scene) -> Result<ImageU8> {
    if scene.height == 0 || scene.width == 0 {
        return Err(Error::invalid("scene dimensions must be positive"));
    }
    for p in &scene.placements {
        p.object.validate()?;
    }
    let mut img = ImageU8::new(scene.height, scene.width);
    let bg = BACKGROUND_RGB.map(quantize);
    let zone_fill = scene.zone.rgb.map(quantize);
    let zone_border = scene.zone.rgb.map(|c| quantize(c * ZONE_BORDER_FACTOR));
    for yi in 0..scene.height {
        for xi in 0..scene.width {
            let (px, py) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let mut rgb = bg;
            if scene.zone.rect.contains(px, py) {
                let r = &scene.zone.rect;
                let edge = px < r.x0 + 1.0 || px >= r.x1 - 1.0 || py < r.y0 + 1.0 || py >= r.y1 - 1.0;
                rgb = if edge { zone_border } else { zone_fill };
            }
            for p in &scene.placements {
                if point_in_shape(p.object.shape, p.x, p.y, p.object.diameter, p.rot_deg, px, py) {
                    rgb = if point_on_notch(p, px, py) {
                        NOTCH_RGB.map(quantize)
                    } else {
                        p.object.rgb.map(quantize)
                    };
                }
            }
            img.set(yi, xi, rgb);
        }
    }
    Ok(img)
}

/// Union occupancy mask of the given placements, ignoring occlusion.
pub fn render_placements_mask(placements: &[Placement], height: usize, width: usize) -> Array2<bool> {
    let mut mask = Array2::from_elem((height, width), false);
    for yi in 0..height {
        for xi in 0..width {
            let (px, py) = (xi as f64 + 0.5, yi as f64 + 0.5);
            for p in placements {
                if point_in_shape(p.object.shape, p.x, p.y, p.object.diameter, p.rot_deg, px, py) {
                    mask[[yi, xi]] = true;
                    break;
                }
            }
        }
    }
    mask
}

/// Tight bounding box of true pixels, normalized to [0, 1] as (x, y, w, h).
/// Returns None for an empty mask.
pub fn mask_bbox(mask: &Array2<bool>) -> Option<[f64; 4]> {
    let (h, w) = mask.dim();
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                any = true;
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if !any {
        return None;
    }
    Some([
        x0 as f64 / w as f64,
        y0 as f64 / h as f64,
        (x1 - x0 + 1) as f64 / w as f64,
        (y1 - y0 + 1) as f64 / h as f64,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::catalog::Catalog;

    fn place(cat: &Catalog, id: &str, x: f64, y: f64, rot: f64) -> Placement {
        Placement { object: cat.instance(id).unwrap().clone(), x, y, rot_deg: rot }
    }

    fn test_zone() -> Zone {
        Zone {
            rect: Rect::new(4.0, 4.0, 24.0, 20.0).unwrap(),
            color_name: "gray".into(),
            rgb: [0.55, 0.55, 0.58],
        }
    }

    #[test]
    fn disc_mask_matches_area() {
        let cat = Catalog::desk();
        let p = place(&cat, "red_disc_large_bright", 32.0, 32.0, 0.0);
        let mask = render_placements_mask(&[p], 64, 64);
        let count = mask.iter().filter(|b| **b).count() as f64;
        let expect = std::f64::consts::PI * 7.5 * 7.5;
        assert!((count - expect).abs() / expect < 0.1, "disc area {count} vs {expect}");
    }

    #[test]
    fn ring_has_hole() {
        let cat = Catalog::desk();
        let p = place(&cat, "blue_ring_large_bright", 32.0, 32.0, 0.0);
        let mask = render_placements_mask(&[p], 64, 64);
        assert!(!mask[[31, 31]], "ring center must be empty");
        assert!(mask[[31 - 6, 31]], "annulus must be filled");
    }

    #[test]
    fn triangle_rotates_by_quarter_turns_exactly() {
        // mask@(rot+90) sampled at offset o equals mask@rot at R(-90) o.
        // With the center on the pixel grid corner both sides land on pixel
        // centers, so the masks correspond exactly.
        let cat = Catalog::desk();
        let p0 = place(&cat, "green_triangle_large_bright", 32.0, 32.0, 0.0);
        let p90 = place(&cat, "green_triangle_large_bright", 32.0, 32.0, 90.0);
        let m0 = render_placements_mask(&[p0], 64, 64);
        let m90 = render_placements_mask(&[p90], 64, 64);
        for y in 0..64usize {
            for x in 0..64usize {
                let (dx, dy) = (x as f64 + 0.5 - 32.0, y as f64 + 0.5 - 32.0);
                // R(-90): (dx, dy) -> (dy, -dx)
                let (rx, ry) = (dy, -dx);
                let (sx, sy) = (rx + 32.0 - 0.5, ry + 32.0 - 0.5);
                let (sxi, syi) = (sx.round() as i64, sy.round() as i64);
                if (0..64).contains(&sxi) && (0..64).contains(&syi) {
                    assert_eq!(
                        m90[[y, x]],
                        m0[[syi as usize, sxi as usize]],
                        "at ({y}, {x})"
                    );
                }
            }
        }
    }

    #[test]
    fn notch_distinguishes_rotations() {
        // The square mask is invariant under 180 degrees but the notch is not,
        // so rendered pixels must differ.
        let cat = Catalog::desk();
        let z = test_zone();
        let mk = |rot| Scene {
            height: 64,
            width: 64,
            zone: z.clone(),
            placements: vec![place(&cat, "red_square_large_bright", 44.0, 44.0, rot)],
        };
        let a = render_scene(&mk(0.0)).unwrap();
        let b = render_scene(&mk(180.0)).unwrap();
        assert_ne!(a.data, b.data);
        let ma = render_placements_mask(&mk(0.0).placements, 64, 64);
        let mb = render_placements_mask(&mk(180.0).placements, 64, 64);
        assert_eq!(ma, mb, "square occupancy is rotation-invariant");
    }

    #[test]
    fn grasp_point_lands_on_body_for_all_instances() {
        let cat = Catalog::desk();
        for o in &cat.objects {
            for rot in [0.0, 90.0, 180.0, 270.0] {
                for (cx, cy) in [(32.0, 32.0), (30.3, 33.8)] {
                    let p = Placement { object: o.clone(), x: cx, y: cy, rot_deg: rot };
                    let (gx, gy) = grasp_point(&p);
                    let (xi, yi) = (gx.floor() as usize, gy.floor() as usize);
                    let mask = render_placements_mask(std::slice::from_ref(&p), 64, 64);
                    assert!(
                        mask[[yi, xi]],
                        "grasp pixel off-body: {} rot {rot} at ({cx}, {cy})",
                        o.instance_id
                    );
                }
            }
        }
    }

    #[test]
    fn zone_renders_with_darker_border() {
        let scene = Scene { height: 64, width: 64, zone: test_zone(), placements: vec![] };
        let img = render_scene(&scene).unwrap();
        let border = img.get(4, 4);
        let fill = img.get(10, 10);
        assert!(border[0] < fill[0] && border[1] < fill[1] && border[2] < fill[2]);
        let bg = img.get(60, 60);
        assert_eq!(bg, BACKGROUND_RGB.map(|c| (c * 255.0).round() as u8));
    }

    #[test]
    fn painter_order_occludes() {
        let cat = Catalog::desk();
        let under = place(&cat, "red_disc_large_bright", 32.0, 32.0, 0.0);
        let over = place(&cat, "blue_square_large_bright", 32.0, 32.0, 0.0);
        let scene = Scene {
            height: 64,
            width: 64,
            zone: test_zone(),
            placements: vec![under, over],
        };
        let img = render_scene(&scene).unwrap();
        let px = img.get(32, 32);
        let blue = [0.15, 0.25, 0.92].map(|c: f64| (c * 255.0).round() as u8);
        assert_eq!(px, blue, "later placement should win the pixel");
    }

    #[test]
    fn render_is_deterministic() {
        let cat = Catalog::desk();
        let scene = Scene {
            height: 64,
            width: 64,
            zone: test_zone(),
            placements: vec![
                place(&cat, "red_disc_medium_dark", 40.0, 30.0, 90.0),
                place(&cat, "yellow_triangle_small_bright", 14.0, 48.0, 270.0),
            ],
        };
        let a = render_scene(&scene).unwrap();
        let b = render_scene(&scene).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn image_u8_roundtrips_through_float() {
        let cat = Catalog::desk();
        let scene = Scene {
            height: 64,
            width: 64,
            zone: test_zone(),
            placements: vec![place(&cat, "purple_ring_medium_bright", 40.0, 40.0, 0.0)],
        };
        let img = render_scene(&scene).unwrap();
        let arr = img.to_array::<f32>();
        let back = ImageU8::from_array(&arr).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn mask_bbox_tight() {
        let mut mask = Array2::from_elem((64, 64), false);
        for y in 10..20 {
            for x in 30..40 {
                mask[[y, x]] = true;
            }
        }
        let b = mask_bbox(&mask).unwrap();
        assert_eq!(b, [30.0 / 64.0, 10.0 / 64.0, 10.0 / 64.0, 10.0 / 64.0]);
        let empty = Array2::from_elem((8, 8), false);
        assert!(mask_bbox(&empty).is_none());
    }
}
