//! Geometric training augmentation: horizontal flip, rotation about the
//! center, and a random crop resized back to full size. The same transform
//! is applied to the image (bilinear) and its mask (nearest).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distribution the per-sample parameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub max_rotation_deg: f64,
    /// Crop side as a fraction of the image side.
    pub crop_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_p: 0.5,
            max_rotation_deg: 20.0,
            crop_scale: 0.875,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_p)
            || !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg.is_finite())
            || !(self.crop_scale > 0.0 && self.crop_scale <= 1.0)
        {
            return Err(Error::Config(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }
}

/// One concrete draw of the transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_deg: f64,
    pub crop_scale: f64,
    /// Crop window position within the available slack, each in `[0, 1]`.
    pub crop_x: f64,
    pub crop_y: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            flip: false,
            angle_deg: 0.0,
            crop_scale: 1.0,
            crop_x: 0.5,
            crop_y: 0.5,
        }
    }

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let flip = rng.random::<f64>() < cfg.flip_p;
        let angle_deg = if cfg.max_rotation_deg > 0.0 {
            rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
        } else {
            0.0
        };
        AugmentParams {
            flip,
            angle_deg,
            crop_scale: cfg.crop_scale,
            crop_x: rng.random::<f64>(),
            crop_y: rng.random::<f64>(),
        }
    }
}

fn flip_plane<T: Copy>(plane: &mut [T], s: usize) {
    for row in plane.chunks_exact_mut(s) {
        row.reverse();
    }
}

/// Source coordinate of output pixel `(x, y)` under a rotation by `angle`.
fn rotate_source(x: usize, y: usize, s: usize, cos: f64, sin: f64) -> (f64, f64) {
    let c = (s as f64 - 1.0) / 2.0;
    let (dx, dy) = (x as f64 - c, y as f64 - c);
    (c + cos * dx + sin * dy, c - sin * dx + cos * dy)
}

fn rotate_bilinear(plane: &[f64], s: usize, angle: f64) -> Vec<f64> {
    let (sin, cos) = angle.sin_cos();
    let at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= s as isize || y >= s as isize {
            0.0
        } else {
            plane[y as usize * s + x as usize]
        }
    };
    let mut out = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let (sx, sy) = rotate_source(x, y, s, cos, sin);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
            let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
            out[y * s + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

fn rotate_nearest(plane: &[usize], s: usize, angle: f64) -> Vec<usize> {
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![0; s * s];
    for y in 0..s {
        for x in 0..s {
            let (sx, sy) = rotate_source(x, y, s, cos, sin);
            let (nx, ny) = ((sx + 0.5).floor(), (sy + 0.5).floor());
            if nx >= 0.0 && ny >= 0.0 && nx < s as f64 && ny < s as f64 {
                out[y * s + x] = plane[ny as usize * s + nx as usize];
            }
        }
    }
    out
}

/// Origin and per-pixel step of the crop window along one axis.
fn crop_axis(s: usize, scale: f64, pos: f64) -> (f64, f64) {
    let side = scale * s as f64;
    (pos * (s as f64 - side), side / s as f64)
}

fn crop_bilinear(plane: &[f64], s: usize, p: &AugmentParams) -> Vec<f64> {
    let (ox, step) = crop_axis(s, p.crop_scale, p.crop_x);
    let (oy, _) = crop_axis(s, p.crop_scale, p.crop_y);
    let taps = |o: f64| -> Vec<(usize, usize, f64)> {
        (0..s)
            .map(|i| {
                let src = (o + (i as f64 + 0.5) * step - 0.5).clamp(0.0, s as f64 - 1.0);
                let i0 = src.floor() as usize;
                (i0, (i0 + 1).min(s - 1), src - i0 as f64)
            })
            .collect()
    };
    let (tx, ty) = (taps(ox), taps(oy));
    let mut out = vec![0.0; s * s];
    for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = plane[y0 * s + x0] * (1.0 - fx) + plane[y0 * s + x1] * fx;
            let bottom = plane[y1 * s + x0] * (1.0 - fx) + plane[y1 * s + x1] * fx;
            out[y * s + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

fn crop_nearest(plane: &[usize], s: usize, p: &AugmentParams) -> Vec<usize> {
    let (ox, step) = crop_axis(s, p.crop_scale, p.crop_x);
    let (oy, _) = crop_axis(s, p.crop_scale, p.crop_y);
    let idx = |o: f64| -> Vec<usize> {
        (0..s)
            .map(|i| ((o + (i as f64 + 0.5) * step).floor() as usize).min(s - 1))
            .collect()
    };
    let (ix, iy) = (idx(ox), idx(oy));
    let mut out = vec![0; s * s];
    for (y, &sy) in iy.iter().enumerate() {
        for (x, &sx) in ix.iter().enumerate() {
            out[y * s + x] = plane[sy * s + sx];
        }
    }
    out
}

/// Applies `p` to a `[C, S, S]` image and optional `S×S` mask.
pub fn apply_augment(
    image: &Tensor,
    mask: Option<&[usize]>,
    p: &AugmentParams,
) -> Result<(Tensor, Option<Vec<usize>>)> {
    let sh = image.shape();
    if sh.len() != 3 || sh[1] != sh[2] {
        return Err(Error::shape("augment", format!("image {sh:?} is not [C, S, S]")));
    }
    let (c, s) = (sh[0], sh[1]);
    if let Some(m) = mask {
        if m.len() != s * s {
            return Err(Error::shape("augment", format!("mask of {} for a {s}x{s} image", m.len())));
        }
    }
    let angle = p.angle_deg.to_radians();

    let mut data = Vec::with_capacity(c * s * s);
    for plane in image.data().chunks_exact(s * s) {
        let mut plane = plane.to_vec();
        if p.flip {
            flip_plane(&mut plane, s);
        }
        let plane = rotate_bilinear(&plane, s, angle);
        data.extend(crop_bilinear(&plane, s, p));
    }
    let mask = mask.map(|m| {
        let mut m = m.to_vec();
        if p.flip {
            flip_plane(&mut m, s);
        }
        let m = rotate_nearest(&m, s, angle);
        crop_nearest(&m, s, p)
    });
    Ok((Tensor::new(sh.to_vec(), data)?, mask))
}

/// Draws parameters from `cfg` and applies them.
pub fn augment(
    image: &Tensor,
    mask: Option<&[usize]>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor, Option<Vec<usize>>)> {
    apply_augment(image, mask, &AugmentParams::sample(cfg, rng))
}
