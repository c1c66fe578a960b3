//! Paired random similarity transforms for the two training views.
//!
//! A view is produced by scaling and rotating about the image center and
//! then translating, with the output cropped to the input size. Source
//! coordinates outside the frame are reflected back in and sampled
//! bilinearly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::types::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    /// Relative scale half-range, e.g. `0.05` for ±5%.
    pub scale: f64,
    /// Rotation half-range in degrees.
    pub rotate_deg: f64,
    /// Translation half-range in pixels, per axis.
    pub translate_px: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            scale: 0.05,
            rotate_deg: 15.0,
            translate_px: 5.0,
        }
    }
}

impl AugmentSpec {
    pub const NONE: AugmentSpec = AugmentSpec {
        scale: 0.0,
        rotate_deg: 0.0,
        translate_px: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.scale) || self.scale >= 1.0 || !ok(self.rotate_deg) || !ok(self.translate_px) {
            return Err(invalid!("augmentation ranges must be finite, non-negative and scale < 1: {self:?}"));
        }
        Ok(())
    }

    /// Draws one transform uniformly from the ranges.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineParams {
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        AffineParams {
            scale: 1.0 + sym(self.scale),
            angle_deg: sym(self.rotate_deg),
            tx: sym(self.translate_px),
            ty: sym(self.translate_px),
        }
    }
}

/// `p' = s·R(θ)·(p − c) + c + t` with `p = (x, y)` in pixel coordinates and
/// `c` the image center. Positive angles rotate counter-clockwise on screen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub scale: f64,
    pub angle_deg: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        scale: 1.0,
        angle_deg: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn rotation(angle_deg: f64) -> Self {
        AffineParams {
            angle_deg,
            ..Self::IDENTITY
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = (-self.angle_deg).to_radians().sin_cos();
        let (x, y) = (-self.tx / self.scale, -self.ty / self.scale);
        AffineParams {
            scale: 1.0 / self.scale,
            angle_deg: -self.angle_deg,
            tx: c * x + s * y,
            ty: -s * x + c * y,
        }
    }

    /// Maps an output pixel `(x, y)` back to its source location.
    fn source(&self, x: f64, y: f64, cx: f64, cy: f64) -> (f64, f64) {
        // y grows downward, so a counter-clockwise screen rotation is a
        // clockwise rotation in (x, y).
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = ((x - cx - self.tx) / self.scale, (y - cy - self.ty) / self.scale);
        (c * dx - s * dy + cx, s * dx + c * dy + cy)
    }

    /// Forward map of a point `(x, y)`.
    pub fn apply(&self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let (cx, cy) = center(width, height);
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        (
            self.scale * (c * dx + s * dy) + cx + self.tx,
            self.scale * (-s * dx + c * dy) + cy + self.ty,
        )
    }
}

fn center(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

/// Reflects `v` into `[0, n − 1]` without repeating the edge sample.
pub(crate) fn reflect(v: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let m = (n - 1) as f64;
    let p = v.rem_euclid(2.0 * m);
    if p > m {
        2.0 * m - p
    } else {
        p
    }
}

/// Resamples `image` under `params` with reflection padding and bilinear
/// interpolation.
pub fn warp(image: &Image, params: &AffineParams) -> Image {
    if params.is_identity() {
        return image.clone();
    }
    let (h, w) = image.size();
    let (cx, cy) = center(w, h);
    let plane = h * w;
    let src = image.data();
    Image::from_fn(h, w, |r, c| {
        let (sx, sy) = params.source(c as f64, r as f64, cx, cy);
        let (x, y) = (reflect(sx, w), reflect(sy, h));
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
        let mut px = [0.0f32; 3];
        for (ch, out) in px.iter_mut().enumerate() {
            let at = |rr: usize, cc: usize| src[ch * plane + rr * w + cc];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            *out = top * (1.0 - fy) + bot * fy;
        }
        px
    })
}

/// Nearest-neighbour resampling of a label grid under `params`.
pub fn warp_labels(labels: &[u8], height: usize, width: usize, params: &AffineParams) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(invalid!("label grid has {} entries, expected {height}x{width}", labels.len()));
    }
    let (cx, cy) = center(width, height);
    Ok((0..height * width)
        .map(|i| {
            let (r, c) = (i / width, i % width);
            let (sx, sy) = params.source(c as f64, r as f64, cx, cy);
            let x = reflect(sx, width).round() as usize;
            let y = reflect(sy, height).round() as usize;
            labels[y.min(height - 1) * width + x.min(width - 1)]
        })
        .collect())
}

/// Two independently transformed views of `image` and their parameters.
pub fn make_pair<R: Rng + ?Sized>(
    image: &Image,
    spec: &AugmentSpec,
    rng: &mut R,
) -> (Image, Image, AffineParams, AffineParams) {
    let p1 = spec.sample(rng);
    let p2 = spec.sample(rng);
    (warp(image, &p1), warp(image, &p2), p1, p2)
}
