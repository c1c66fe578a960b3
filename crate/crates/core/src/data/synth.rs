//! Synthetic "creatures": a fixed arrangement of flat-colored shapes under a
//! random pose on a noisy textured background, with exact part masks and
//! part-centroid landmarks.
//!
//! Offsets and sizes are fractions of the canvas side. Part `i` is drawn
//! after part `i - 1`, so later parts occlude earlier ones; mask label
//! `i + 1` marks the visible pixels of part `i`. With several classes, class
//! `c` rotates the color list by `c` positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::error::{invalid, Result};
use crate::par::{self, Exec};
use crate::pipeline::train::derive_seed;
use crate::types::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Ellipse,
    Rectangle,
    /// Isosceles, apex along the local +x axis.
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpec {
    pub shape: Shape,
    pub color: [f32; 3],
    /// Center offset `[dx, dy]` from the creature center.
    pub offset: [f64; 2],
    /// Half extents `[rx, ry]` along the part's local axes.
    pub size: [f64; 2],
    #[serde(default)]
    pub angle_deg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseJitter {
    /// Translation half-range as a fraction of the canvas.
    pub translate: f64,
    pub rotate_deg: f64,
    /// Relative scale half-range.
    pub scale: f64,
}

impl Default for PoseJitter {
    fn default() -> Self {
        PoseJitter {
            translate: 0.08,
            rotate_deg: 25.0,
            scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub canvas: usize,
    pub parts: Vec<PartSpec>,
    pub jitter: PoseJitter,
    /// Per-pixel Gaussian noise std on the whole image.
    pub noise: f64,
    /// Amplitude of the smooth background texture.
    pub texture: f64,
    pub count: usize,
    pub n_classes: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

/// Minimum RGB distance between any two part colors.
pub const MIN_COLOR_DISTANCE: f32 = 0.2;

impl Default for SyntheticSpec {
    fn default() -> Self {
        let part = |shape, color, offset, size, angle_deg| PartSpec {
            shape,
            color,
            offset,
            size,
            angle_deg,
        };
        SyntheticSpec {
            canvas: 64,
            parts: vec![
                part(Shape::Rectangle, [0.2, 0.75, 0.3], [-0.35, 0.02], [0.13, 0.065], -10.0),
                part(Shape::Ellipse, [0.85, 0.2, 0.2], [0.0, 0.0], [0.27, 0.19], 0.0),
                part(Shape::Triangle, [0.2, 0.35, 0.9], [-0.03, -0.2], [0.15, 0.12], -90.0),
                part(Shape::Ellipse, [0.95, 0.85, 0.2], [0.31, -0.1], [0.13, 0.13], 0.0),
            ],
            jitter: PoseJitter::default(),
            noise: 0.03,
            texture: 0.12,
            count: 500,
            n_classes: 1,
            seed: 7,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    angle: f64,
    scale: f64,
}

impl SyntheticSpec {
    pub fn k_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas < 8 {
            return Err(invalid!("canvas must be at least 8 pixels"));
        }
        if self.parts.is_empty() || self.parts.len() > 254 {
            return Err(invalid!("need between 1 and 254 parts"));
        }
        if self.count == 0 || self.n_classes == 0 {
            return Err(invalid!("count and n_classes must be positive"));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if p.size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(invalid!("part {i} has a degenerate size {:?}", p.size));
            }
            if p.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(invalid!("part {i} color {:?} outside [0, 1]", p.color));
            }
            if p.offset.iter().chain([&p.angle_deg]).any(|v| !v.is_finite()) {
                return Err(invalid!("part {i} has a non-finite offset or angle"));
            }
        }
        for i in 0..self.parts.len() {
            for j in i + 1..self.parts.len() {
                let d = self.parts[i]
                    .color
                    .iter()
                    .zip(&self.parts[j].color)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f32>()
                    .sqrt();
                if d < MIN_COLOR_DISTANCE {
                    return Err(invalid!(
                        "parts {i} and {j} have colors {d:.3} apart; at least {MIN_COLOR_DISTANCE} is needed to tell them apart"
                    ));
                }
            }
        }
        let j = &self.jitter;
        if [j.translate, j.rotate_deg, j.scale].iter().any(|v| !(v.is_finite() && *v >= 0.0)) || j.scale >= 1.0 {
            return Err(invalid!("pose jitter ranges must be non-negative and scale < 1"));
        }
        if !(0.0..=0.5).contains(&self.noise) || !(0.0..=0.5).contains(&self.texture) {
            return Err(invalid!("noise and texture must be within [0, 0.5]"));
        }
        if !(0.0..=1.0).contains(&self.train_fraction)
            || !(0.0..=1.0).contains(&self.val_fraction)
            || self.train_fraction + self.val_fraction > 1.0
        {
            return Err(invalid!("split fractions must be in [0, 1] and sum to at most 1"));
        }
        // every part must be visible in the canonical pose
        let n = self.canvas as f64;
        let canonical = Pose {
            cx: (n - 1.0) / 2.0,
            cy: (n - 1.0) / 2.0,
            angle: 0.0,
            scale: 1.0,
        };
        let labels = self.render_labels(&canonical);
        for k in 1..=self.parts.len() {
            if !labels.contains(&(k as u8)) {
                return Err(invalid!("part {} is fully hidden or outside the canvas", k - 1));
            }
        }
        Ok(())
    }

    fn render_labels(&self, pose: &Pose) -> Vec<u8> {
        let n = self.canvas;
        let side = n as f64;
        let (ps, pc) = pose.angle.sin_cos();
        // Precompute every part's center and inverse rotation.
        let frames: Vec<_> = self
            .parts
            .iter()
            .map(|p| {
                let (ox, oy) = (p.offset[0] * side * pose.scale, p.offset[1] * side * pose.scale);
                let center = (pose.cx + pc * ox - ps * oy, pose.cy + ps * ox + pc * oy);
                let (s, c) = (pose.angle + p.angle_deg.to_radians()).sin_cos();
                let half = (p.size[0] * side * pose.scale, p.size[1] * side * pose.scale);
                (p.shape, center, (s, c), half)
            })
            .collect();
        let mut labels = vec![0u8; n * n];
        for r in 0..n {
            for col in 0..n {
                let (x, y) = (col as f64, r as f64);
                for (i, (shape, center, (s, c), (rx, ry))) in frames.iter().enumerate().rev() {
                    let (dx, dy) = (x - center.0, y - center.1);
                    let (qx, qy) = (c * dx + s * dy, -s * dx + c * dy);
                    let inside = match shape {
                        Shape::Ellipse => (qx / rx).powi(2) + (qy / ry).powi(2) <= 1.0,
                        Shape::Rectangle => qx.abs() <= *rx && qy.abs() <= *ry,
                        Shape::Triangle => qx >= -rx && qx <= *rx && qy.abs() <= ry * (rx - qx) / (2.0 * rx),
                    };
                    if inside {
                        labels[r * n + col] = (i + 1) as u8;
                        break;
                    }
                }
            }
        }
        labels
    }

    fn sample_pose(&self, rng: &mut ChaCha8Rng) -> Pose {
        let n = self.canvas as f64;
        let j = &self.jitter;
        let mut sym = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        Pose {
            cx: (n - 1.0) / 2.0 + sym(j.translate) * n,
            cy: (n - 1.0) / 2.0 + sym(j.translate) * n,
            angle: sym(j.rotate_deg).to_radians(),
            scale: 1.0 + sym(j.scale),
        }
    }

    /// Renders sample `index`: image, label grid and per-part centroids `[x, y]`.
    pub fn sample(&self, index: usize) -> Result<(Image, Vec<u8>, Vec<[f64; 2]>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[index as u64]));
        let k = self.parts.len();
        let n = self.canvas;
        let mut labels = Vec::new();
        for attempt in 0..=100 {
            if attempt == 100 {
                return Err(invalid!("could not place all parts visibly for sample {index}; reduce pose jitter"));
            }
            labels = self.render_labels(&self.sample_pose(&mut rng));
            let mut seen = vec![false; k + 1];
            labels.iter().for_each(|&l| seen[l as usize] = true);
            if seen.iter().all(|s| *s) {
                break;
            }
        }

        let class = index % self.n_classes;
        let colors: Vec<[f32; 3]> = (0..k).map(|i| self.parts[(i + class) % k].color).collect();
        let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        let noise: Vec<f32> = (0..3 * n * n)
            .map(|_| (self.noise * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        let tex = self.texture;
        let image = Image::from_fn(n, n, |r, c| {
            let i = r * n + c;
            let l = labels[i] as usize;
            let mut px = if l == 0 {
                let (x, y) = (c as f64 / n as f64, r as f64 / n as f64);
                let t: f64 = waves
                    .iter()
                    .map(|(fx, fy, ph, w)| w * (std::f64::consts::TAU * (fx * x + fy * y) + ph).sin())
                    .sum::<f64>()
                    / 1.5;
                std::array::from_fn(|ch| base[ch] + (tex * t) as f32 * [1.0, 0.8, 0.6][ch])
            } else {
                colors[l - 1]
            };
            for (ch, v) in px.iter_mut().enumerate() {
                *v += noise[ch * n * n + i];
            }
            px
        });
        // Quantize so the in-memory sample equals what a PNG round trip gives.
        let image = Image::from_rgb8(n, n, &image.to_rgb8())?;

        let mut sums = vec![[0.0f64; 3]; k + 1];
        for (i, &l) in labels.iter().enumerate() {
            let s = &mut sums[l as usize];
            s[0] += (i % n) as f64;
            s[1] += (i / n) as f64;
            s[2] += 1.0;
        }
        let centroids = sums[1..].iter().map(|s| [s[0] / s[2], s[1] / s[2]]).collect();
        Ok((image, labels, centroids))
    }

    /// Generates the whole dataset.
    pub fn generate(&self, exec: Exec) -> Result<Dataset> {
        self.validate()?;
        let samples = par::try_map_range(exec, self.count, |i| self.sample(i))?;
        let mut images = Vec::with_capacity(self.count);
        let mut masks = Vec::with_capacity(self.count);
        let mut landmarks = Vec::with_capacity(self.count);
        for (img, m, l) in samples {
            images.push(img);
            masks.push(m);
            landmarks.push(l);
        }
        let width = self.count.saturating_sub(1).to_string().len().max(4);
        Ok(Dataset {
            ids: (0..self.count).map(|i| format!("img{i:0width$}")).collect(),
            images,
            classes: (0..self.count).map(|i| i % self.n_classes).collect(),
            masks: Some(masks),
            landmarks: Some(landmarks),
            splits: Splits::by_fraction(self.count, self.train_fraction, self.val_fraction),
        })
    }
}
