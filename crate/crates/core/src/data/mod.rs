//! Datasets in memory and on disk, plus the synthetic creature generator.

pub mod io;
pub mod synth;

use crate::error::{invalid, Result};
use crate::types::Image;

/// Index lists into a [`Dataset`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Consecutive index blocks sized by the given fractions of `n`; the
    /// test split takes the remainder.
    pub fn by_fraction(n: usize, train: f64, val: f64) -> Self {
        let a = ((n as f64 * train).round() as usize).min(n);
        let b = (a + (n as f64 * val).round() as usize).min(n);
        Splits {
            train: (0..a).collect(),
            val: (a..b).collect(),
            test: (b..n).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(invalid!("unknown split '{other}'")),
        }
    }
}

/// Images with optional annotations. Landmarks are `[x, y]` pixel
/// coordinates; masks are label grids with 0 as background.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub images: Vec<Image>,
    pub classes: Vec<usize>,
    pub masks: Option<Vec<Vec<u8>>>,
    pub landmarks: Option<Vec<Vec<[f64; 2]>>>,
    pub splits: Splits,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.iter().max().map_or(0, |m| m + 1)
    }

    /// Number of landmarks per image, if annotated.
    pub fn k_landmarks(&self) -> Option<usize> {
        self.landmarks.as_ref().and_then(|l| l.first()).map(Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if self.ids.len() != n || self.classes.len() != n {
            return Err(invalid!("dataset columns have different lengths"));
        }
        if let Some(m) = &self.masks {
            if m.len() != n {
                return Err(invalid!("{} masks for {n} images", m.len()));
            }
            for (i, (mask, img)) in m.iter().zip(&self.images).enumerate() {
                if mask.len() != img.height() * img.width() {
                    return Err(invalid!("mask of {} does not match its image size", self.ids[i]));
                }
            }
        }
        if let Some(l) = &self.landmarks {
            let k = l.first().map_or(0, Vec::len);
            if l.len() != n || l.iter().any(|p| p.len() != k) {
                return Err(invalid!("landmark rows must cover every image with the same count"));
            }
        }
        for &i in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if i >= n {
                return Err(invalid!("split index {i} out of range"));
            }
        }
        Ok(())
    }

    /// Images of `split`, cloned.
    pub fn split_images(&self, split: &str) -> Result<Vec<Image>> {
        Ok(self.splits.get(split)?.iter().map(|&i| self.images[i].clone()).collect())
    }

    /// Resizes every image (bilinear), mask (nearest) and landmark set.
    pub fn resized(&self, height: usize, width: usize) -> Result<Dataset> {
        if self.images.iter().all(|i| i.size() == (height, width)) {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        for (i, img) in self.images.iter().enumerate() {
            let (h, w) = img.size();
            out.images[i] = img.resized(height, width)?;
            if let Some(m) = out.masks.as_mut() {
                m[i] = (0..height * width)
                    .map(|p| {
                        let (r, c) = (p / width, p % width);
                        self.masks.as_ref().expect("masks present")[i][(r * h / height) * w + c * w / width]
                    })
                    .collect();
            }
            if let Some(l) = out.landmarks.as_mut() {
                let (sx, sy) = (width as f64 / w as f64, height as f64 / h as f64);
                for p in l[i].iter_mut() {
                    *p = [(p[0] + 0.5) * sx - 0.5, (p[1] + 0.5) * sy - 0.5];
                }
            }
        }
        Ok(out)
    }
}
