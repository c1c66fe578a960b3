//! Overlap measures between label grids.

use crate::error::{invalid, Result};

/// Maps every predicted label to the ground-truth label it overlaps most.
/// Ties go to the lower ground-truth label.
pub fn majority_mapping(pred: &[u8], gt: &[u8]) -> Result<[u8; 256]> {
    if pred.len() != gt.len() {
        return Err(invalid!("label grids differ in length"));
    }
    let mut counts = vec![[0u64; 256]; 256];
    for (&p, &g) in pred.iter().zip(gt) {
        counts[p as usize][g as usize] += 1;
    }
    let mut map = [0u8; 256];
    for (p, row) in counts.iter().enumerate() {
        let mut best = 0;
        for g in 1..256 {
            if row[g] > row[best] {
                best = g;
            }
        }
        map[p] = best as u8;
    }
    Ok(map)
}

/// Pixels within Chebyshev distance `band` of a pixel with a different
/// ground-truth label.
pub fn boundary_band(gt: &[u8], height: usize, width: usize, band: usize) -> Result<Vec<bool>> {
    if gt.len() != height * width {
        return Err(invalid!("label grid has {} entries, expected {height}x{width}", gt.len()));
    }
    let mut edge = vec![false; gt.len()];
    for r in 0..height {
        for c in 0..width {
            let l = gt[r * width + c];
            let right = c + 1 < width && gt[r * width + c + 1] != l;
            let down = r + 1 < height && gt[(r + 1) * width + c] != l;
            if right {
                edge[r * width + c] = true;
                edge[r * width + c + 1] = true;
            }
            if down {
                edge[r * width + c] = true;
                edge[(r + 1) * width + c] = true;
            }
        }
    }
    let mut out = vec![false; gt.len()];
    for r in 0..height {
        for c in 0..width {
            if edge[r * width + c] {
                for rr in r.saturating_sub(band)..(r + band + 1).min(height) {
                    for cc in c.saturating_sub(band)..(c + band + 1).min(width) {
                        out[rr * width + cc] = true;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-label intersection and union counts, accumulable across images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IouAccumulator {
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl IouAccumulator {
    /// Adds pixels where `mask` is set (all pixels when `None`).
    pub fn add(&mut self, a: &[u8], b: &[u8], mask: Option<&[bool]>) -> Result<()> {
        if a.len() != b.len() || mask.is_some_and(|m| m.len() != a.len()) {
            return Err(invalid!("label grids differ in length"));
        }
        if self.inter.is_empty() {
            self.inter = vec![0; 256];
            self.union = vec![0; 256];
        }
        for i in 0..a.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let (x, y) = (a[i] as usize, b[i] as usize);
            if x == y {
                self.inter[x] += 1;
                self.union[x] += 1;
            } else {
                self.union[x] += 1;
                self.union[y] += 1;
            }
        }
        Ok(())
    }

    /// Mean IoU over labels that occur in either grid; 1 when nothing was added.
    pub fn mean(&self) -> f64 {
        let ious: Vec<f64> = self
            .inter
            .iter()
            .zip(&self.union)
            .filter(|(_, &u)| u > 0)
            .map(|(&i, &u)| i as f64 / u as f64)
            .collect();
        if ious.is_empty() {
            1.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

/// Mean IoU of two label grids over the labels present in either.
pub fn mean_iou(a: &[u8], b: &[u8]) -> Result<f64> {
    let mut acc = IouAccumulator::default();
    acc.add(a, b, None)?;
    Ok(acc.mean())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_follows_majority() {
        let pred = [3, 3, 3, 1, 1, 0];
        let gt = [1, 1, 2, 2, 2, 0];
        let m = majority_mapping(&pred, &gt).unwrap();
        assert_eq!((m[3], m[1], m[0]), (1, 2, 0));
    }

    #[test]
    fn band_covers_both_sides_of_an_edge() {
        // left half 0, right half 1 on a 1x6 strip
        let gt = [0, 0, 0, 1, 1, 1];
        let b0 = boundary_band(&gt, 1, 6, 0).unwrap();
        assert_eq!(b0, [false, false, true, true, false, false]);
        let b1 = boundary_band(&gt, 1, 6, 1).unwrap();
        assert_eq!(b1, [false, true, true, true, true, false]);
    }

    #[test]
    fn iou_values() {
        assert_eq!(mean_iou(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        // label 0: 1/2, label 1: 1/2
        assert_eq!(mean_iou(&[0, 0, 1], &[0, 1, 1]).unwrap(), 0.5);
        let mut acc = IouAccumulator::default();
        acc.add(&[0, 1], &[1, 1], Some(&[false, true])).unwrap();
        assert_eq!(acc.mean(), 1.0);
    }
}
