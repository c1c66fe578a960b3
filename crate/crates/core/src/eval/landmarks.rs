//! Part centroids, the centroid-to-landmark regressor and NME.
//!
//! Points are `[x, y]` in pixels, `x` along columns.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::types::{label_to_channel, PartMask};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
    /// Total probability mass (or pixel count) of the part.
    pub mass: f64,
}

impl Centroid {
    /// True when the part has essentially no mass and its position is
    /// meaningless.
    pub fn is_empty(&self) -> bool {
        self.mass < 1e-3
    }
}

/// Mass-weighted centroids of the `K` foreground channels of an
/// `H × W × (K + 1)` soft map. The mass is guarded by `eps`.
pub fn centroids_from_soft(height: usize, width: usize, k_parts: usize, soft: &[f32], eps: f64) -> Result<Vec<Centroid>> {
    let k1 = k_parts + 1;
    if soft.len() != height * width * k1 {
        return Err(invalid!("soft map length mismatch"));
    }
    let mut acc = vec![[0.0f64; 3]; k_parts];
    for (i, row) in soft.chunks_exact(k1).enumerate() {
        let (x, y) = ((i % width) as f64, (i / width) as f64);
        for (k, a) in acc.iter_mut().enumerate() {
            let v = row[k] as f64;
            a[0] += v * x;
            a[1] += v * y;
            a[2] += v;
        }
    }
    Ok(acc
        .into_iter()
        .map(|[sx, sy, m]| {
            let z = m + eps;
            Centroid { x: sx / z, y: sy / z, mass: m }
        })
        .collect())
}

/// Centroids of the mask, from its soft map when present and from the hard
/// labels otherwise.
pub fn part_centroids(mask: &PartMask, eps: f64) -> Result<Vec<Centroid>> {
    let (h, w, k) = (mask.height(), mask.width(), mask.k_parts());
    match mask.soft() {
        Some(s) => centroids_from_soft(h, w, k, s, eps),
        None => {
            let mut onehot = vec![0.0f32; h * w * (k + 1)];
            for (i, &l) in mask.labels().iter().enumerate() {
                onehot[i * (k + 1) + label_to_channel(l, k)] = 1.0;
            }
            centroids_from_soft(h, w, k, &onehot, eps)
        }
    }
}

/// `[x1, y1, …, xK, yK]`.
pub fn flatten_centroids(c: &[Centroid]) -> Vec<f64> {
    c.iter().flat_map(|c| [c.x, c.y]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NormKind {
    /// Distance between two landmark indices.
    InterOcular { left: usize, right: usize },
    /// Diagonal of the ground-truth landmarks' bounding box.
    BboxDiag,
    /// Diagonal of the image.
    CanvasDiag,
}

impl NormKind {
    pub fn value(&self, points: &[[f64; 2]], image_size: (usize, usize)) -> Result<f64> {
        let d = match *self {
            NormKind::InterOcular { left, right } => {
                let (a, b) = (
                    points.get(left).ok_or_else(|| invalid!("no landmark {left}"))?,
                    points.get(right).ok_or_else(|| invalid!("no landmark {right}"))?,
                );
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
            }
            NormKind::BboxDiag => {
                let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
                for p in points {
                    for i in 0..2 {
                        lo[i] = lo[i].min(p[i]);
                        hi[i] = hi[i].max(p[i]);
                    }
                }
                ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2)).sqrt()
            }
            NormKind::CanvasDiag => ((image_size.0 * image_size.0 + image_size.1 * image_size.1) as f64).sqrt(),
        };
        Ok(d)
    }
}

/// Ground-truth landmarks of one image with their normalizer.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<[f64; 2]>,
    pub d_norm: f64,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>, d_norm: f64) -> Self {
        LandmarkSet { points, d_norm }
    }
}

/// `100 · (1/K) · Σ ‖pred − gt‖ / d_norm`.
pub fn nme(pred: &[[f64; 2]], gt: &LandmarkSet) -> Result<f64> {
    if !(gt.d_norm > 0.0 && gt.d_norm.is_finite()) {
        return Err(invalid!("d_norm must be positive, got {}", gt.d_norm));
    }
    if pred.len() != gt.points.len() || pred.is_empty() {
        return Err(invalid!("{} predicted landmarks for {} ground-truth ones", pred.len(), gt.points.len()));
    }
    let sum: f64 = pred
        .iter()
        .zip(&gt.points)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .sum();
    Ok(100.0 * sum / (pred.len() as f64 * gt.d_norm))
}

/// Affine map from flattened centroids to flattened landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidRegressor {
    /// `(2K + 1) × 2K_gt`; the last row is the bias.
    pub weights: DMatrix<f64>,
    /// Mean squared training residual per coordinate.
    pub residual: f64,
    /// Ridge strength, if the fit needed regularization.
    pub ridge: Option<f64>,
}

pub const RIDGE_FALLBACK: f64 = 1e-6;

fn design(x: &[Vec<f64>]) -> DMatrix<f64> {
    let d = x[0].len();
    DMatrix::from_fn(x.len(), d + 1, |i, j| if j < d { x[i][j] } else { 1.0 })
}

/// Least squares with bias. Falls back to ridge `1e-6` when the design is
/// rank deficient.
pub fn fit_regressor(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<CentroidRegressor> {
    if x.len() != y.len() {
        return Err(invalid!("{} centroid rows but {} landmark rows", x.len(), y.len()));
    }
    let d_in = x.first().map_or(0, Vec::len);
    let needed = d_in + 1;
    if x.len() < needed || d_in == 0 {
        return Err(Error::InsufficientSamples { needed, got: x.len() });
    }
    let d_out = y[0].len();
    if x.iter().any(|r| r.len() != d_in) || y.iter().any(|r| r.len() != d_out) || d_out == 0 {
        return Err(invalid!("ragged regression inputs"));
    }
    let a = design(x);
    let b = DMatrix::from_fn(y.len(), d_out, |i, j| y[i][j]);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let (weights, ridge) = if smax > 0.0 && smin > smax * 1e-10 {
        let w = svd.solve(&b, 0.0).map_err(|e| invalid!("least squares failed: {e}"))?;
        (w, None)
    } else {
        let n = a.ncols();
        let lhs = a.transpose() * &a + DMatrix::identity(n, n) * RIDGE_FALLBACK;
        let w = lhs
            .cholesky()
            .ok_or_else(|| invalid!("ridge system is not positive definite"))?
            .solve(&(a.transpose() * &b));
        (w, Some(RIDGE_FALLBACK))
    };
    let r = &a * &weights - &b;
    let residual = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
    Ok(CentroidRegressor { weights, residual, ridge })
}

impl CentroidRegressor {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() + 1 != self.weights.nrows() {
            return Err(invalid!("regressor expects {} inputs, got {}", self.weights.nrows() - 1, x.len()));
        }
        Ok((0..self.weights.ncols())
            .map(|j| {
                x.iter().enumerate().map(|(i, v)| v * self.weights[(i, j)]).sum::<f64>()
                    + self.weights[(x.len(), j)]
            })
            .collect())
    }

    /// [`apply`](Self::apply) returning points.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<[f64; 2]>> {
        Ok(self.apply(x)?.chunks(2).map(|c| [c[0], c[1]]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_and_block_centroids() {
        let (h, w) = (6, 8);
        let mut soft = vec![0.0f32; h * w * 2];
        for i in 0..h * w {
            soft[i * 2 + 1] = 1.0;
        }
        soft[(5 * w + 3) * 2] = 1.0; // x = 3, y = 5
        soft[(5 * w + 3) * 2 + 1] = 0.0;
        let c = centroids_from_soft(h, w, 1, &soft, 1e-6).unwrap()[0];
        assert!((c.x - 3.0).abs() < 1e-5 && (c.y - 5.0).abs() < 1e-5);

        let mut labels = vec![0u8; 16];
        for (r, col) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            labels[r * 4 + col] = 1;
        }
        let m = PartMask::new(4, 4, 1, labels, None).unwrap();
        let c = part_centroids(&m, 0.0).unwrap()[0];
        assert_eq!((c.x, c.y, c.mass), (1.5, 1.5, 4.0));
    }

    #[test]
    fn nme_examples() {
        let gt = LandmarkSet::new(vec![[1.0, 1.0], [4.0, 2.0]], 10.0);
        assert_eq!(nme(&gt.points, &gt).unwrap(), 0.0);
        assert_eq!(nme(&[[4.0, 5.0], [4.0, 2.0]], &gt).unwrap(), 25.0);
        assert_eq!(nme(&[[11.0, 1.0], [4.0, 2.0]], &gt).unwrap(), 50.0);
        assert!(nme(&gt.points, &LandmarkSet::new(gt.points.clone(), 0.0)).is_err());
    }

    #[test]
    fn regressor_recovers_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..30).map(|_| (0..4).map(|_| rng.random_range(0.0..64.0)).collect()).collect();
        let a = [[0.5, -1.0, 2.0], [1.5, 0.25, 0.0], [0.0, 1.0, -0.5], [2.0, 0.0, 1.0]];
        let b = [3.0, -7.0, 0.5];
        let y: Vec<Vec<f64>> = x
            .iter()
            .map(|r| (0..3).map(|j| (0..4).map(|i| r[i] * a[i][j]).sum::<f64>() + b[j]).collect())
            .collect();
        let reg = fit_regressor(&x, &y).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert!((reg.weights[(i, j)] - a[i][j]).abs() < 1e-8);
            }
        }
        for j in 0..3 {
            assert!((reg.weights[(4, j)] - b[j]).abs() < 1e-8);
        }
        assert!(reg.residual < 1e-16 && reg.ridge.is_none());
    }

    #[test]
    fn too_few_samples_and_rank_deficiency() {
        let x = vec![vec![1.0, 2.0]; 2];
        assert!(matches!(
            fit_regressor(&x, &x),
            Err(Error::InsufficientSamples { needed: 3, got: 2 })
        ));
        let x = vec![vec![1.0, 2.0]; 5];
        let reg = fit_regressor(&x, &x).unwrap();
        assert_eq!(reg.ridge, Some(RIDGE_FALLBACK));
        let p = reg.apply(&[1.0, 2.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-4 && (p[1] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn norm_kinds() {
        let pts = [[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]];
        assert_eq!(NormKind::InterOcular { left: 0, right: 1 }.value(&pts, (10, 10)).unwrap(), 5.0);
        assert_eq!(NormKind::BboxDiag.value(&pts, (10, 10)).unwrap(), 5.0);
        assert_eq!(NormKind::CanvasDiag.value(&pts, (6, 8)).unwrap(), 10.0);
    }
}
