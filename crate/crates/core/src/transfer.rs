//! Representation transfer: soft part assignment, feature synthesis and
//! representation exchange between paired views.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::softmax_last;
use crate::types::{ensure_finite, FeatureMap, PartRepresentations, ProbabilityMap, SyntheticFeatureMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub temperature: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig { temperature: 0.8 }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    TransferConfig { temperature: tau }.validate()
}

/// Broadcasts a single-sample `G` over a batch of `n`.
fn batched(g: &PartRepresentations, n: usize) -> Result<Tensor> {
    let v = g.values();
    match g.batch() {
        b if b == n => Ok(v.clone()),
        1 => Ok(v.broadcast_as((n, g.parts(), g.channels()))?.contiguous()?),
        b => Err(invalid!("batch mismatch: {n} feature maps but {b} representation sets")),
    }
}

/// Scaled part-pixel scores `τ·⟨g_k, f_ij⟩`, laid out `(B, H, W, K + 1)`.
pub fn logits(f: &FeatureMap, g: &PartRepresentations, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    if f.channels() != g.channels() {
        return Err(invalid!(
            "feature map has {} channels but part representations have {}",
            f.channels(),
            g.channels()
        ));
    }
    let (b, (h, w)) = (f.batch(), f.grid());
    let gv = batched(g, b)?;
    let scores = f.pixels()?.contiguous()?.matmul(&gv.transpose(1, 2)?.contiguous()?)?;
    Ok((scores * tau)?.reshape((b, h, w, g.parts()))?)
}

/// Softmax over the part axis of `(B, H, W, K + 1)` logits.
pub fn probability_from_logits(logits: &Tensor, tau: f64) -> Result<ProbabilityMap> {
    ProbabilityMap::new(softmax_last(logits)?, tau)
}

/// `V[i,j,k] = softmax_k(τ·⟨g_k, f_ij⟩)` over all `K + 1` rows, background included.
pub fn probability_map(f: &FeatureMap, g: &PartRepresentations, tau: f64) -> Result<ProbabilityMap> {
    ensure_finite(f.values(), "feature map")?;
    ensure_finite(g.values(), "part representations")?;
    probability_from_logits(&logits(f, g, tau)?, tau)
}

/// `S[i,j] = Σ_k V[i,j,k]·g_k`.
pub fn synthesize(v: &ProbabilityMap, g: &PartRepresentations) -> Result<SyntheticFeatureMap> {
    if v.parts() != g.parts() {
        return Err(invalid!(
            "probability map has {} parts but representations have {} rows",
            v.parts(),
            g.parts()
        ));
    }
    let (b, (h, w)) = (v.batch(), v.grid());
    let gv = batched(g, b)?;
    let s = v.flat()?.contiguous()?.matmul(&gv)?;
    SyntheticFeatureMap::new(
        s.transpose(1, 2)?
            .contiguous()?
            .reshape((b, g.channels(), h, w))?,
    )
}

/// Swaps the representations of two paired views.
pub fn exchange(
    g1: &PartRepresentations,
    g2: &PartRepresentations,
) -> Result<(PartRepresentations, PartRepresentations)> {
    if g1.values().dims() != g2.values().dims() {
        return Err(invalid!(
            "cannot exchange representations of shapes {:?} and {:?}",
            g1.values().shape(),
            g2.values().shape()
        ));
    }
    Ok((g2.clone(), g1.clone()))
}

/// For a `2B` batch ordered `[view 1; view 2]`, returns `[G₂; G₁]`.
pub fn exchange_halves(g: &PartRepresentations) -> Result<PartRepresentations> {
    let n = g.batch();
    if n % 2 != 0 {
        return Err(invalid!("paired batch must have even size, got {n}"));
    }
    let half = n / 2;
    let (a, b) = exchange(&g.narrow_batch(0, half)?, &g.narrow_batch(half, half)?)?;
    PartRepresentations::new(Tensor::cat(&[a.values(), b.values()], 0)?)
}

/// Hard one-hot version of `V` (argmax, ties to the lowest index), same dtype.
pub fn one_hot(v: &ProbabilityMap) -> Result<ProbabilityMap> {
    let k = v.parts();
    let idx = v.values().argmax_keepdim(candle_core::D::Minus1)?;
    let range = Tensor::arange(0u32, k as u32, v.values().device())?;
    let hot = idx.broadcast_eq(&range.reshape((1, 1, 1, k))?)?;
    ProbabilityMap::new(hot.to_dtype(v.values().dtype())?, v.temperature())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn fmap(h: usize, w: usize, c: usize, d: &[f64]) -> FeatureMap {
        FeatureMap::from_hwc(h, w, c, d, DType::F64, &Device::Cpu).unwrap()
    }

    fn parts(rows: &[Vec<f64>]) -> PartRepresentations {
        PartRepresentations::from_rows(rows, DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn identical_rows_give_uniform_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = fmap(3, 4, 5, &rand_vec(&mut rng, 60));
        let row = rand_vec(&mut rng, 5);
        let g = parts(&vec![row; 4]);
        let v = probability_map(&f, &g, 0.8).unwrap();
        for p in v.to_hwk(0).unwrap() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn vanishing_temperature_gives_uniform_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = fmap(2, 2, 3, &rand_vec(&mut rng, 12));
        let g = parts(&[rand_vec(&mut rng, 3), rand_vec(&mut rng, 3), rand_vec(&mut rng, 3)]);
        let v = probability_map(&f, &g, 1e-12).unwrap();
        for p in v.to_hwk(0).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn two_logit_example() {
        let f = fmap(1, 1, 1, &[1.0]);
        let g = parts(&[vec![1.0], vec![2.0]]);
        let v = probability_map(&f, &g, 0.8).unwrap().to_hwk(0).unwrap();
        let (a, b) = (0.8f64.exp(), 1.6f64.exp());
        assert!((v[0] - a / (a + b)).abs() < 1e-12);
        assert!((v[1] - b / (a + b)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = fmap(1, 1, 2, &[1.0, 0.0]);
        let g = parts(&[vec![1.0], vec![2.0]]);
        assert!(probability_map(&f, &g, 0.8).is_err());
        let g = parts(&[vec![1.0, 0.0], vec![2.0, 0.0]]);
        assert!(probability_map(&f, &g, 0.0).is_err());
        let bad = fmap(1, 1, 2, &[f64::NAN, 0.0]);
        assert!(matches!(
            probability_map(&bad, &g, 0.8),
            Err(crate::Error::Numeric(_))
        ));
    }

    #[test]
    fn one_hot_synthesis_reproduces_rows_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 4)).collect();
        let g = parts(&rows);
        let labels = [0usize, 2, 1, 2, 0, 1];
        let mut hot = vec![0.0; 6 * 3];
        for (p, &k) in labels.iter().enumerate() {
            hot[p * 3 + k] = 1.0;
        }
        let v = ProbabilityMap::from_hwk(2, 3, 3, &hot, DType::F64, &Device::Cpu).unwrap();
        let s = synthesize(&v, &g).unwrap().to_hwc(0).unwrap();
        for (p, &k) in labels.iter().enumerate() {
            assert_eq!(&s[p * 4..(p + 1) * 4], rows[k].as_slice());
        }
    }

    #[test]
    fn uniform_synthesis_averages_rows() {
        let g = parts(&[vec![1.0, -2.0], vec![3.0, 4.0]]);
        let v = ProbabilityMap::from_hwk(2, 2, 2, &[0.5; 8], DType::F64, &Device::Cpu).unwrap();
        for px in synthesize(&v, &g).unwrap().to_hwc(0).unwrap().chunks(2) {
            assert_eq!(px, &[2.0, 1.0]);
        }
    }

    #[test]
    fn synthesis_matches_weighted_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (h, w, k1, c) = (2, 2, 4, 3);
        let f = fmap(h, w, c, &rand_vec(&mut rng, h * w * c));
        let rows: Vec<Vec<f64>> = (0..k1).map(|_| rand_vec(&mut rng, c)).collect();
        let g = parts(&rows);
        let v = probability_map(&f, &g, 1.7).unwrap();
        let vv = v.to_hwk(0).unwrap();
        let s = synthesize(&v, &g).unwrap().to_hwc(0).unwrap();
        for p in 0..h * w {
            for ch in 0..c {
                let oracle: f64 = (0..k1).map(|k| vv[p * k1 + k] * rows[k][ch]).sum();
                assert!((s[p * c + ch] - oracle).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn exchange_swaps_and_is_an_involution() {
        let a = parts(&[vec![1.0], vec![2.0]]);
        let b = parts(&[vec![3.0], vec![4.0]]);
        let (x, y) = exchange(&a, &b).unwrap();
        assert_eq!(x.rows(0).unwrap(), b.rows(0).unwrap());
        assert_eq!(y.rows(0).unwrap(), a.rows(0).unwrap());
        let (p, q) = exchange(&x, &y).unwrap();
        assert_eq!(p.rows(0).unwrap(), a.rows(0).unwrap());
        assert_eq!(q.rows(0).unwrap(), b.rows(0).unwrap());
        let (s, t) = exchange(&a, &a).unwrap();
        assert_eq!(s.rows(0).unwrap(), t.rows(0).unwrap());
        let c = parts(&[vec![1.0], vec![2.0], vec![3.0]]);
        assert!(exchange(&a, &c).is_err());
    }

    #[test]
    fn exchange_halves_swaps_views() {
        let t = Tensor::arange(0f64, 8.0, &Device::Cpu).unwrap().reshape((4, 2, 1)).unwrap();
        let g = PartRepresentations::new(t).unwrap();
        let x = exchange_halves(&g).unwrap();
        assert_eq!(x.rows(0).unwrap(), g.rows(2).unwrap());
        assert_eq!(x.rows(3).unwrap(), g.rows(1).unwrap());
    }

    #[test]
    fn logit_shift_and_temperature_doubling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = fmap(3, 3, 4, &rand_vec(&mut rng, 36));
        let g = parts(&(0..5).map(|_| rand_vec(&mut rng, 4)).collect::<Vec<_>>());
        let l = logits(&f, &g, 0.8).unwrap();
        let v = probability_from_logits(&l, 0.8).unwrap().to_hwk(0).unwrap();
        let shifted = probability_from_logits(&(l + 123.0).unwrap(), 0.8).unwrap().to_hwk(0).unwrap();
        for (a, b) in v.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
        let hot1 = one_hot(&probability_map(&f, &g, 0.8).unwrap()).unwrap();
        let hot2 = one_hot(&probability_map(&f, &g, 1.6).unwrap()).unwrap();
        assert_eq!(hot1.to_hwk(0).unwrap(), hot2.to_hwk(0).unwrap());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (h, w, c, k1) = (3, 2, 3, 3);
        let f = fmap(h, w, c, &rand_vec(&mut rng, h * w * c));
        let g0 = Tensor::from_vec(rand_vec(&mut rng, k1 * c), (1, k1, c), &Device::Cpu).unwrap();
        let weights = Tensor::from_vec(rand_vec(&mut rng, h * w * k1), (1, h, w, k1), &Device::Cpu).unwrap();
        let sweights = Tensor::from_vec(rand_vec(&mut rng, c * h * w), (1, c, h, w), &Device::Cpu).unwrap();
        let via_v = |g: &Tensor| -> Result<Tensor> {
            let v = probability_map(&f, &PartRepresentations::new(g.clone())?, 0.8)?;
            Ok((v.values() * &weights)?.sum_all()?)
        };
        let via_s = |g: &Tensor| -> Result<Tensor> {
            let gr = PartRepresentations::new(g.clone())?;
            let s = synthesize(&probability_map(&f, &gr, 0.8)?, &gr)?;
            Ok((s.values() * &sweights)?.sum_all()?)
        };
        for check in [
            check_gradient(via_v, &g0, 1e-5).unwrap(),
            check_gradient(via_s, &g0, 1e-5).unwrap(),
        ] {
            assert!(check.rel_error < 1e-4 && check.grad_norm > 0.0, "{check:?}");
        }
    }
}
