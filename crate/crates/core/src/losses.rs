//! Training constraints: concentration, area, angular-margin consistency,
//! perceptual and MSE reconstruction, and their weighted total.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::archive::read_archive;
use crate::error::{invalid, Error, Result};
use crate::geometry::coordinate_grid;
use crate::nn::{fixed_conv, log_softmax_last, normalize_input, Conv2d, Init, Scope, IMAGENET_MEAN, IMAGENET_STD};
use crate::types::ProbabilityMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reconstruction {
    Perceptual,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_con: f64,
    pub lambda_area: f64,
    pub lambda_sc: f64,
    /// Area prior as a fraction of the probability-map grid: `α = alpha_frac·H·W`.
    pub alpha_frac: f64,
    pub arc_scale: f64,
    pub arc_margin: f64,
    pub eps: f64,
    pub reconstruction: Reconstruction,
    /// Perceptual extractor descriptor: `toy_perceptual`, `identity` or `vgg19`.
    pub perceptual: String,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_con: 0.5,
            lambda_area: 0.5,
            lambda_sc: 0.01,
            alpha_frac: 0.5,
            arc_scale: 20.0,
            arc_margin: 0.5,
            eps: 1e-6,
            reconstruction: Reconstruction::Perceptual,
            perceptual: "toy_perceptual".into(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_con", self.lambda_con),
            ("lambda_area", self.lambda_area),
            ("lambda_sc", self.lambda_sc),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid!("{name} must be a finite non-negative weight, got {v}"));
            }
        }
        if !(self.alpha_frac > 0.0 && self.alpha_frac.is_finite()) {
            return Err(invalid!("alpha_frac must be positive, got {}", self.alpha_frac));
        }
        if !(self.arc_scale > 0.0 && self.arc_scale.is_finite()) {
            return Err(invalid!("arc_scale must be positive, got {}", self.arc_scale));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.arc_margin) {
            return Err(invalid!("arc_margin must lie in [0, pi/2), got {}", self.arc_margin));
        }
        if !(self.eps > 0.0) {
            return Err(invalid!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }

    /// Absolute area prior for an `h × w` probability map.
    pub fn alpha(&self, h: usize, w: usize) -> f64 {
        self.alpha_frac * (h * w) as f64
    }
}

/// Per-part masses `z_k = Σ_ij V[i,j,k] + ε` of a `(B, N, K+1)` map, shape `(B, K+1)`.
fn masses(v_flat: &Tensor, eps: f64) -> Result<Tensor> {
    Ok((v_flat.sum(1)? + eps)?)
}

/// Concentration loss on a raw `(B, H·W, K+1)` tensor, averaged over the batch.
/// Only the first `K` (foreground) channels contribute.
pub fn concentration_raw(v_flat: &Tensor, grid: (usize, usize), eps: f64) -> Result<Tensor> {
    let (b, n, k1) = v_flat.dims3()?;
    if n != grid.0 * grid.1 {
        return Err(invalid!("grid {grid:?} does not match {n} pixels"));
    }
    let k = k1 - 1;
    let fg = v_flat.narrow(2, 0, k)?;
    let z = masses(&fg, eps)?.unsqueeze(1)?; // (B, 1, K)
    let w = fg.broadcast_div(&z)?;
    let (rows, cols) = coordinate_grid(grid.0, grid.1)?.tensors(v_flat.dtype(), v_flat.device())?;
    let cr = w.broadcast_mul(&rows)?.sum_keepdim(1)?;
    let cc = w.broadcast_mul(&cols)?.sum_keepdim(1)?;
    let d2 = (rows.broadcast_sub(&cr)?.sqr()? + cols.broadcast_sub(&cc)?.sqr()?)?;
    Ok((d2 * w)?.sum_all()?.affine(1.0 / b as f64, 0.0)?)
}

/// Second spatial moment of each foreground part about its own centroid,
/// summed over parts and averaged over the batch.
pub fn concentration_loss(v: &ProbabilityMap, eps: f64) -> Result<Tensor> {
    v.check_normalized(1e-5)?;
    concentration_raw(&v.flat()?, v.grid(), eps)
}

/// Area loss on a raw `(B, H·W, K+1)` tensor: `Σ_k 1/(1 + z_k/α)` over all
/// `K + 1` channels, averaged over the batch.
pub fn area_raw(v_flat: &Tensor, alpha: f64, eps: f64) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid!("alpha must be positive, got {alpha}"));
    }
    let b = v_flat.dim(0)?;
    let z = masses(v_flat, eps)?;
    Ok(z.affine(1.0 / alpha, 1.0)?.recip()?.sum_all()?.affine(1.0 / b as f64, 0.0)?)
}

pub fn area_loss(v: &ProbabilityMap, alpha: f64, eps: f64) -> Result<Tensor> {
    v.check_normalized(1e-5)?;
    area_raw(&v.flat()?, alpha, eps)
}

/// `K` learnable anchor vectors shared across samples.
#[derive(Clone, Debug)]
pub struct ArcFaceBank {
    weight: Tensor,
}

impl ArcFaceBank {
    pub fn new(scope: &mut Scope<'_>, k: usize, channels: usize) -> Result<Self> {
        Ok(ArcFaceBank {
            weight: scope.param("weight", &[k, channels], Init::Normal(1.0))?,
        })
    }

    pub fn from_tensor(weight: Tensor) -> Self {
        ArcFaceBank { weight }
    }

    /// `(K, C)`.
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

/// Row-normalizes `(…, K, C)`, failing on zero rows.
fn normalize_rows(x: &Tensor, what: &str) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let flat = norm.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let k = x.dim(D::Minus2)?;
    if let Some(i) = flat.iter().position(|n| !(*n > 0.0) || !n.is_finite()) {
        return Err(Error::Numeric(format!(
            "{what} row for part {} has zero or non-finite norm",
            i % k
        )));
    }
    Ok(x.broadcast_div(&norm)?)
}

/// Angular-margin softmax tying foreground representation `k` to anchor `k`.
///
/// `g_fg` is `(B, K, C)` or `(K, C)`; the loss is averaged over parts and batch.
pub fn semantic_consistency_loss(g_fg: &Tensor, bank: &ArcFaceBank, s: f64, m: f64) -> Result<Tensor> {
    let g = match g_fg.rank() {
        2 => g_fg.unsqueeze(0)?,
        3 => g_fg.clone(),
        r => return Err(invalid!("foreground rows must be (B, K, C) or (K, C), got rank {r}")),
    };
    let (b, k, c) = g.dims3()?;
    let (kw, cw) = bank.weight.dims2()?;
    if (kw, cw) != (k, c) {
        return Err(invalid!("anchor bank is {kw}x{cw} but foreground rows are {k}x{c}"));
    }
    if k < 2 {
        return Err(invalid!("the angular-margin loss needs K >= 2, got {k}"));
    }
    let gn = normalize_rows(&g, "part representation")?;
    let wn = normalize_rows(&bank.weight, "anchor")?;
    // cos[b, k, t] = <g_k, W_t>
    let cos = gn.reshape((b * k, c))?.matmul(&wn.t()?)?.reshape((b, k, k))?;
    let eye = Tensor::eye(k, g.dtype(), g.device())?.unsqueeze(0)?;
    let sin = cos
        .sqr()?
        .affine(-1.0, 1.0)?
        .clamp(1e-12, 1.0)?
        .sqrt()?;
    let cos_margin = ((&cos * m.cos())? - (sin * m.sin())?)?;
    let logits = (cos.broadcast_mul(&eye.affine(-1.0, 1.0)?)? + cos_margin.broadcast_mul(&eye)?)?;
    let logp = log_softmax_last(&(logits * s)?)?;
    Ok(logp.broadcast_mul(&eye)?.sum_all()?.affine(-1.0 / (b * k) as f64, 0.0)?)
}

/// Frozen feature extractor for the perceptual loss.
pub trait PerceptualExtractor: Send + Sync + std::fmt::Debug {
    fn descriptor(&self) -> &str;
    /// Intermediate features of a `(B, 3, H, W)` batch in `[0, 1]`.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// `Φ(x) = x` as a single stage.
#[derive(Debug, Default)]
pub struct IdentityExtractor;

impl PerceptualExtractor for IdentityExtractor {
    fn descriptor(&self) -> &str {
        "identity"
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

/// Conv/ReLU stack with fixed weights; a feature is taken after every stage.
#[derive(Debug)]
pub struct ConvStackExtractor {
    descriptor: String,
    stages: Vec<Vec<Layer>>,
    normalize: Option<([f64; 3], [f64; 3])>,
}

#[derive(Debug)]
enum Layer {
    ConvRelu(Conv2d),
    MaxPool2,
}

pub const TOY_PERCEPTUAL_SEED: u64 = 0x7e11_5eed;

impl ConvStackExtractor {
    /// Seeded random stand-in for a pretrained network: four stages, the
    /// first at full resolution and the rest each halving it.
    pub fn toy(dtype: DType, device: &Device) -> Result<Self> {
        let widths = [(3, 16, 1), (16, 32, 2), (32, 32, 2), (32, 64, 2)];
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| {
                Ok(vec![Layer::ConvRelu(fixed_conv(
                    TOY_PERCEPTUAL_SEED,
                    &format!("stage{i}"),
                    cin,
                    cout,
                    3,
                    stride,
                    dtype,
                    device,
                )?)])
            })
            .collect::<Result<_>>()?;
        Ok(ConvStackExtractor {
            descriptor: "toy_perceptual".into(),
            stages,
            normalize: None,
        })
    }

    /// VGG19 feature layers in torchvision naming (`features.{i}.weight`).
    /// Features are taken at the end of each of the first four blocks
    /// (relu1_2, relu2_2, relu3_4, relu4_4). Widths are read from the archive.
    pub fn vgg19(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let archive = read_archive(path, device)?;
        let blocks: [&[usize]; 4] = [&[0, 2], &[5, 7], &[10, 12, 14, 16], &[19, 21, 23, 25]];
        let mut stages = Vec::new();
        for (bi, convs) in blocks.iter().enumerate() {
            let mut stage = Vec::new();
            if bi > 0 {
                stage.push(Layer::MaxPool2);
            }
            for &idx in convs.iter() {
                let w = archive.get(&format!("features.{idx}.weight"))?.to_dtype(dtype)?;
                let b = archive.get(&format!("features.{idx}.bias"))?.to_dtype(dtype)?;
                let kernel = w.dim(2)?;
                stage.push(Layer::ConvRelu(Conv2d::from_tensors(w, Some(b), 1, kernel / 2)));
            }
            stages.push(stage);
        }
        Ok(ConvStackExtractor {
            descriptor: "vgg19".into(),
            stages,
            normalize: Some((IMAGENET_MEAN, IMAGENET_STD)),
        })
    }
}

impl PerceptualExtractor for ConvStackExtractor {
    fn descriptor(&self) -> &str {
        &self.descriptor
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = match self.normalize {
            Some((m, s)) => normalize_input(x, m, s)?,
            None => x.clone(),
        };
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for layer in stage {
                h = match layer {
                    Layer::ConvRelu(conv) => conv.forward(&h)?.relu()?,
                    Layer::MaxPool2 => h.max_pool2d(2)?,
                };
            }
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Resolves a perceptual extractor by descriptor. `vgg19` is read from
/// `$PARTDISCOVER_CACHE/vgg19.pdar`.
pub fn perceptual_extractor(
    descriptor: &str,
    dtype: DType,
    device: &Device,
) -> Result<Arc<dyn PerceptualExtractor>> {
    match descriptor {
        "toy_perceptual" => Ok(Arc::new(ConvStackExtractor::toy(dtype, device)?)),
        "identity" => Ok(Arc::new(IdentityExtractor)),
        "vgg19" => {
            let path = crate::encoder::cache_dir().join("vgg19.pdar");
            if !path.exists() {
                return Err(Error::io(
                    &path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "vgg19 weights not found"),
                ));
            }
            Ok(Arc::new(ConvStackExtractor::vgg19(&path, dtype, device)?))
        }
        other => Err(Error::Config(format!("unknown perceptual extractor '{other}'"))),
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(invalid!(
            "reconstruction shape {:?} does not match target {:?}",
            b.shape(),
            a.shape()
        ));
    }
    Ok(())
}

/// `Σ_stages mean|Φ(x) − Φ(y)|` for one pair of batches.
pub fn perceptual_distance(x: &Tensor, y: &Tensor, phi: &dyn PerceptualExtractor) -> Result<Tensor> {
    check_same_shape(x, y)?;
    let fx = phi.features(x)?;
    let fy = phi.features(y)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fx.iter().zip(&fy) {
        let d = (a - b)?.abs()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    total.ok_or_else(|| invalid!("perceptual extractor returned no features"))
}

/// Perceptual loss summed over both (input, reconstruction) pairs.
pub fn perceptual_loss(
    inputs: (&Tensor, &Tensor),
    recons: (&Tensor, &Tensor),
    phi: &dyn PerceptualExtractor,
) -> Result<Tensor> {
    Ok((perceptual_distance(inputs.0, recons.0, phi)? + perceptual_distance(inputs.1, recons.1, phi)?)?)
}

/// Mean squared pixel error over both pairs together.
pub fn mse_reconstruction_loss(inputs: (&Tensor, &Tensor), recons: (&Tensor, &Tensor)) -> Result<Tensor> {
    check_same_shape(inputs.0, recons.0)?;
    check_same_shape(inputs.1, recons.1)?;
    let n = (inputs.0.elem_count() + inputs.1.elem_count()) as f64;
    let s = ((inputs.0 - recons.0)?.sqr()?.sum_all()? + (inputs.1 - recons.1)?.sqr()?.sum_all()?)?;
    Ok(s.affine(1.0 / n, 0.0)?)
}

/// Unweighted component losses (scalars).
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub rec: Tensor,
    pub sc: Tensor,
    pub con: Tensor,
    pub area: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub sc: f64,
    pub con: f64,
    pub area: f64,
    /// `λ·term` contributions.
    pub weighted_sc: f64,
    pub weighted_con: f64,
    pub weighted_area: f64,
    pub total: f64,
}

fn scalar(t: &Tensor, term: &str) -> Result<f64> {
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    match v.as_slice() {
        [x] if x.is_finite() => Ok(*x),
        [x] => Err(Error::Numeric(format!("loss term {term} is {x}"))),
        _ => Err(invalid!("loss term {term} is not a scalar")),
    }
}

/// `L = L_rec + λ_sc·L_sc + λ_con·L_con + λ_area·L_area`.
pub fn total_loss(terms: &LossTerms, cfg: &LossConfig) -> Result<(Tensor, LossBreakdown)> {
    let rec = scalar(&terms.rec, "rec")?;
    let sc = scalar(&terms.sc, "sc")?;
    let con = scalar(&terms.con, "con")?;
    let area = scalar(&terms.area, "area")?;
    let total = (((&terms.rec + (&terms.sc * cfg.lambda_sc)?)? + (&terms.con * cfg.lambda_con)?)?
        + (&terms.area * cfg.lambda_area)?)?
        .reshape(())?;
    let breakdown = LossBreakdown {
        rec,
        sc,
        con,
        area,
        weighted_sc: cfg.lambda_sc * sc,
        weighted_con: cfg.lambda_con * con,
        weighted_area: cfg.lambda_area * area,
        total: scalar(&total, "total")?,
    };
    Ok((total, breakdown))
}
