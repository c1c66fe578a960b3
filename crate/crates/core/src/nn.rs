//! Parameter storage and the handful of layers the networks are built from.
//!
//! Parameters are candle [`Var`]s registered under dotted names. Initial
//! values come from a ChaCha stream seeded by the store seed and the
//! parameter name, so initialization does not depend on construction order.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-bound, bound)`.
    Uniform(f64),
    Normal(f64),
    /// Normal with the given std, resampled outside two std.
    TruncNormal(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Persistent state that the optimizer never touches (running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry {
    var: Var,
    kind: ParamKind,
}

/// All named parameters of a model.
#[derive(Debug)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    seed: u64,
    entries: BTreeMap<String, Entry>,
}

pub(crate) fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub(crate) fn init_values(init: Init, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
        Init::Normal(s) => (0..n)
            .map(|_| s * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        Init::TruncNormal(s) => (0..n)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break s * z;
                }
            })
            .collect(),
    }
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device, seed: u64) -> Self {
        ParamStore {
            device,
            dtype,
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init, kind: ParamKind) -> Result<Var> {
        if self.entries.contains_key(&name) {
            return Err(invalid!("parameter {name} registered twice"));
        }
        let n = shape.iter().product();
        let values = init_values(init, n, self.seed ^ name_hash(&name));
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.insert(
            name,
            Entry {
                var: var.clone(),
                kind,
            },
        );
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(&str, &Var)> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(k, e)| (k.as_str(), &e.var))
            .collect()
    }

    /// Every parameter and buffer in name order.
    pub fn all(&self) -> Vec<(&str, &Var, ParamKind)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.var, e.kind))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Overwrites a parameter in place; shape must match.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        if e.var.dims() != value.dims() {
            return Err(invalid!(
                "shape mismatch for {name}: have {:?}, got {:?}",
                e.var.dims(),
                value.dims()
            ));
        }
        e.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.var.elem_count()).sum()
    }
}

/// A name prefix into a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn sub(&mut self, name: impl std::fmt::Display) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full(name);
        Ok(self
            .store
            .create(full, shape, init, ParamKind::Trainable)?
            .as_tensor()
            .clone())
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = self.full(name);
        self.store.create(full, shape, init, ParamKind::Buffer)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Fixed weights drawn from a seeded He-normal stream.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fixed_conv(
    seed: u64,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    dtype: DType,
    device: &Device,
) -> Result<Conv2d> {
    let fan_in = (in_ch * kernel * kernel) as f64;
    let n = out_ch * in_ch * kernel * kernel;
    let w = init_values(Init::Normal((2.0 / fan_in).sqrt()), n, seed ^ name_hash(name));
    let w = Tensor::from_vec(w, (out_ch, in_ch, kernel, kernel), device)?.to_dtype(dtype)?;
    Ok(Conv2d::from_tensors(w, None, stride, kernel / 2))
}

/// Per-channel `(x − mean) / std` of a `(B, 3, H, W)` batch.
pub fn normalize_input(x: &Tensor, mean: [f64; 3], std: [f64; 3]) -> Result<Tensor> {
    let dev = x.device();
    let m = Tensor::new(&mean, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
    let s = Tensor::new(&std, dev)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
    Ok(x.broadcast_sub(&m)?.broadcast_div(&s)?)
}

/// Nearest-neighbour ×2 upsampling of `(B, C, H, W)`, built from broadcast
/// and reshape so gradients accumulate correctly.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &mut Scope<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = scope.param("weight", &[out_ch, in_ch, kernel, kernel], Init::Uniform(bound))?;
        let bias = if bias {
            Some(scope.param("bias", &[out_ch], Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Builds a convolution from fixed tensors (frozen networks).
    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Linear {
            weight: scope.param("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: scope.param("bias", &[out_dim], Init::Uniform(bound))?,
        })
    }

    /// Applies `x·Wᵀ + b` over the last dimension of any-rank input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| invalid!("linear input must have rank >= 1"))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x
            .reshape((rows, in_dim))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out)?)
    }
}

/// Normalization over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &mut Scope<'_>, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: scope.param("gamma", &[dim], Init::Ones)?,
            beta: scope.param("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Per-sample layer statistics over `(C, H, W)` with a per-channel affine.
#[derive(Clone, Debug)]
pub struct SampleNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl SampleNorm {
    pub fn new(scope: &mut Scope<'_>, channels: usize) -> Result<Self> {
        Ok(SampleNorm {
            gamma: scope.param("gamma", &[channels], Init::Ones)?,
            beta: scope.param("beta", &[channels], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let flat = x.reshape((b, c * h * w))?;
        let mean = flat.mean_keepdim(1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Batch-statistics normalization with running estimates for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(scope: &mut Scope<'_>, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: scope.param("gamma", &[channels], Init::Ones)?,
            beta: scope.param("beta", &[channels], Init::Zeros)?,
            running_mean: scope.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: scope.buffer("running_var", &[channels], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let per_channel = x.transpose(0, 1)?.reshape((c, b * h * w))?;
            let mean = per_channel.mean_keepdim(1)?;
            let var = per_channel.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            let (mean, var) = (mean.flatten_all()?, var.flatten_all()?);
            let m = self.momentum;
            let n = (b * h * w) as f64;
            let unbiased = if n > 1.0 { (var.detach() * (n / (n - 1.0)))? } else { var.detach() };
            self.running_mean.set(
                &((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?,
            )?;
            self.running_var
                .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().detach(),
                self.running_var.as_tensor().detach(),
            )
        };
        let shape = (1, c, 1, 1);
        let normed = x
            .broadcast_sub(&mean.reshape(shape)?)?
            .broadcast_div(&(var + self.eps)?.sqrt()?.reshape(shape)?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}
