//! Dense feature encoders: a trainable residual conv stack, or a frozen
//! backbone followed by trainable reduction blocks.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::archive::read_archive;
use crate::error::{invalid, Error, Result};
use crate::nn::{fixed_conv, normalize_input, BatchNorm2d, Conv2d, SampleNorm, Scope, IMAGENET_MEAN, IMAGENET_STD};
use crate::types::{FeatureMap, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Scratch,
    FrozenBackbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub out_channels: usize,
    /// Image to feature-map downscale factor. Scratch mode spends it on
    /// leading stride-2 stages, so it must be a power of two.
    pub total_stride: usize,
    /// Widths of the four residual stages (scratch mode).
    pub stage_channels: Vec<usize>,
    /// Backbone descriptor (frozen mode).
    pub backbone: String,
    pub reduction_blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            mode: EncoderMode::Scratch,
            out_channels: 256,
            total_stride: 4,
            stage_channels: vec![64, 64, 128, 256],
            backbone: "toy_frozen".into(),
            reduction_blocks: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(invalid!("encoder out_channels must be positive"));
        }
        if self.total_stride == 0 || !self.total_stride.is_power_of_two() {
            return Err(invalid!("total_stride must be a power of two, got {}", self.total_stride));
        }
        if self.mode == EncoderMode::Scratch {
            if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
                return Err(invalid!("stage_channels must be non-empty and positive"));
            }
            if self.stage_strides().iter().product::<usize>() != self.total_stride {
                return Err(invalid!(
                    "{} stages cannot reach total_stride {}",
                    self.stage_channels.len(),
                    self.total_stride
                ));
            }
        } else if self.reduction_blocks == 0 {
            return Err(invalid!("frozen mode needs at least one reduction block"));
        }
        Ok(())
    }

    /// Per-stage strides: 2 for the leading stages until `total_stride` is reached, then 1.
    pub fn stage_strides(&self) -> Vec<usize> {
        let halvings = self.total_stride.trailing_zeros() as usize;
        (0..self.stage_channels.len())
            .map(|i| if i < halvings { 2 } else { 1 })
            .collect()
    }
}

/// A pretrained network consumed with fixed weights.
pub trait FrozenBackbone: Send + Sync + fmt::Debug {
    fn descriptor(&self) -> &str;
    fn stride(&self) -> usize;
    fn out_channels(&self) -> usize;
    /// `(B, 3, H, W)` images in `[0, 1]` to `(B, C_b, H/stride, W/stride)`, detached.
    fn forward(&self, images: &Tensor) -> Result<Tensor>;
    fn tensors(&self) -> Vec<(String, Tensor)>;
}

/// Plain conv/ReLU stack with fixed weights and ImageNet input normalization.
#[derive(Debug)]
pub struct ConvBackbone {
    descriptor: String,
    layers: Vec<Conv2d>,
}

pub const TOY_BACKBONE_SEED: u64 = 0xba_c4b0_e5;

impl ConvBackbone {
    /// Seeded random stand-in for a pretrained network, stride 8.
    pub fn toy(dtype: DType, device: &Device) -> Result<Self> {
        let spec = [(3, 16), (16, 32), (32, 64)];
        let layers = spec
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| fixed_conv(TOY_BACKBONE_SEED, &format!("layer{i}"), cin, cout, 3, 2, dtype, device))
            .collect::<Result<_>>()?;
        Ok(ConvBackbone {
            descriptor: "toy_frozen".into(),
            layers,
        })
    }

    /// Loads `layers.{i}.weight` / `layers.{i}.bias` and `meta.strides` from an archive.
    pub fn from_archive(descriptor: &str, path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let archive = read_archive(path, device)?;
        let strides: Vec<usize> = serde_json::from_value(archive.meta["strides"].clone())
            .map_err(|e| Error::Config(format!("backbone archive {} needs meta.strides: {e}", path.display())))?;
        let mut layers = Vec::with_capacity(strides.len());
        for (i, stride) in strides.iter().enumerate() {
            let w = archive.get(&format!("layers.{i}.weight"))?.to_dtype(dtype)?;
            let b = match archive.tensors.get(&format!("layers.{i}.bias")) {
                Some(b) => Some(b.to_dtype(dtype)?),
                None => None,
            };
            let k = w.dim(2)?;
            layers.push(Conv2d::from_tensors(w, b, *stride, k / 2));
        }
        if layers.is_empty() {
            return Err(Error::Config(format!("backbone archive {} has no layers", path.display())));
        }
        Ok(ConvBackbone {
            descriptor: descriptor.to_string(),
            layers,
        })
    }
}

impl FrozenBackbone for ConvBackbone {
    fn descriptor(&self) -> &str {
        &self.descriptor
    }

    fn stride(&self) -> usize {
        self.layers.iter().map(Conv2d::stride).product()
    }

    fn out_channels(&self) -> usize {
        self.layers.last().map(Conv2d::out_channels).unwrap_or(3)
    }

    fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut h = normalize_input(&images.detach(), IMAGENET_MEAN, IMAGENET_STD)?;
        for l in &self.layers {
            h = l.forward(&h)?.relu()?;
        }
        Ok(h.detach())
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.weight"), l.weight().clone()));
            if let Some(b) = l.bias() {
                out.push((format!("layers.{i}.bias"), b.clone()));
            }
        }
        out
    }
}

/// Directory holding backbone and extractor weights: `$PARTDISCOVER_CACHE`,
/// else `$HOME/.cache/partdiscover`.
pub fn cache_dir() -> PathBuf {
    if let Some(p) = std::env::var_os("PARTDISCOVER_CACHE") {
        return PathBuf::from(p);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_default();
    home.join(".cache").join("partdiscover")
}

/// Named frozen backbones available to encoder configs.
#[derive(Debug)]
pub struct BackboneRegistry {
    dtype: DType,
    device: Device,
    entries: BTreeMap<String, Arc<dyn FrozenBackbone>>,
}

impl BackboneRegistry {
    /// Empty registry.
    pub fn new(dtype: DType, device: Device) -> Self {
        BackboneRegistry {
            dtype,
            device,
            entries: BTreeMap::new(),
        }
    }

    /// Registry with `toy_frozen` registered.
    pub fn with_builtins(dtype: DType, device: Device) -> Result<Self> {
        let mut r = Self::new(dtype, device);
        let (dt, dev) = (r.dtype, r.device.clone());
        r.register("toy_frozen", move || Ok(Arc::new(ConvBackbone::toy(dt, &dev)?)))?;
        Ok(r)
    }

    /// Runs `loader` and stores the result under `descriptor`.
    pub fn register<F>(&mut self, descriptor: &str, loader: F) -> Result<Arc<dyn FrozenBackbone>>
    where
        F: FnOnce() -> Result<Arc<dyn FrozenBackbone>>,
    {
        if self.entries.contains_key(descriptor) {
            return Err(Error::Config(format!("backbone '{descriptor}' is already registered")));
        }
        let b = loader()?;
        self.entries.insert(descriptor.to_string(), b.clone());
        Ok(b)
    }

    /// Registers a conv backbone stored in a named-tensor archive.
    pub fn register_archive(&mut self, descriptor: &str, path: &Path) -> Result<Arc<dyn FrozenBackbone>> {
        let (dt, dev) = (self.dtype, self.device.clone());
        let path = path.to_path_buf();
        let name = descriptor.to_string();
        self.register(descriptor, move || {
            if !path.exists() {
                return Err(Error::io(
                    &path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "backbone weight file not found"),
                ));
            }
            Ok(Arc::new(ConvBackbone::from_archive(&name, &path, dt, &dev)?))
        })
    }

    /// Looks up `descriptor`, falling back to `<cache_dir>/<descriptor>.pdar`.
    pub fn resolve(&mut self, descriptor: &str) -> Result<Arc<dyn FrozenBackbone>> {
        if let Some(b) = self.entries.get(descriptor) {
            return Ok(b.clone());
        }
        let path = cache_dir().join(format!("{descriptor}.pdar"));
        if path.exists() {
            return self.register_archive(descriptor, &path);
        }
        Err(Error::Config(format!(
            "unknown backbone '{descriptor}' (not registered and no weights at {})",
            path.display()
        )))
    }

    pub fn descriptors(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }
}

/// Two 3×3 convs with a residual shortcut, per-sample normalization.
#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    norm1: SampleNorm,
    conv2: Conv2d,
    norm2: SampleNorm,
    shortcut: Option<(Conv2d, SampleNorm)>,
}

impl BasicBlock {
    fn new(scope: &mut Scope<'_>, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let shortcut = if cin != cout || stride != 1 {
            Some((
                Conv2d::new(&mut scope.sub("down"), cin, cout, 1, stride, 0, false)?,
                SampleNorm::new(&mut scope.sub("down_norm"), cout)?,
            ))
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: Conv2d::new(&mut scope.sub("conv1"), cin, cout, 3, stride, 1, false)?,
            norm1: SampleNorm::new(&mut scope.sub("norm1"), cout)?,
            conv2: Conv2d::new(&mut scope.sub("conv2"), cout, cout, 3, 1, 1, false)?,
            norm2: SampleNorm::new(&mut scope.sub("norm2"), cout)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        let skip = match &self.shortcut {
            Some((c, n)) => n.forward(&c.forward(x)?)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Clone, Debug)]
struct ReductionBlock {
    conv: Conv2d,
    norm: BatchNorm2d,
}

#[derive(Clone, Debug)]
enum Body {
    Scratch { stages: Vec<BasicBlock>, proj: Conv2d },
    Frozen { backbone: Arc<dyn FrozenBackbone>, blocks: Vec<ReductionBlock> },
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    body: Body,
}

impl Encoder {
    /// Registers parameters under `scope`. Frozen mode resolves the backbone
    /// in `registry`; its weights never enter the parameter store.
    pub fn new(scope: &mut Scope<'_>, cfg: &EncoderConfig, registry: &mut BackboneRegistry) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.out_channels;
        let body = match cfg.mode {
            EncoderMode::Scratch => {
                let mut stages = Vec::new();
                let mut cin = 3;
                for (i, (&cout, stride)) in cfg.stage_channels.iter().zip(cfg.stage_strides()).enumerate() {
                    stages.push(BasicBlock::new(&mut scope.sub(format!("stage{i}")), cin, cout, stride)?);
                    cin = cout;
                }
                let proj = Conv2d::new(&mut scope.sub("proj"), cin, c, 1, 1, 0, true)?;
                Body::Scratch { stages, proj }
            }
            EncoderMode::FrozenBackbone => {
                let backbone = registry.resolve(&cfg.backbone)?;
                if backbone.stride() != cfg.total_stride {
                    return Err(Error::Config(format!(
                        "backbone '{}' has stride {} but total_stride is {}",
                        cfg.backbone,
                        backbone.stride(),
                        cfg.total_stride
                    )));
                }
                let mut blocks = Vec::new();
                let mut cin = backbone.out_channels();
                for i in 0..cfg.reduction_blocks {
                    let mut s = scope.sub(format!("reduce{i}"));
                    blocks.push(ReductionBlock {
                        conv: Conv2d::new(&mut s.sub("conv"), cin, c, 3, 1, 1, true)?,
                        norm: BatchNorm2d::new(&mut s.sub("norm"), c)?,
                    });
                    cin = c;
                }
                Body::Frozen { backbone, blocks }
            }
        };
        Ok(Encoder { cfg: cfg.clone(), body })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn stride(&self) -> usize {
        self.cfg.total_stride
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.out_channels
    }

    pub fn backbone(&self) -> Option<&Arc<dyn FrozenBackbone>> {
        match &self.body {
            Body::Frozen { backbone, .. } => Some(backbone),
            Body::Scratch { .. } => None,
        }
    }

    /// `(B, 3, H, W)` images to a `(B, C, H/s, W/s)` feature map. `train`
    /// selects batch statistics in the reduction blocks.
    pub fn forward(&self, images: &Tensor, train: bool) -> Result<FeatureMap> {
        let (_, ch, h, w) = images.dims4()?;
        let s = self.cfg.total_stride;
        if ch != 3 {
            return Err(invalid!("expected RGB input, got {ch} channels"));
        }
        if h % s != 0 || w % s != 0 {
            return Err(invalid!("image size {h}x{w} is not divisible by encoder stride {s}"));
        }
        let out = match &self.body {
            Body::Scratch { stages, proj } => {
                let mut x = normalize_input(images, IMAGENET_MEAN, IMAGENET_STD)?;
                for st in stages {
                    x = st.forward(&x)?;
                }
                proj.forward(&x)?
            }
            Body::Frozen { backbone, blocks } => {
                let mut x = backbone.forward(images)?;
                for b in blocks {
                    x = b.norm.forward(&b.conv.forward(&x)?.relu()?, train)?;
                }
                x
            }
        };
        FeatureMap::new(out)
    }

    /// Evaluation-mode encoding of a single image.
    pub fn encode(&self, image: &Image, dtype: DType, device: &Device) -> Result<FeatureMap> {
        image.check_divisible(self.cfg.total_stride, "encoder stride")?;
        self.forward(&image.to_tensor(dtype, device)?, false)
    }
}
