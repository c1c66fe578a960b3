//! The trainable model: encoder, PartFormer, part embedding bank, decoder
//! and ArcFace anchors, all registered in one [`ParamStore`].

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{BackboneRegistry, Encoder, EncoderConfig};
use crate::error::{invalid, Result};
use crate::losses::ArcFaceBank;
use crate::nn::{Init, ParamStore, Scope};
use crate::partformer::{AttentionRecord, PartFormer, PartFormerConfig};
use crate::types::{FeatureMap, PartRepresentations};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input size `[height, width]`; images are resized to it.
    pub image_size: [usize; 2],
    /// Foreground parts per class.
    pub k_parts: usize,
    pub n_classes: usize,
    pub precision: Precision,
    pub encoder: EncoderConfig,
    pub partformer: PartFormerConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: [256, 256],
            k_parts: 4,
            n_classes: 1,
            precision: Precision::F32,
            encoder: EncoderConfig::default(),
            partformer: PartFormerConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.partformer.validate()?;
        self.decoder.validate()?;
        if self.k_parts == 0 || self.k_parts > 254 {
            return Err(invalid!("k_parts must be in 1..=254, got {}", self.k_parts));
        }
        if self.n_classes == 0 {
            return Err(invalid!("n_classes must be positive"));
        }
        let [h, w] = self.image_size;
        for (what, f) in [("encoder stride", self.encoder.total_stride), ("patch size", self.partformer.patch)] {
            if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
                return Err(invalid!("image_size {h}x{w} is not divisible by {what} {f}"));
            }
        }
        Ok(())
    }

    /// Feature-map grid `(H/s, W/s)`.
    pub fn feature_grid(&self) -> (usize, usize) {
        let s = self.encoder.total_stride;
        (self.image_size[0] / s, self.image_size[1] / s)
    }

    /// Decoder output size.
    pub fn recon_size(&self) -> (usize, usize) {
        let (h, w) = self.feature_grid();
        (h * Decoder::SCALE, w * Decoder::SCALE)
    }
}

/// Learnable part tokens: `K` rows per class plus one shared background row.
#[derive(Clone, Debug)]
pub struct EmbeddingBank {
    k: usize,
    classes: Vec<Tensor>,
    background: Tensor,
}

impl EmbeddingBank {
    pub fn new(scope: &mut Scope<'_>, k: usize, n_classes: usize, dim: usize) -> Result<Self> {
        if k == 0 || n_classes == 0 || dim == 0 {
            return Err(invalid!("embedding bank sizes must be positive"));
        }
        let classes = (0..n_classes)
            .map(|c| scope.param(&format!("class{c}"), &[k, dim], Init::TruncNormal(0.02)))
            .collect::<Result<_>>()?;
        let background = scope.param("background", &[1, dim], Init::TruncNormal(0.02))?;
        Ok(EmbeddingBank { k, classes, background })
    }

    pub fn k_parts(&self) -> usize {
        self.k
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// `(K + 1, d)`: the class rows followed by the background row.
    pub fn select(&self, class_id: usize) -> Result<Tensor> {
        let rows = self.classes.get(class_id).ok_or_else(|| {
            invalid!("class {class_id} out of range for a bank with {} classes", self.classes.len())
        })?;
        Ok(Tensor::cat(&[rows, &self.background], 0)?)
    }

    /// The full `(K·N_class + 1, d)` matrix; class `c` owns rows `cK..cK+K`.
    pub fn values(&self) -> Result<Tensor> {
        let mut all: Vec<&Tensor> = self.classes.iter().collect();
        all.push(&self.background);
        Ok(Tensor::cat(&all, 0)?)
    }
}

/// Builds a model on the CPU.
#[derive(Debug)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    partformer: PartFormer,
    bank: EmbeddingBank,
    decoder: Decoder,
    arcface: ArcFaceBank,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64, registry: &mut BackboneRegistry) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.precision.dtype(), Device::Cpu, seed);
        let c = cfg.encoder.out_channels;
        let (h, w) = (cfg.image_size[0], cfg.image_size[1]);
        let mut root = store.root();
        let encoder = Encoder::new(&mut root.sub("encoder"), &cfg.encoder, registry)?;
        let partformer = PartFormer::new(&mut root.sub("partformer"), &cfg.partformer, (h, w), c)?;
        let bank = EmbeddingBank::new(&mut root.sub("part_embed"), cfg.k_parts, cfg.n_classes, cfg.partformer.hidden)?;
        let decoder = Decoder::new(&mut root.sub("decoder"), &cfg.decoder, c)?;
        let arcface = ArcFaceBank::new(&mut root.sub("arcface"), cfg.k_parts, c)?;
        Ok(Model {
            cfg: cfg.clone(),
            store,
            encoder,
            partformer,
            bank,
            decoder,
            arcface,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn partformer(&self) -> &PartFormer {
        &self.partformer
    }

    pub fn bank(&self) -> &EmbeddingBank {
        &self.bank
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn arcface(&self) -> &ArcFaceBank {
        &self.arcface
    }

    pub fn features(&self, images: &Tensor, train: bool) -> Result<FeatureMap> {
        self.encoder.forward(images, train)
    }

    pub fn parts(
        &self,
        images: &Tensor,
        class_id: usize,
        record: bool,
    ) -> Result<(PartRepresentations, Option<Vec<AttentionRecord>>)> {
        self.partformer.forward(images, &self.bank.select(class_id)?, record)
    }

    /// Additive checksum of every trainable tensor, in name order.
    pub fn checksums(&self) -> Result<Vec<(String, f64)>> {
        self.store
            .trainable()
            .into_iter()
            .map(|(n, v)| {
                let s = v.as_tensor().to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
                Ok((n.to_string(), s))
            })
            .collect()
    }
}
