//! Transformer whose class token is replaced by `K + 1` part tokens.
//!
//! Part tokens attend over each other and over patch embeddings; their final
//! states pass through a shared projection MLP and become the part
//! representations `G`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{normalize_input, softmax_last, Conv2d, Init, LayerNorm, Linear, Scope, IMAGENET_MEAN, IMAGENET_STD};
use crate::types::{Image, PartRepresentations};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartFormerConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp_dim: usize,
    pub patch: usize,
}

impl Default for PartFormerConfig {
    fn default() -> Self {
        PartFormerConfig {
            layers: 6,
            heads: 8,
            hidden: 256,
            mlp_dim: 1024,
            patch: 16,
        }
    }
}

impl PartFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.mlp_dim == 0 || self.patch == 0 {
            return Err(invalid!("partformer sizes must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(invalid!(
                "hidden size {} is not divisible by {} heads",
                self.hidden,
                self.heads
            ));
        }
        Ok(())
    }
}

/// Part-token attention of one image: for every layer and head, the
/// attention rows of the `K + 1` part tokens over all `K + 1 + N` tokens
/// (part tokens first, then patches in row-major order).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    layers: usize,
    heads: usize,
    parts: usize,
    grid: (usize, usize),
    /// `layers × heads × parts × tokens`, row-major.
    weights: Vec<f64>,
}

impl AttentionRecord {
    pub fn new(
        layers: usize,
        heads: usize,
        parts: usize,
        grid: (usize, usize),
        weights: Vec<f64>,
    ) -> Result<Self> {
        let tokens = parts + grid.0 * grid.1;
        if layers == 0 || heads == 0 || parts < 2 || grid.0 * grid.1 == 0 {
            return Err(invalid!("attention record dimensions must be positive"));
        }
        if weights.len() != layers * heads * parts * tokens {
            return Err(invalid!("attention record length mismatch"));
        }
        for row in weights.chunks(tokens) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-5 || row.iter().any(|w| *w < 0.0) {
                return Err(invalid!("attention row sums to {s}, not 1"));
            }
        }
        Ok(AttentionRecord {
            layers,
            heads,
            parts,
            grid,
            weights,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn tokens(&self) -> usize {
        self.parts + self.grid.0 * self.grid.1
    }

    /// One attention row over all tokens.
    pub fn row(&self, layer: usize, head: usize, part: usize) -> &[f64] {
        let t = self.tokens();
        let start = ((layer * self.heads + head) * self.parts + part) * t;
        &self.weights[start..start + t]
    }
}

/// Mean over layers and heads of part `part_k`'s attention to the patches,
/// renormalized to sum to one over the patch grid (row-major `H_p × W_p`).
pub fn attention_map(record: &AttentionRecord, part_k: usize) -> Result<Vec<f64>> {
    if part_k >= record.parts {
        return Err(invalid!(
            "part index {part_k} out of range for {} parts",
            record.parts
        ));
    }
    let n = record.grid.0 * record.grid.1;
    let mut acc = vec![0.0; n];
    for l in 0..record.layers {
        for h in 0..record.heads {
            for (a, w) in acc.iter_mut().zip(&record.row(l, h, part_k)[record.parts..]) {
                *a += w;
            }
        }
    }
    let total: f64 = acc.iter().sum();
    if total > 0.0 {
        for a in &mut acc {
            *a /= total;
        }
    } else {
        acc.fill(1.0 / n as f64);
    }
    Ok(acc)
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(scope: &mut Scope<'_>, cfg: &PartFormerConfig) -> Result<Self> {
        let d = cfg.hidden;
        Ok(Block {
            norm1: LayerNorm::new(&mut scope.sub("norm1"), d)?,
            qkv: Linear::new(&mut scope.sub("qkv"), d, 3 * d)?,
            proj: Linear::new(&mut scope.sub("proj"), d, d)?,
            norm2: LayerNorm::new(&mut scope.sub("norm2"), d)?,
            fc1: Linear::new(&mut scope.sub("fc1"), d, cfg.mlp_dim)?,
            fc2: Linear::new(&mut scope.sub("fc2"), cfg.mlp_dim, d)?,
        })
    }

    /// Returns the updated tokens and the `(B, heads, T, T)` attention.
    fn forward(&self, x: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
        let (b, t, d) = x.dims3()?;
        let dh = d / heads;
        let qkv = self.qkv.forward(&self.norm1.forward(x)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * d, d)?
                .reshape((b, t, heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let att = softmax_last(&scores)?;
        let mixed = att
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?;
        let x = (x + self.proj.forward(&mixed)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        Ok(((x + h)?, att))
    }
}

#[derive(Clone, Debug)]
pub struct PartFormer {
    cfg: PartFormerConfig,
    grid: (usize, usize),
    patch_embed: Conv2d,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head1: Linear,
    head2: Linear,
}

impl PartFormer {
    /// `image_size` fixes the patch grid and the positional embedding.
    pub fn new(
        scope: &mut Scope<'_>,
        cfg: &PartFormerConfig,
        image_size: (usize, usize),
        out_channels: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch;
        if image_size.0 % p != 0 || image_size.1 % p != 0 {
            return Err(invalid!(
                "image size {}x{} is not divisible by patch size {p}",
                image_size.0,
                image_size.1
            ));
        }
        let grid = (image_size.0 / p, image_size.1 / p);
        let d = cfg.hidden;
        Ok(PartFormer {
            cfg: cfg.clone(),
            grid,
            patch_embed: Conv2d::new(&mut scope.sub("patch_embed"), 3, d, p, p, 0, true)?,
            pos_embed: scope.param("pos_embed", &[1, grid.0 * grid.1, d], Init::TruncNormal(0.02))?,
            blocks: (0..cfg.layers)
                .map(|i| Block::new(&mut scope.sub(format!("block{i}")), cfg))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(&mut scope.sub("norm"), d)?,
            head1: Linear::new(&mut scope.sub("head1"), d, d)?,
            head2: Linear::new(&mut scope.sub("head2"), d, out_channels)?,
        })
    }

    pub fn config(&self) -> &PartFormerConfig {
        &self.cfg
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Runs `(B, 3, H, W)` images with part tokens `(K+1, d)` or `(B, K+1, d)`.
    /// Returns `G` and, when `record` is set, one attention record per image.
    pub fn forward(
        &self,
        images: &Tensor,
        part_tokens: &Tensor,
        record: bool,
    ) -> Result<(PartRepresentations, Option<Vec<AttentionRecord>>)> {
        let (b, c, h, w) = images.dims4()?;
        let p = self.cfg.patch;
        if c != 3 || (h, w) != (self.grid.0 * p, self.grid.1 * p) {
            return Err(invalid!(
                "partformer expects (B, 3, {}, {}) images, got {:?}",
                self.grid.0 * p,
                self.grid.1 * p,
                images.shape()
            ));
        }
        let d = self.cfg.hidden;
        let tokens = match part_tokens.rank() {
            2 => part_tokens.unsqueeze(0)?.broadcast_as((b, part_tokens.dim(0)?, d))?.contiguous()?,
            3 if part_tokens.dim(0)? == b => part_tokens.clone(),
            _ => {
                return Err(invalid!(
                    "part tokens must be (K+1, {d}) or ({b}, K+1, {d}), got {:?}",
                    part_tokens.shape()
                ))
            }
        };
        let parts = tokens.dim(1)?;
        if tokens.dim(2)? != d || parts < 2 {
            return Err(invalid!("part tokens must have width {d} and at least 2 rows"));
        }
        let x = normalize_input(images, IMAGENET_MEAN, IMAGENET_STD)?;
        let n = self.grid.0 * self.grid.1;
        let patches = self
            .patch_embed
            .forward(&x)?
            .reshape((b, d, n))?
            .transpose(1, 2)?
            .broadcast_add(&self.pos_embed)?;
        let mut x = Tensor::cat(&[&tokens, &patches], 1)?;
        let mut atts = Vec::new();
        for blk in &self.blocks {
            let (nx, att) = blk.forward(&x, self.cfg.heads)?;
            x = nx;
            if record {
                atts.push(att.narrow(2, 0, parts)?.detach());
            }
        }
        let part_states = self.norm.forward(&x.narrow(1, 0, parts)?)?;
        let g = self.head2.forward(&self.head1.forward(&part_states)?.gelu()?)?;
        let records = if record {
            Some(self.collect_records(&atts, b, parts)?)
        } else {
            None
        };
        Ok((PartRepresentations::new(g)?, records))
    }

    fn collect_records(&self, atts: &[Tensor], b: usize, parts: usize) -> Result<Vec<AttentionRecord>> {
        // (L, B, heads, parts, T) -> per image
        let stacked = Tensor::stack(atts, 0)?.to_dtype(DType::F64)?;
        (0..b)
            .map(|i| {
                let w = stacked.narrow(1, i, 1)?.flatten_all()?.to_vec1::<f64>()?;
                AttentionRecord::new(self.blocks.len(), self.cfg.heads, parts, self.grid, w)
            })
            .collect()
    }

    /// Evaluation on a single image.
    pub fn extract_parts(
        &self,
        image: &Image,
        part_tokens: &Tensor,
        dtype: DType,
        device: &Device,
    ) -> Result<(PartRepresentations, AttentionRecord)> {
        image.check_divisible(self.cfg.patch, "patch size")?;
        let (g, rec) = self.forward(&image.to_tensor(dtype, device)?, part_tokens, true)?;
        let rec = rec.and_then(|mut r| r.pop()).ok_or_else(|| invalid!("no attention recorded"))?;
        Ok((g, rec))
    }
}
