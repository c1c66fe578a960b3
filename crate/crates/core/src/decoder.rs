//! Convolutional decoder from a synthetic feature map back to an image.
//!
//! Layout: up, block, block, up, block, block, block, 3×3 conv, sigmoid.
//! Each block is 3×3 conv, ReLU, per-sample layer normalization.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{sigmoid, upsample_nearest2x, Conv2d, SampleNorm, Scope};
use crate::types::{ensure_finite, SyntheticFeatureMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Output widths of the five conv blocks.
    pub widths: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            widths: vec![256, 128, 128, 64, 64],
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 5 || self.widths.contains(&0) {
            return Err(invalid!("decoder needs five positive block widths, got {:?}", self.widths));
        }
        Ok(())
    }
}

/// An upsample precedes blocks 0 and 2.
const UPSAMPLE_BEFORE: [bool; 5] = [true, false, true, false, false];

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv2d,
    norm: SampleNorm,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    blocks: Vec<ConvBlock>,
    out: Conv2d,
}

impl Decoder {
    pub fn new(scope: &mut Scope<'_>, cfg: &DecoderConfig, in_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(5);
        let mut cin = in_channels;
        for (i, &cout) in cfg.widths.iter().enumerate() {
            let mut s = scope.sub(format!("block{i}"));
            blocks.push(ConvBlock {
                conv: Conv2d::new(&mut s.sub("conv"), cin, cout, 3, 1, 1, false)?,
                norm: SampleNorm::new(&mut s.sub("norm"), cout)?,
            });
            cin = cout;
        }
        let out = Conv2d::new(&mut scope.sub("out"), cin, 3, 3, 1, 1, true)?;
        Ok(Decoder { blocks, out })
    }

    /// Spatial upscale factor from feature grid to image.
    pub const SCALE: usize = 4;

    /// `(B, C, H, W)` to `(B, 3, 4H, 4W)` in `(0, 1)`.
    pub fn forward(&self, s: &Tensor) -> Result<Tensor> {
        ensure_finite(s, "synthetic feature map")?;
        let mut x = s.clone();
        for (blk, up) in self.blocks.iter().zip(UPSAMPLE_BEFORE) {
            if up {
                x = upsample_nearest2x(&x)?;
            }
            x = blk.norm.forward(&blk.conv.forward(&x)?.relu()?)?;
        }
        sigmoid(&self.out.forward(&x)?)
    }

    pub fn reconstruct(&self, s: &SyntheticFeatureMap) -> Result<Tensor> {
        self.forward(s.values())
    }
}
