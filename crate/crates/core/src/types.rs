//! Semantic tensor types shared across the crate.
//!
//! Images are plain CPU buffers (planar RGB, values in `[0, 1]`). Everything
//! produced by a network is a batched candle [`Tensor`] wrapped in a newtype
//! that pins down its layout:
//!
//! | type                    | layout            |
//! |-------------------------|-------------------|
//! | [`FeatureMap`]          | `(B, C, H, W)`    |
//! | [`PartRepresentations`] | `(B, K + 1, C)`   |
//! | [`ProbabilityMap`]      | `(B, H, W, K + 1)`|
//! | [`SyntheticFeatureMap`] | `(B, C, H, W)`    |
//!
//! The last part row / channel is always the background.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{invalid, Error, Result};

/// An RGB image with values in `[0, 1]`, stored planar (`3 × H × W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("image dimensions must be positive, got {height}x{width}"));
        }
        if data.len() != 3 * height * width {
            return Err(invalid!(
                "image buffer has {} values, expected 3x{height}x{width}",
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(invalid!("image value {v} outside [0, 1]"));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Builds an image from a per-pixel closure returning RGB in `[0, 1]`.
    /// Values are clamped.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for r in 0..height {
            for c in 0..width {
                let px = f(r, c);
                for ch in 0..3 {
                    data[ch * plane + r * width + c] = px[ch].clamp(0.0, 1.0);
                }
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    /// Decodes interleaved 8-bit RGB.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(invalid!("rgb8 buffer length mismatch"));
        }
        Ok(Self::from_fn(height, width, |r, c| {
            let o = 3 * (r * width + c);
            [
                rgb[o] as f32 / 255.0,
                rgb[o + 1] as f32 / 255.0,
                rgb[o + 2] as f32 / 255.0,
            ]
        }))
    }

    /// Interleaved 8-bit RGB, rounding to the nearest level.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for ch in 0..3 {
                out.push((self.data[ch * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Planar `3 × H × W` values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let plane = self.height * self.width;
        let i = row * self.width + col;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn check_divisible(&self, factor: usize, what: &str) -> Result<()> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(invalid!(
                "image size {}x{} is not divisible by {what} {factor}",
                self.height,
                self.width
            ));
        }
        Ok(())
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?
                .to_dtype(dtype)?,
        )
    }

    /// Bilinear resize.
    pub fn resized(&self, height: usize, width: usize) -> Result<Image> {
        if self.size() == (height, width) {
            return Ok(self.clone());
        }
        let t = crate::geometry::resize_tensor(&self.to_tensor(DType::F32, &Device::Cpu)?, height, width)?;
        Image::from_tensor(&t)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(invalid!("expected an image tensor of rank 3 or 4, got rank {r}")),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(invalid!("expected 3 channels, got {c}"));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in image tensor".into()));
        }
        Ok(Image {
            height: h,
            width: w,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }
}

/// Stacks equally sized images into a `(B, 3, H, W)` tensor.
pub fn stack_images(images: &[Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| invalid!("cannot stack an empty image list"))?;
    let (h, w) = first.size();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.size() != (h, w) {
            return Err(invalid!(
                "image sizes differ within a batch: {:?} vs {:?}",
                img.size(),
                (h, w)
            ));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Splits a `(B, 3, H, W)` tensor into images.
pub fn unstack_images(t: &Tensor) -> Result<Vec<Image>> {
    let b = t.dim(0)?;
    (0..b).map(|i| Image::from_tensor(&t.get(i)?)).collect()
}

/// Dense pixel representations `F`, laid out `(B, C, H, W)`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 {
            return Err(invalid!("feature map must be (B, C, H, W), got {:?}", values.shape()));
        }
        Ok(FeatureMap { values })
    }

    /// Builds a single-sample map from an `H × W × C` row-major buffer.
    pub fn from_hwc(
        height: usize,
        width: usize,
        channels: usize,
        data: &[f64],
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(invalid!("buffer length does not match {height}x{width}x{channels}"));
        }
        let t = Tensor::from_slice(data, (1, height, width, channels), device)?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .to_dtype(dtype)?;
        Self::new(t)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn grid(&self) -> (usize, usize) {
        let d = self.values.dims();
        (d[2], d[3])
    }

    /// `(B, H·W, C)` view used by the transfer module.
    pub fn pixels(&self) -> Result<Tensor> {
        let (b, c, h, w) = self.values.dims4()?;
        Ok(self.values.reshape((b, c, h * w))?.transpose(1, 2)?)
    }

    /// Single-sample `H × W × C` row-major values.
    pub fn to_hwc(&self, sample: usize) -> Result<Vec<f64>> {
        Ok(self
            .values
            .get(sample)?
            .permute((1, 2, 0))?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?)
    }

    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(self.values.narrow(0, start, len)?)
    }
}

/// Part representations `G`, laid out `(B, K + 1, C)`; row `K` is background.
#[derive(Clone, Debug)]
pub struct PartRepresentations {
    values: Tensor,
}

impl PartRepresentations {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(invalid!(
                "part representations must be (B, K+1, C), got {:?}",
                values.shape()
            ));
        }
        if values.dims()[1] < 2 {
            return Err(invalid!("need at least one foreground row plus background"));
        }
        Ok(PartRepresentations { values })
    }

    /// Single-sample representations from `(K + 1)` rows of length `C`.
    pub fn from_rows(rows: &[Vec<f64>], dtype: DType, device: &Device) -> Result<Self> {
        let c = rows.first().map(Vec::len).unwrap_or(0);
        if c == 0 || rows.iter().any(|r| r.len() != c) {
            return Err(invalid!("rows must be non-empty and equally long"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Tensor::from_vec(flat, (1, rows.len(), c), device)?.to_dtype(dtype)?)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }

    /// Total rows, `K + 1`.
    pub fn parts(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn k_foreground(&self) -> usize {
        self.parts() - 1
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[2]
    }

    /// `(B, K, C)` foreground rows.
    pub fn foreground(&self) -> Result<Tensor> {
        Ok(self.values.narrow(1, 0, self.k_foreground())?)
    }

    /// `(B, 1, C)` background row.
    pub fn background(&self) -> Result<Tensor> {
        Ok(self.values.narrow(1, self.k_foreground(), 1)?)
    }

    pub fn rows(&self, sample: usize) -> Result<Vec<Vec<f64>>> {
        Ok(self.values.get(sample)?.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(self.values.narrow(0, start, len)?)
    }
}

/// Soft part assignment `V`, laid out `(B, H, W, K + 1)`.
#[derive(Clone, Debug)]
pub struct ProbabilityMap {
    values: Tensor,
    temperature: f64,
}

impl ProbabilityMap {
    pub fn new(values: Tensor, temperature: f64) -> Result<Self> {
        if values.rank() != 4 {
            return Err(invalid!(
                "probability map must be (B, H, W, K+1), got {:?}",
                values.shape()
            ));
        }
        Ok(ProbabilityMap {
            values,
            temperature,
        })
    }

    /// Single-sample map from an `H × W × (K+1)` buffer. Rows must already sum to one.
    pub fn from_hwk(
        height: usize,
        width: usize,
        parts: usize,
        data: &[f64],
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if data.len() != height * width * parts {
            return Err(invalid!("buffer length does not match {height}x{width}x{parts}"));
        }
        let map = Self::new(
            Tensor::from_slice(data, (1, height, width, parts), device)?.to_dtype(dtype)?,
            f64::NAN,
        )?;
        map.check_normalized(1e-6)?;
        Ok(map)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        let d = self.values.dims();
        (d[1], d[2])
    }

    pub fn parts(&self) -> usize {
        self.values.dims()[3]
    }

    pub fn k_foreground(&self) -> usize {
        self.parts() - 1
    }

    /// `(B, H·W, K + 1)` view.
    pub fn flat(&self) -> Result<Tensor> {
        let (b, h, w, k) = self.values.dims4()?;
        Ok(self.values.reshape((b, h * w, k))?)
    }

    /// Verifies that every value lies in `[0, 1]` and every pixel sums to one.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        let flat = self.flat()?.to_dtype(DType::F64)?;
        let sums = flat.sum(D::Minus1)?.flatten_all()?.to_vec1::<f64>()?;
        if let Some(s) = sums.iter().find(|s| !s.is_finite() || (**s - 1.0).abs() > tol) {
            return Err(invalid!("probability map row sums to {s}, not 1"));
        }
        let lo = flat.min_all()?.to_scalar::<f64>()?;
        let hi = flat.max_all()?.to_scalar::<f64>()?;
        if lo < 0.0 || hi > 1.0 {
            return Err(invalid!("probability values outside [0, 1]: [{lo}, {hi}]"));
        }
        Ok(())
    }

    /// Single-sample `H × W × (K+1)` values.
    pub fn to_hwk(&self, sample: usize) -> Result<Vec<f64>> {
        Ok(self
            .values
            .get(sample)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?)
    }

    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(self.values.narrow(0, start, len)?, self.temperature)
    }
}

/// Feature map rebuilt from part representations, `(B, C, H, W)`.
#[derive(Clone, Debug)]
pub struct SyntheticFeatureMap {
    values: Tensor,
}

impl SyntheticFeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 {
            return Err(invalid!(
                "synthetic feature map must be (B, C, H, W), got {:?}",
                values.shape()
            ));
        }
        Ok(SyntheticFeatureMap { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn grid(&self) -> (usize, usize) {
        let d = self.values.dims();
        (d[2], d[3])
    }

    pub fn to_hwc(&self, sample: usize) -> Result<Vec<f64>> {
        Ok(self
            .values
            .get(sample)?
            .permute((1, 2, 0))?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?)
    }
}

/// Maps a probability channel index to a mask label: background (channel `K`)
/// becomes 0 and foreground channel `k` becomes `k + 1`.
pub fn channel_to_label(channel: usize, k_foreground: usize) -> u8 {
    if channel == k_foreground {
        0
    } else {
        (channel + 1) as u8
    }
}

/// Inverse of [`channel_to_label`].
pub fn label_to_channel(label: u8, k_foreground: usize) -> usize {
    if label == 0 {
        k_foreground
    } else {
        label as usize - 1
    }
}

/// Per-pixel part labels (0 = background, `1..=K` = parts) with an optional
/// soft map laid out `H × W × (K + 1)` in channel order (background last).
#[derive(Clone, Debug, PartialEq)]
pub struct PartMask {
    height: usize,
    width: usize,
    k_parts: usize,
    labels: Vec<u8>,
    soft: Option<Vec<f32>>,
}

impl PartMask {
    pub fn new(
        height: usize,
        width: usize,
        k_parts: usize,
        labels: Vec<u8>,
        soft: Option<Vec<f32>>,
    ) -> Result<Self> {
        if k_parts == 0 || k_parts > 254 {
            return Err(invalid!("K must be in 1..=254, got {k_parts}"));
        }
        if labels.len() != height * width {
            return Err(invalid!("label grid length mismatch"));
        }
        if let Some(l) = labels.iter().find(|l| **l as usize > k_parts) {
            return Err(invalid!("label {l} exceeds K = {k_parts}"));
        }
        if let Some(s) = &soft {
            if s.len() != height * width * (k_parts + 1) {
                return Err(invalid!("soft map length mismatch"));
            }
            for (i, &l) in labels.iter().enumerate() {
                let row = &s[i * (k_parts + 1)..(i + 1) * (k_parts + 1)];
                if channel_to_label(argmax(row), k_parts) != l {
                    return Err(invalid!("label at pixel {i} is not the argmax of the soft map"));
                }
            }
        }
        Ok(PartMask {
            height,
            width,
            k_parts,
            labels,
            soft,
        })
    }

    /// Hard labels from a soft `H × W × (K + 1)` map.
    pub fn from_soft(height: usize, width: usize, k_parts: usize, soft: Vec<f32>) -> Result<Self> {
        if soft.len() != height * width * (k_parts + 1) {
            return Err(invalid!("soft map length mismatch"));
        }
        let labels = soft
            .chunks_exact(k_parts + 1)
            .map(|row| channel_to_label(argmax(row), k_parts))
            .collect();
        Self::new(height, width, k_parts, labels, Some(soft))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn k_parts(&self) -> usize {
        self.k_parts
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn soft(&self) -> Option<&[f32]> {
        self.soft.as_deref()
    }

    pub fn without_soft(mut self) -> Self {
        self.soft = None;
        self
    }

    /// Nearest-neighbour upscale of the label grid (soft map dropped).
    pub fn upscale_nearest(&self, height: usize, width: usize) -> PartMask {
        let labels = (0..height * width)
            .map(|i| {
                let (r, c) = (i / width, i % width);
                self.labels[(r * self.height / height) * self.width + c * self.width / width]
            })
            .collect();
        PartMask {
            height,
            width,
            k_parts: self.k_parts,
            labels,
            soft: None,
        }
    }
}

/// Errors with a numeric error naming `what` if `t` holds NaN or infinity.
pub(crate) fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.detach().to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}

/// Index of the first maximum. Ties resolve to the lowest index.
pub(crate) fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
