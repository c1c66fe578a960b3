//! Bilinear resizing and coordinate grids.
//!
//! Resizing uses pixel centers: target pixel `i` samples source position
//! `(i + 0.5)·src/dst − 0.5`, clamped at the borders, so a feature cell lands
//! on the center of the image block it covers. Along each axis the resize is
//! a fixed linear map, so a 2-D resize is `R_h · X · R_wᵀ` and stays
//! differentiable through candle.

use candle_core::{DType, Device, Tensor};

use crate::error::{invalid, Result};
use crate::types::FeatureMap;

/// Row-major `(dst × src)` linear interpolation weights.
pub fn interpolation_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = (pos.floor() as usize).min(src - 1);
        let frac = pos - lo as f64;
        if frac == 0.0 || lo + 1 >= src {
            m[i * src + lo] = 1.0;
        } else {
            m[i * src + lo] = 1.0 - frac;
            m[i * src + lo + 1] = frac;
        }
    }
    m
}

/// Resizes a `(B, C, H, W)` tensor to `(B, C, target_h, target_w)`.
pub fn resize_tensor(x: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    if target_h == 0 || target_w == 0 {
        return Err(invalid!("resize target must be positive, got {target_h}x{target_w}"));
    }
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (target_h, target_w) {
        return Ok(x.clone());
    }
    let dtype = x.dtype();
    let dev = x.device();
    let rows = Tensor::from_vec(interpolation_matrix(h, target_h), (target_h, h), dev)?
        .to_dtype(dtype)?;
    let cols = Tensor::from_vec(interpolation_matrix(w, target_w), (target_w, w), dev)?
        .to_dtype(dtype)?
        .t()?;
    let y = rows.broadcast_matmul(&x.contiguous()?)?;
    Ok(y.broadcast_matmul(&cols)?)
}

/// Bilinear resize of a feature map to the image size (channels preserved).
pub fn bilinear_resize(map: &FeatureMap, target: (usize, usize)) -> Result<FeatureMap> {
    FeatureMap::new(resize_tensor(map.values(), target.0, target.1)?)
}

/// Zero-based `(row, col)` coordinates of an `h × w` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoordinateGrid {
    height: usize,
    width: usize,
}

impl CoordinateGrid {
    pub fn get(&self, row: usize, col: usize) -> (usize, usize) {
        assert!(row < self.height && col < self.width, "coordinate out of range");
        (row, col)
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// All coordinates in row-major order.
    pub fn to_vec(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .collect()
    }

    /// `(1, H·W, 1)` row and column coordinate tensors for loss computations.
    pub fn tensors(&self, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let n = self.height * self.width;
        let rows: Vec<f64> = (0..n).map(|i| (i / self.width) as f64).collect();
        let cols: Vec<f64> = (0..n).map(|i| (i % self.width) as f64).collect();
        Ok((
            Tensor::from_vec(rows, (1, n, 1), device)?.to_dtype(dtype)?,
            Tensor::from_vec(cols, (1, n, 1), device)?.to_dtype(dtype)?,
        ))
    }
}

pub fn coordinate_grid(height: usize, width: usize) -> Result<CoordinateGrid> {
    if height == 0 || width == 0 {
        return Err(invalid!("grid dimensions must be positive, got {height}x{width}"));
    }
    Ok(CoordinateGrid { height, width })
}
