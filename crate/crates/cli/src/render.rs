//! Overlays, heatmaps and contact sheets.

use partdiscover_core::data::io::label_color;
use partdiscover_core::types::Image;
use partdiscover_core::Result;

/// Blends palette colors over `img`; background pixels are left as is.
/// `labels` may be at a coarser grid than the image and is sampled nearest.
pub fn overlay(img: &Image, labels: &[u8], grid: (usize, usize), alpha: f32) -> Image {
    let (h, w) = img.size();
    let (gh, gw) = grid;
    Image::from_fn(h, w, |r, c| {
        let px = img.pixel(r, c);
        let label = labels[(r * gh / h) * gw + c * gw / w];
        if label == 0 {
            return px;
        }
        let col = label_color(label);
        std::array::from_fn(|i| (1.0 - alpha) * px[i] + alpha * col[i] as f32 / 255.0)
    })
}

/// Black-red-yellow-white ramp of `map` (scaled by its maximum), resized to
/// `size`.
pub fn heatmap(map: &[f64], grid: (usize, usize), size: (usize, usize)) -> Result<Image> {
    let max = map.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
    let small = Image::from_fn(grid.0, grid.1, |r, c| {
        let v = (map[r * grid.1 + c] / max) as f32 * 3.0;
        [v.min(1.0), (v - 1.0).clamp(0.0, 1.0), (v - 2.0).clamp(0.0, 1.0)]
    });
    small.resized(size.0, size.1)
}

/// Places equally sized images side by side.
pub fn sheet(images: &[Image]) -> Image {
    let (h, w) = images[0].size();
    Image::from_fn(h, w * images.len(), |r, c| images[c / w].pixel(r, c % w))
}
