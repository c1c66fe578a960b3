//! Inference: part masks, reconstructions and representation swaps.
//!
//! Inputs of any size are resized to the model input size before the
//! networks run. With interpolation on, the feature map is resized back to
//! the original image size before the probability map is formed.

use candle_core::{DType, Tensor};

use crate::error::{invalid, Result};
use crate::geometry::{bilinear_resize, resize_tensor};
use crate::partformer::AttentionRecord;
use crate::pipeline::model::Model;
use crate::transfer::{probability_map, synthesize};
use crate::types::{stack_images, unstack_images, FeatureMap, Image, PartMask, PartRepresentations, ProbabilityMap};

/// Largest number of images pushed through the networks at once.
pub const INFER_CHUNK: usize = 16;

fn model_input(model: &Model, images: &[Image]) -> Result<Tensor> {
    let [h, w] = model.config().image_size;
    let x = stack_images(images, model.dtype(), model.device())?;
    if x.dims()[2..] == [h, w] {
        Ok(x)
    } else {
        resize_tensor(&x, h, w)
    }
}

fn encode(model: &Model, images: &[Image], class_id: usize) -> Result<(FeatureMap, PartRepresentations)> {
    let x = model_input(model, images)?;
    let f = model.features(&x, false)?;
    let (g, _) = model.parts(&x, class_id, false)?;
    Ok((f, g))
}

/// Probability maps for equally sized images, at feature resolution or, with
/// `interpolate`, at image resolution.
pub fn probability_maps(
    model: &Model,
    images: &[Image],
    class_id: usize,
    tau: f64,
    interpolate: bool,
) -> Result<ProbabilityMap> {
    let (f, g) = encode(model, images, class_id)?;
    let f = if interpolate {
        bilinear_resize(&f, images[0].size())?
    } else {
        f
    };
    probability_map(&f, &g, tau)
}

fn masks_from(v: &ProbabilityMap) -> Result<Vec<PartMask>> {
    let (h, w) = v.grid();
    let k = v.k_foreground();
    (0..v.batch())
        .map(|i| {
            let soft: Vec<f32> = v.to_hwk(i)?.into_iter().map(|x| x as f32).collect();
            PartMask::from_soft(h, w, k, soft)
        })
        .collect()
}

/// Argmax part labels (background 0) with the soft map attached.
pub fn discover_parts(model: &Model, image: &Image, class_id: usize, tau: f64, interpolate: bool) -> Result<PartMask> {
    let v = probability_maps(model, std::slice::from_ref(image), class_id, tau, interpolate)?;
    Ok(masks_from(&v)?.remove(0))
}

/// [`discover_parts`] over many equally sized images of one class, batched.
pub fn discover_parts_batch(
    model: &Model,
    images: &[Image],
    class_id: usize,
    tau: f64,
    interpolate: bool,
) -> Result<Vec<PartMask>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_CHUNK) {
        if chunk.iter().any(|i| i.size() != chunk[0].size()) {
            return chunk
                .iter()
                .map(|i| discover_parts(model, i, class_id, tau, interpolate))
                .collect();
        }
        out.extend(masks_from(&probability_maps(model, chunk, class_id, tau, interpolate)?)?);
    }
    Ok(out)
}

/// Mean background probability over all pixels of all images, at feature
/// resolution.
pub fn background_mass(model: &Model, images: &[Image], class_id: usize, tau: f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in images.chunks(INFER_CHUNK) {
        let v = probability_maps(model, chunk, class_id, tau, false)?;
        let k = v.k_foreground();
        let bg = v.values().narrow(3, k, 1)?.to_dtype(DType::F64)?;
        total += bg.sum_all()?.to_scalar::<f64>()?;
        count += bg.elem_count();
    }
    if count == 0 {
        return Err(invalid!("no images"));
    }
    Ok(total / count as f64)
}

fn decode(model: &Model, f: &FeatureMap, g: &PartRepresentations, tau: f64) -> Result<Vec<Image>> {
    let v = probability_map(f, g, tau)?;
    unstack_images(&model.decoder().reconstruct(&synthesize(&v, g)?)?)
}

/// Decoder reconstruction of an image from its own parts.
pub fn reconstruct(model: &Model, image: &Image, class_id: usize, tau: f64) -> Result<Image> {
    let (f, g) = encode(model, std::slice::from_ref(image), class_id)?;
    Ok(decode(model, &f, &g, tau)?.remove(0))
}

/// Swaps foreground part representations between two images; each keeps its
/// own background row and its own feature map.
pub fn swap_reconstruct(model: &Model, a: &Image, b: &Image, class_id: usize, tau: f64) -> Result<(Image, Image)> {
    let x = Tensor::cat(&[&model_input(model, std::slice::from_ref(a))?, &model_input(model, std::slice::from_ref(b))?], 0)?;
    let f = model.features(&x, false)?;
    let (g, _) = model.parts(&x, class_id, false)?;
    let k = g.k_foreground();
    let gv = g.values();
    let fg_swapped = Tensor::cat(&[&gv.narrow(0, 1, 1)?, &gv.narrow(0, 0, 1)?], 0)?.narrow(1, 0, k)?;
    let swapped = PartRepresentations::new(Tensor::cat(&[&fg_swapped, &gv.narrow(1, k, 1)?], 1)?)?;
    let mut out = decode(model, &f, &swapped, tau)?;
    let rb = out.pop().expect("two reconstructions");
    let ra = out.pop().expect("two reconstructions");
    Ok((ra, rb))
}

/// Part-token attention of one image.
pub fn attention(model: &Model, image: &Image, class_id: usize) -> Result<AttentionRecord> {
    let x = model_input(model, std::slice::from_ref(image))?;
    let (_, rec) = model.parts(&x, class_id, true)?;
    rec.and_then(|mut r| r.pop()).ok_or_else(|| invalid!("no attention recorded"))
}

/// Mean cosine similarity between matching rows of `G` for two views of
/// the same images.
pub fn view_similarity(model: &Model, first: &[Image], second: &[Image], class_id: usize) -> Result<f64> {
    if first.len() != second.len() || first.is_empty() {
        return Err(invalid!("view lists must be non-empty and of equal length"));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (c1, c2) in first.chunks(INFER_CHUNK).zip(second.chunks(INFER_CHUNK)) {
        let (_, g1) = encode(model, c1, class_id)?;
        let (_, g2) = encode(model, c2, class_id)?;
        let (a, b) = (g1.values().to_dtype(DType::F64)?, g2.values().to_dtype(DType::F64)?);
        let dot = (&a * &b)?.sum(2)?;
        let na = a.sqr()?.sum(2)?.sqrt()?;
        let nb = b.sqr()?.sum(2)?.sqrt()?;
        let cos = (dot / ((na * nb)? + 1e-12)?)?;
        total += cos.sum_all()?.to_scalar::<f64>()?;
        n += cos.elem_count();
    }
    Ok(total / n as f64)
}
