//! Dataset-level evaluation and the JSON metrics report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::landmarks::{fit_regressor, flatten_centroids, nme, part_centroids, LandmarkSet, NormKind};
use crate::eval::metrics::{ari, fg_metrics, nmi};
use crate::par::{self, Exec};
use crate::pipeline::infer::{discover_parts_batch, INFER_CHUNK};
use crate::pipeline::model::Model;
use crate::types::PartMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Regress landmarks from part centroids; NMI/ARI on landmark pixels.
    Landmarks,
    /// NMI/ARI and foreground variants against ground-truth masks.
    Masks,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Landmarks => "landmarks",
            Protocol::Masks => "masks",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub interpolate: bool,
    /// Pool labels over the whole split before computing NMI/ARI; otherwise
    /// average per-image scores.
    pub pooled: bool,
    pub norm: NormKind,
    /// Split the landmark regressor is fitted on.
    pub fit_split: String,
    pub test_split: String,
    /// Mass guard for centroids.
    pub eps: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: Protocol::Masks,
            interpolate: true,
            pooled: true,
            norm: NormKind::CanvasDiag,
            fit_split: "train".into(),
            test_split: "test".into(),
            eps: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nme_pct: Option<f64>,
    pub nmi: f64,
    pub ari: f64,
    pub fg_nmi: Option<f64>,
    pub fg_ari: Option<f64>,
    pub n_images: usize,
    pub protocol: Protocol,
    pub config_hash: String,
}

/// Predicted masks for `indices`, in that order. Images are grouped by
/// class and size and run in batches; batches run through [`par`].
pub fn predict(
    model: &Model,
    ds: &Dataset,
    indices: &[usize],
    tau: f64,
    interpolate: bool,
    exec: Exec,
) -> Result<Vec<PartMask>> {
    let mut groups: BTreeMap<(usize, (usize, usize)), Vec<usize>> = BTreeMap::new();
    for &i in indices {
        groups.entry((ds.classes[i], ds.images[i].size())).or_default().push(i);
    }
    let mut jobs: Vec<(usize, Vec<usize>)> = Vec::new();
    for ((class, _), idx) in groups {
        jobs.extend(idx.chunks(INFER_CHUNK).map(|c| (class, c.to_vec())));
    }
    let results = par::try_map_range(exec, jobs.len(), |j| {
        let (class, idx) = &jobs[j];
        let imgs: Vec<_> = idx.iter().map(|&i| ds.images[i].clone()).collect();
        discover_parts_batch(model, &imgs, *class, tau, interpolate)
    })?;
    let mut by_index: BTreeMap<usize, PartMask> = BTreeMap::new();
    for ((_, idx), masks) in jobs.iter().zip(results) {
        by_index.extend(idx.iter().copied().zip(masks));
    }
    Ok(indices.iter().map(|i| by_index[i].clone()).collect())
}

fn resize_labels(mask: &PartMask, size: (usize, usize)) -> Vec<u8> {
    if (mask.height(), mask.width()) == size {
        mask.labels().to_vec()
    } else {
        mask.upscale_nearest(size.0, size.1).labels().to_vec()
    }
}

/// Predicted label at image point `[x, y]`, scaling into the mask grid.
fn label_at(mask: &PartMask, p: [f64; 2], image_size: (usize, usize)) -> u8 {
    let sx = mask.width() as f64 / image_size.1 as f64;
    let sy = mask.height() as f64 / image_size.0 as f64;
    let c = (((p[0] + 0.5) * sx).floor().max(0.0) as usize).min(mask.width() - 1);
    let r = (((p[1] + 0.5) * sy).floor().max(0.0) as usize).min(mask.height() - 1);
    mask.label(r, c)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Scores predictions (given for every image index the protocol touches).
pub fn score_predictions(
    ds: &Dataset,
    preds: &BTreeMap<usize, PartMask>,
    cfg: &EvalConfig,
    config_hash: &str,
) -> Result<MetricsReport> {
    let test = ds.splits.get(&cfg.test_split)?;
    if test.is_empty() {
        return Err(Error::Config(format!("split '{}' is empty", cfg.test_split)));
    }
    let pred = |i: usize| {
        preds
            .get(&i)
            .ok_or_else(|| Error::Config(format!("no prediction for image {}", ds.ids[i])))
    };
    match cfg.protocol {
        Protocol::Masks => {
            let masks = ds
                .masks
                .as_ref()
                .ok_or_else(|| Error::Config("mask protocol needs masks/ in the dataset".into()))?;
            let (mut p_all, mut g_all) = (Vec::new(), Vec::new());
            let mut per_image = Vec::new();
            for &i in test {
                let p = resize_labels(pred(i)?, ds.images[i].size());
                let g = &masks[i];
                if cfg.pooled {
                    p_all.extend_from_slice(&p);
                    g_all.extend_from_slice(g);
                } else {
                    let (fn_, fa) = fg_metrics(&p, g, 0)?;
                    per_image.push([nmi(&p, g)?, ari(&p, g)?, fn_, fa]);
                }
            }
            let [n, a, fn_, fa] = if cfg.pooled {
                let (fn_, fa) = fg_metrics(&p_all, &g_all, 0)?;
                [nmi(&p_all, &g_all)?, ari(&p_all, &g_all)?, fn_, fa]
            } else {
                std::array::from_fn(|j| mean(&per_image.iter().map(|r| r[j]).collect::<Vec<_>>()))
            };
            Ok(MetricsReport {
                nme_pct: None,
                nmi: n,
                ari: a,
                fg_nmi: Some(fn_),
                fg_ari: Some(fa),
                n_images: test.len(),
                protocol: cfg.protocol,
                config_hash: config_hash.into(),
            })
        }
        Protocol::Landmarks => {
            let lms = ds
                .landmarks
                .as_ref()
                .ok_or_else(|| Error::Config("landmark protocol needs landmarks.csv in the dataset".into()))?;
            let fit = ds.splits.get(&cfg.fit_split)?;
            let features = |i: usize| -> Result<Vec<f64>> { Ok(flatten_centroids(&part_centroids(pred(i)?, cfg.eps)?)) };
            let x = fit.iter().map(|&i| features(i)).collect::<Result<Vec<_>>>()?;
            let y: Vec<Vec<f64>> = fit.iter().map(|&i| lms[i].iter().flat_map(|p| *p).collect()).collect();
            let reg = fit_regressor(&x, &y)?;

            let mut errors = Vec::new();
            let (mut p_all, mut g_all) = (Vec::new(), Vec::new());
            let mut per_image = Vec::new();
            for &i in test {
                let size = ds.images[i].size();
                let gt = LandmarkSet::new(lms[i].clone(), cfg.norm.value(&lms[i], size)?);
                errors.push(nme(&reg.predict(&features(i)?)?, &gt)?);
                let m = pred(i)?;
                let p: Vec<u8> = lms[i].iter().map(|&pt| label_at(m, pt, size)).collect();
                let g: Vec<usize> = (0..lms[i].len()).collect();
                if cfg.pooled {
                    p_all.extend(p);
                    g_all.extend(g);
                } else {
                    per_image.push([nmi(&p, &g)?, ari(&p, &g)?]);
                }
            }
            let [n, a] = if cfg.pooled {
                [nmi(&p_all, &g_all)?, ari(&p_all, &g_all)?]
            } else {
                std::array::from_fn(|j| mean(&per_image.iter().map(|r| r[j]).collect::<Vec<_>>()))
            };
            Ok(MetricsReport {
                nme_pct: Some(mean(&errors)),
                nmi: n,
                ari: a,
                fg_nmi: None,
                fg_ari: None,
                n_images: test.len(),
                protocol: cfg.protocol,
                config_hash: config_hash.into(),
            })
        }
    }
}

/// Runs the model over the splits the protocol needs and scores it.
pub fn evaluate_dataset(
    model: &Model,
    ds: &Dataset,
    cfg: &EvalConfig,
    tau: f64,
    config_hash: &str,
    exec: Exec,
) -> Result<MetricsReport> {
    match cfg.protocol {
        Protocol::Masks if ds.masks.is_none() => {
            return Err(Error::Config("mask protocol needs masks/ in the dataset".into()))
        }
        Protocol::Landmarks if ds.landmarks.is_none() => {
            return Err(Error::Config("landmark protocol needs landmarks.csv in the dataset".into()))
        }
        _ => {}
    }
    let mut idx: Vec<usize> = ds.splits.get(&cfg.test_split)?.to_vec();
    if cfg.protocol == Protocol::Landmarks {
        idx.extend_from_slice(ds.splits.get(&cfg.fit_split)?);
        idx.sort_unstable();
        idx.dedup();
    }
    let masks = predict(model, ds, &idx, tau, cfg.interpolate, exec)?;
    let preds: BTreeMap<usize, PartMask> = idx.into_iter().zip(masks).collect();
    score_predictions(ds, &preds, cfg, config_hash)
}
