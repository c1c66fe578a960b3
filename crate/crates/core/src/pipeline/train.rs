//! The two-stream training step and the batch schedule around it.

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::BackboneRegistry;
use crate::error::{invalid, Error, Result};
use crate::geometry::resize_tensor;
use crate::losses::{
    area_raw, concentration_raw, mse_reconstruction_loss, perceptual_extractor, perceptual_loss,
    semantic_consistency_loss, total_loss, LossBreakdown, LossTerms, PerceptualExtractor, Reconstruction,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::par::{self, Exec};
use crate::pipeline::augment::{make_pair, AugmentSpec};
use crate::pipeline::model::Model;
use crate::transfer::{exchange_halves, probability_map, synthesize};
use crate::types::{stack_images, Image};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub steps: u64,
    /// Swap part representations between the two views before transfer.
    pub exchange: bool,
    pub augment: AugmentSpec,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Steps between held-out evaluations; 0 disables them.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            batch_size: 32,
            steps: 2000,
            exchange: true,
            augment: AugmentSpec::default(),
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return Err(invalid!("invalid optimizer settings {o:?}"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be at least 1"));
        }
        self.augment.validate()
    }
}

/// Mixes a seed with a sequence of tags (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = seed;
    for &t in tags {
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(t.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

const TAG_EPOCH: u64 = 1;
const TAG_AUGMENT: u64 = 2;

/// Deterministic class-grouped batches: every batch holds samples of a
/// single class. Batch `i` of the whole run depends only on the seed, so
/// a resumed run sees the same data as an uninterrupted one.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    by_class: BTreeMap<usize, Vec<usize>>,
    batch_size: usize,
    seed: u64,
    per_epoch: usize,
    cached: Option<(u64, Vec<(usize, Vec<usize>)>)>,
}

impl BatchSchedule {
    /// `classes[i]` is the class of sample `i`.
    pub fn new(classes: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if classes.is_empty() || batch_size == 0 {
            return Err(invalid!("batch schedule needs samples and a positive batch size"));
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in classes.iter().enumerate() {
            by_class.entry(c).or_default().push(i);
        }
        let per_epoch = by_class.values().map(|v| v.len().div_ceil(batch_size)).sum();
        Ok(BatchSchedule {
            by_class,
            batch_size,
            seed,
            per_epoch,
            cached: None,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.per_epoch
    }

    fn epoch_plan(&self, epoch: u64) -> Vec<(usize, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[TAG_EPOCH, epoch]));
        let mut plan = Vec::with_capacity(self.per_epoch);
        for (&c, idx) in &self.by_class {
            let mut idx = idx.clone();
            idx.shuffle(&mut rng);
            plan.extend(idx.chunks(self.batch_size).map(|ch| (c, ch.to_vec())));
        }
        plan.shuffle(&mut rng);
        plan
    }

    /// Class and sample indices of the batch used at `step` (0-based).
    pub fn batch(&mut self, step: u64) -> (usize, Vec<usize>) {
        let epoch = step / self.per_epoch as u64;
        let pos = (step % self.per_epoch as u64) as usize;
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.cached = Some((epoch, self.epoch_plan(epoch)));
        }
        self.cached.as_ref().expect("plan cached above").1[pos].clone()
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// 1-based index of the step.
    pub step: u64,
    pub class_id: usize,
    pub batch: usize,
    pub loss: LossBreakdown,
}

/// Training state: model, optimizer, configuration and step counter.
#[derive(Debug)]
pub struct Trainer {
    cfg: RunConfig,
    model: Model,
    opt: AdamW,
    phi: Option<Arc<dyn PerceptualExtractor>>,
    step: u64,
    exec: Exec,
}

impl Trainer {
    pub fn new(cfg: RunConfig, registry: &mut BackboneRegistry) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model, cfg.seed, registry)?;
        let opt = AdamW::new(cfg.train.optimizer);
        Self::from_parts(cfg, model, opt, 0)
    }

    /// Reassembles a trainer around restored state.
    pub fn from_parts(cfg: RunConfig, model: Model, opt: AdamW, step: u64) -> Result<Self> {
        let phi = match cfg.loss.reconstruction {
            Reconstruction::Perceptual => Some(perceptual_extractor(&cfg.loss.perceptual, model.dtype(), model.device())?),
            Reconstruction::Mse => None,
        };
        Ok(Trainer {
            cfg,
            model,
            opt,
            phi,
            step,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Runs the forward pass of both streams and returns the loss terms.
    /// `augment_seed` drives the pair sampling.
    fn losses(&self, images: &[Image], class_id: usize, augment_seed: u64) -> Result<LossTerms> {
        let model = &self.model;
        let mcfg = model.config();
        let (h, w) = (mcfg.image_size[0], mcfg.image_size[1]);
        if let Some(img) = images.iter().find(|i| i.size() != (h, w)) {
            return Err(invalid!("training image is {:?}, model expects {h}x{w}", img.size()));
        }
        let b = images.len();
        let spec = self.cfg.train.augment;
        let pairs = par::map_slice(self.exec, images, |i, img| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(augment_seed, &[i as u64]));
            make_pair(img, &spec, &mut rng)
        });
        let views: Vec<Image> = pairs
            .iter()
            .map(|p| p.0.clone())
            .chain(pairs.iter().map(|p| p.1.clone()))
            .collect();
        let x = stack_images(&views, model.dtype(), model.device())?;

        let f = model.features(&x, true)?;
        let (g, _) = model.parts(&x, class_id, false)?;
        let g_used = if self.cfg.train.exchange { exchange_halves(&g)? } else { g.clone() };
        let tau = self.cfg.transfer.temperature;
        let v = probability_map(&f, &g_used, tau)?;
        let s = synthesize(&v, &g_used)?;
        let recon = model.decoder().reconstruct(&s)?;

        let (rh, rw) = mcfg.recon_size();
        let target = if (rh, rw) == (h, w) { x.clone() } else { resize_tensor(&x, rh, rw)? };
        let halves = |t: &Tensor| -> Result<(Tensor, Tensor)> { Ok((t.narrow(0, 0, b)?, t.narrow(0, b, b)?)) };
        let (t1, t2) = halves(&target)?;
        let (r1, r2) = halves(&recon)?;
        let rec = match (&self.phi, self.cfg.loss.reconstruction) {
            (Some(phi), Reconstruction::Perceptual) => perceptual_loss((&t1, &t2), (&r1, &r2), phi.as_ref())?,
            _ => mse_reconstruction_loss((&t1, &t2), (&r1, &r2))?,
        };

        let lc = &self.cfg.loss;
        let grid = f.grid();
        let vf = v.flat()?;
        // Both transfer directions share one batch of 2B maps, so the summed
        // per-direction means are twice the mean over 2B.
        let con = (concentration_raw(&vf, grid, lc.eps)? * 2.0)?;
        let area = (area_raw(&vf, lc.alpha(grid.0, grid.1), lc.eps)? * 2.0)?;
        let sc = semantic_consistency_loss(&g.foreground()?, model.arcface(), lc.arc_scale, lc.arc_margin)?;
        Ok(LossTerms { rec, sc, con, area })
    }

    /// One optimizer step on `images` (all of class `class_id`).
    pub fn train_step(&mut self, images: &[Image], class_id: usize) -> Result<StepReport> {
        if images.is_empty() {
            return Err(invalid!("empty training batch"));
        }
        let step = self.step + 1;
        let tag = |e: Error| match e {
            Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
            other => other,
        };
        let seed = derive_seed(self.cfg.seed, &[TAG_AUGMENT, self.step]);
        let terms = self.losses(images, class_id, seed).map_err(tag)?;
        let (total, loss) = total_loss(&terms, &self.cfg.loss).map_err(tag)?;
        let grads = total.backward()?;
        self.opt.step(self.model.store(), &grads)?;
        self.step = step;
        Ok(StepReport {
            step,
            class_id,
            batch: images.len(),
            loss,
        })
    }

    /// Trains until `until` total steps, drawing batches from `images`
    /// (with classes `classes`) through a [`BatchSchedule`]. `on_step` sees
    /// every report and may stop training early by returning `false`.
    pub fn fit<F>(&mut self, images: &[Image], classes: &[usize], until: u64, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepReport) -> Result<bool>,
    {
        if images.len() != classes.len() {
            return Err(invalid!("{} images but {} class ids", images.len(), classes.len()));
        }
        let mut schedule = BatchSchedule::new(classes, self.cfg.train.batch_size, self.cfg.seed)?;
        while self.step < until {
            let (class_id, idx) = schedule.batch(self.step);
            let batch: Vec<Image> = idx.iter().map(|&i| images[i].clone()).collect();
            let report = self.train_step(&batch, class_id)?;
            if !on_step(self, &report)? {
                break;
            }
        }
        Ok(())
    }
}
