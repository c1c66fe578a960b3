//! Checkpoints: parameters, buffers, optimizer moments, the run
//! configuration and the step counter in one named-tensor archive.
//!
//! Tensor names are `param.<name>`, `optim.m.<name>` and `optim.v.<name>`.
//! Frozen backbone weights are not stored; they are resolved again from the
//! configured descriptor on load.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Device;
use serde_json::json;

use crate::archive::{read_archive, write_archive};
use crate::config::RunConfig;
use crate::encoder::BackboneRegistry;
use crate::error::{Error, Result};
use crate::optim::{AdamW, Moments};
use crate::pipeline::model::Model;
use crate::pipeline::train::Trainer;

pub const CHECKPOINT_KIND: &str = "partdiscover-checkpoint";

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let model = trainer.model();
    let mut tensors = Vec::new();
    for (name, var, _) in model.store().all() {
        tensors.push((format!("param.{name}"), var.as_tensor().clone()));
    }
    let mut steps = BTreeMap::new();
    for (name, m) in trainer.optimizer().state() {
        tensors.push((format!("optim.m.{name}"), m.m.clone()));
        tensors.push((format!("optim.v.{name}"), m.v.clone()));
        steps.insert(name.clone(), m.t);
    }
    let meta = json!({
        "kind": CHECKPOINT_KIND,
        "step": trainer.step(),
        "config": trainer.config(),
        "optim_t": steps,
    });
    write_archive(path, &tensors, meta)
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptArchive {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Restores the full training state.
pub fn load_checkpoint(path: &Path, registry: &mut BackboneRegistry) -> Result<Trainer> {
    let archive = read_archive(path, &Device::Cpu)?;
    let meta = &archive.meta;
    if meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
        return Err(bad(path, "not a checkpoint archive"));
    }
    let step = meta
        .get("step")
        .and_then(|s| s.as_u64())
        .ok_or_else(|| bad(path, "missing step counter"))?;
    let config = meta.get("config").cloned().ok_or_else(|| bad(path, "missing config snapshot"))?;
    let cfg = RunConfig::from_value(config)?;
    let model = Model::new(&cfg.model, cfg.seed, registry)?;

    for (name, _, _) in model.store().all() {
        let t = archive
            .tensors
            .get(&format!("param.{name}"))
            .ok_or_else(|| bad(path, format!("missing parameter {name}")))?;
        model.store().set(name, t)?;
    }
    let n_params = archive.tensors.keys().filter(|k| k.starts_with("param.")).count();
    if n_params != model.store().len() {
        return Err(bad(path, format!("archive has {n_params} parameters, model has {}", model.store().len())));
    }

    let steps: BTreeMap<String, u64> = match meta.get("optim_t") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| bad(path, format!("optim_t: {e}")))?,
        None => BTreeMap::new(),
    };
    let mut state = BTreeMap::new();
    for (name, t) in steps {
        let get = |kind: &str| {
            archive
                .tensors
                .get(&format!("optim.{kind}.{name}"))
                .map(|t| t.to_dtype(model.dtype()))
                .ok_or_else(|| bad(path, format!("missing optimizer moment {kind} for {name}")))
        };
        state.insert(
            name.clone(),
            Moments {
                m: get("m")??,
                v: get("v")??,
                t,
            },
        );
    }
    let mut opt = AdamW::new(cfg.train.optimizer);
    opt.set_state(state);
    Trainer::from_parts(cfg, model, opt, step)
}

/// Registry with the builtin backbones at the precision `cfg` asks for.
pub fn registry_for(cfg: &RunConfig) -> Result<BackboneRegistry> {
    BackboneRegistry::with_builtins(cfg.model.precision.dtype(), Device::Cpu)
}

/// Restores a trainer using a registry matching the stored configuration.
pub fn open_checkpoint(path: &Path) -> Result<Trainer> {
    let cfg = load_checkpoint_config(path)?;
    load_checkpoint(path, &mut registry_for(&cfg)?)
}

/// The run configuration stored in a checkpoint.
pub fn load_checkpoint_config(path: &Path) -> Result<RunConfig> {
    let archive = read_archive(path, &Device::Cpu)?;
    if archive.meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
        return Err(bad(path, "not a checkpoint archive"));
    }
    let config = archive.meta.get("config").cloned().ok_or_else(|| bad(path, "missing config snapshot"))?;
    RunConfig::from_value(config)
}

/// Restores only the model, for inference.
pub fn load_model(path: &Path, registry: &mut BackboneRegistry) -> Result<(RunConfig, Model)> {
    let t = load_checkpoint(path, registry)?;
    let cfg = t.config().clone();
    Ok((cfg, t.into_model()))
}
