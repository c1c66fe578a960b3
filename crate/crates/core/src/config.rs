//! Run configuration: one JSON document covering every module, with named
//! presets, dot-path overrides and a stable content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::synth::SyntheticSpec;
use crate::decoder::DecoderConfig;
use crate::encoder::{EncoderConfig, EncoderMode};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::partformer::PartFormerConfig;
use crate::pipeline::model::{ModelConfig, Precision};
use crate::pipeline::train::TrainConfig;
use crate::transfer::TransferConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory. Takes precedence over `synthetic`.
    pub root: Option<PathBuf>,
    /// Generate a synthetic dataset in memory instead.
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub transfer: TransferConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper_scratch()
    }
}

pub const PRESETS: [&str; 3] = ["paper_scratch", "paper_pretrained", "desk"];

impl RunConfig {
    /// Full-size scratch training.
    pub fn paper_scratch() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            transfer: TransferConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
        }
    }

    /// Frozen pretrained backbone with reduction blocks.
    pub fn paper_pretrained() -> Self {
        let mut c = Self::paper_scratch();
        c.model.image_size = [224, 224];
        c.model.encoder = EncoderConfig {
            mode: EncoderMode::FrozenBackbone,
            total_stride: 8,
            backbone: "dino_vits8".into(),
            ..EncoderConfig::default()
        };
        c.loss.lambda_con = 0.3;
        c
    }

    /// Small CPU-sized model on the synthetic creatures.
    pub fn desk() -> Self {
        let mut c = Self::paper_scratch();
        c.model = ModelConfig {
            image_size: [64, 64],
            k_parts: 4,
            n_classes: 1,
            precision: Precision::F32,
            encoder: EncoderConfig {
                out_channels: 32,
                stage_channels: vec![16, 16, 32, 32],
                ..EncoderConfig::default()
            },
            partformer: PartFormerConfig {
                layers: 2,
                heads: 4,
                hidden: 64,
                mlp_dim: 128,
                patch: 8,
            },
            decoder: DecoderConfig {
                widths: vec![16, 16, 8, 8, 8],
            },
        };
        c.loss.lambda_con = 0.01;
        c.loss.alpha_frac = 0.03;
        c.train.batch_size = 4;
        c.train.steps = 2000;
        c.data.synthetic = Some(SyntheticSpec::default());
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper_scratch" => Ok(Self::paper_scratch()),
            "paper_pretrained" => Ok(Self::paper_pretrained()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset '{other}'; known: {}", PRESETS.join(", ")))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| r.map_err(|e| Error::Config(format!("{section}: {e}")));
        wrap("model", self.model.validate())?;
        wrap("transfer", self.transfer.validate())?;
        wrap("loss", self.loss.validate())?;
        wrap("train", self.train.validate())?;
        if self.model.k_parts < 2 {
            return Err(Error::Config("model.k_parts: the semantic consistency loss needs at least 2 parts".into()));
        }
        if let Some(s) = &self.data.synthetic {
            wrap("data.synthetic", s.validate())?;
        }
        Ok(())
    }

    /// Deserializes with unknown-key rejection, then validates. Errors name
    /// the offending key path.
    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: RunConfig = serde_path_to_error::deserialize(v)
            .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a JSON file. A file holding `{"preset": name, ...}` starts from
    /// that preset and overlays the remaining keys.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_document(v)
    }

    pub fn from_document(mut v: Value) -> Result<Self> {
        let preset = match v.as_object_mut().and_then(|o| o.remove("preset")) {
            Some(Value::String(name)) => Some(name),
            Some(other) => return Err(Error::Config(format!("preset: expected a name, got {other}"))),
            None => None,
        };
        match preset {
            Some(name) => {
                let mut base = serde_json::to_value(Self::preset(&name)?).expect("config serializes");
                merge(&mut base, v);
                Self::from_value(base)
            }
            None => Self::from_value(v),
        }
    }

    /// Applies `key=value` overrides (dot paths) and revalidates.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            set_path(&mut v, key.trim(), parse_scalar(raw.trim()))?;
        }
        Self::from_value(v)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON (sorted
    /// keys, no whitespace).
    pub fn config_hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut s = String::new();
        canonical(&v, &mut s);
        hex::encode(Sha256::digest(s.as_bytes()))[..16].to_string()
    }
}

/// JSON when it parses as JSON, otherwise a plain string.
fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key '{key}'")));
    }
    let mut cur = root;
    for (i, p) in parts.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{}: not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last segment")
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                canonical(&m[k], out);
            }
            out.push('}');
        }
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonical(x, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}
