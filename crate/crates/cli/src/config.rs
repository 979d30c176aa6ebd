//! Experiment configuration: JSON files, presets and `--key value`
//! overrides.

use crate::error::CliError;
use seld_core::model::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Which validation quantity picks the checkpoint kept as "best".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectBy {
    Loss,
    F20,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    /// Feature frames per training chunk.
    pub chunk_frames: usize,
    /// ACCDOA activity threshold.
    pub threshold: f64,
    /// Angular threshold of the location-aware detection metrics.
    pub theta_deg: f64,
    pub select_by: SelectBy,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            seeds: (0..10).collect(),
            chunk_frames: 250,
            threshold: 0.5,
            theta_deg: 20.0,
            select_by: SelectBy::Loss,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Named bundles of overrides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Paper settings: 100 epochs, 10 seeds, batch 32.
    Full,
    /// Laptop scale: 15 epochs, 3 seeds, batch 4 (pairs with 60 clips).
    Desk,
}

pub const DESK_CLIPS: usize = 60;

impl Preset {
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        match self {
            Preset::Full => {
                cfg.epochs = 100;
                cfg.seeds = (0..10).collect();
                cfg.batch_size = 32;
            }
            Preset::Desk => {
                cfg.epochs = 15;
                cfg.seeds = vec![0, 1, 2];
                cfg.batch_size = 4;
            }
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Applies `key value` pairs. Keys are dotted paths into the JSON form
    /// (`epochs`, `model.n_heads`); values parse as JSON, falling back to a
    /// plain string.
    pub fn with_overrides(self, pairs: &[(String, String)]) -> Result<Self, CliError> {
        if pairs.is_empty() {
            return Ok(self);
        }
        let mut v = serde_json::to_value(&self).expect("config serializes");
        for (key, raw) in pairs {
            let parsed: Value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            let mut slot = &mut v;
            for part in key.split('.') {
                let part = part.replace('-', "_");
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(&part))
                    .ok_or_else(|| CliError::Usage(format!("unknown config key --{key}")))?;
            }
            *slot = parsed;
        }
        serde_json::from_value(v).map_err(|e| CliError::Usage(format!("invalid override: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        if self.chunk_frames == 0 || self.chunk_frames % 5 != 0 {
            return bad(format!(
                "chunk_frames {} must be a positive multiple of 5",
                self.chunk_frames
            ));
        }
        if self.chunk_frames != self.model.feature_frames() {
            return bad(format!(
                "chunk_frames {} disagrees with the model's {} feature frames per chunk",
                self.chunk_frames,
                self.model.feature_frames()
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} must lie in (0, 1)", self.threshold));
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive".into());
        }
        self.model
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    /// Stable digest of everything that affects a training run's result.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("data_dir");
            o.remove("out_dir");
            o.remove("seeds");
        }
        let digest = Sha256::digest(serde_json::to_vec(&v).expect("json"));
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Splits trailing `--key value` arguments into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("expected --key before {a:?}")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let val = it
            .next()
            .ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?;
        out.push((key.to_string(), val.clone()));
    }
    Ok(out)
}
