//! Flat JSON run configuration with layered overrides.
//!
//! Precedence, lowest first: built-in defaults, preset, config file,
//! `--set key=value` pairs, dedicated flags. Shape fields left unset are taken
//! from the training data.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use poster_core::data::DatasetMeta;
use poster_core::model::{ModelConfig, Variant};
use poster_core::training::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// `P = 8`, `D = 32`, levels `[32, 16, 8]`, depth 2.
    Desk,
    /// `P = 68`, `D = 512`, levels `[512, 256, 128]`, depth 8.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub patches: usize,
    pub base_dim: usize,
    pub pyramid_dims: Vec<usize>,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub drop_path: f64,
    pub head_dim: usize,
    pub qkv_bias: bool,
    pub pre_norm: bool,
    pub swap_depth: Option<usize>,
    pub num_classes: usize,
    /// Master seed; initialization and batch order use streams derived from it.
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub label_smoothing: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: Option<usize>,
    pub wall_clock: bool,
    pub eval_batch_size: usize,
    /// Share of the training file used for training when no test file is given.
    pub train_fraction: f64,
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_parts(&ModelConfig::desk(), &TrainConfig::default())
    }
}

impl RunConfig {
    fn from_parts(m: &ModelConfig, t: &TrainConfig) -> Self {
        Self {
            variant: m.variant,
            patches: m.patches,
            base_dim: m.base_dim,
            pyramid_dims: m.pyramid_dims.clone(),
            depth: m.depth,
            mlp_ratio: m.mlp_ratio,
            drop_path: m.drop_path,
            head_dim: m.head_dim,
            qkv_bias: m.qkv_bias,
            pre_norm: m.pre_norm,
            swap_depth: m.swap_depth,
            num_classes: m.num_classes,
            seed: m.seed,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            steps: t.steps,
            label_smoothing: t.label_smoothing,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            adam_eps: t.adam.eps,
            checkpoint_every: t.checkpoint_every,
            wall_clock: t.wall_clock,
            eval_batch_size: 256,
            train_fraction: 0.8,
            data: None,
            test_data: None,
            out: None,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            patches: self.patches,
            base_dim: self.base_dim,
            pyramid_dims: self.pyramid_dims.clone(),
            depth: self.depth,
            mlp_ratio: self.mlp_ratio,
            drop_path: self.drop_path,
            head_dim: self.head_dim,
            qkv_bias: self.qkv_bias,
            pre_norm: self.pre_norm,
            swap_depth: self.swap_depth,
            num_classes: self.num_classes,
            seed: seeds::derive(self.seed, "init", 0),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            steps: self.steps,
            label_smoothing: self.label_smoothing,
            adam: AdamConfig {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            seed: seeds::derive(self.seed, "train", 0),
            checkpoint_every: self.checkpoint_every,
            wall_clock: self.wall_clock,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()?;
        if self.eval_batch_size == 0 {
            return Err(CliError::Usage("eval_batch_size must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::Usage(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|source| CliError::Json {
                context: "serializing config".into(),
                source,
            })
    }

    /// Writes the effective configuration to `dir/config.json`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("config.json");
        fs::write(&path, self.to_json()?).map_err(|e| CliError::io(&path, e))
    }
}

/// Collects override layers and resolves them into a [`RunConfig`].
#[derive(Debug, Default)]
pub struct ConfigBuilder {
    layers: Map<String, Value>,
}

impl ConfigBuilder {
    pub fn new(preset: Preset) -> Self {
        let mut b = Self::default();
        if preset == Preset::Full {
            let full = RunConfig::from_parts(&ModelConfig::default(), &TrainConfig::default());
            if let Value::Object(m) = serde_json::to_value(full).expect("config serializes") {
                b.layers = m;
            }
        }
        b
    }

    pub fn file(mut self, path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(self) };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|source| CliError::Json {
            context: path.display().to_string(),
            source,
        })?;
        match value {
            Value::Object(m) => {
                self.layers.extend(m);
                Ok(self)
            }
            _ => Err(CliError::Usage(format!("{}: expected a JSON object", path.display()))),
        }
    }

    /// Applies `key=value` pairs; values parse as JSON, falling back to a string.
    pub fn sets(mut self, pairs: &[String]) -> Result<Self> {
        for pair in pairs {
            let (key, raw) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{pair}`")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            self.layers.insert(key.trim().to_string(), value);
        }
        Ok(self)
    }

    pub fn set(mut self, key: &str, value: Option<impl Serialize>) -> Self {
        if let Some(v) = value {
            self.layers.insert(key.into(), serde_json::to_value(v).expect("flag serializes"));
        }
        self
    }

    pub fn get_path(&self, key: &str) -> Option<PathBuf> {
        self.layers.get(key).and_then(Value::as_str).map(PathBuf::from)
    }

    /// Fills shape fields that no layer set from dataset metadata.
    pub fn shape_from(mut self, meta: &DatasetMeta) -> Self {
        for (key, v) in [
            ("patches", meta.patches),
            ("base_dim", meta.dim),
            ("num_classes", meta.num_classes),
        ] {
            self.layers.entry(key).or_insert(Value::from(v));
        }
        self
    }

    pub fn build(self) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(Value::Object(self.layers)).map_err(|source| CliError::Json {
            context: "run config".into(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}
