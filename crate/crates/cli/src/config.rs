//! Run configuration: a single TOML file, with `section.key=value` overrides.

use std::path::{Path, PathBuf};

use drf_core::heads::ModelConfig;
use drf_core::raster::FrameConfig;
use drf_core::scenario::{PerceptionNoise, ScenarioConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    /// Base seed; scenario seeds are consecutive ranges per split.
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub scenario: ScenarioConfig,
    /// Applied to the test split to produce `test_noisy`.
    pub noise: PerceptionNoise,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            seed: 0,
            train: 2000,
            val: 300,
            test: 700,
            scenario: ScenarioConfig::default(),
            noise: PerceptionNoise {
                position_sd: 0.3,
                drop_prob: 0.2,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier on `lr`.
    pub lr_scale: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Use only the first `n` training scenarios.
    pub limit: Option<usize>,
    /// Use only the first `n` validation scenarios.
    pub val_limit: Option<usize>,
    pub out: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            lr_scale: 100.0,
            batch_size: 2,
            epochs: 10,
            seed: 0,
            limit: None,
            val_limit: None,
            out: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    pub fn effective_lr(&self) -> f64 {
        self.lr * self.lr_scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    TestNoisy,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::TestNoisy];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::TestNoisy => "test_noisy",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        Split::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown split {s:?}; expected train, val, test or test_noisy")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub limit: Option<usize>,
    /// Defaults to `best.ckpt` under the training output directory.
    pub checkpoint: Option<PathBuf>,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Test,
            limit: None,
            checkpoint: None,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub frame: FrameConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Loads `path` (or defaults) and applies `section.key=value` overrides in order.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
            None => RunConfig::default().to_toml(),
        };
        let mut value: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: drf_core::DrfError| CliError::Config(e.to_string());
        self.frame.validate().map_err(cfg)?;
        self.model.backbone.validate().map_err(cfg)?;
        self.model.backbone.check_input(self.frame.rows, self.frame.cols).map_err(cfg)?;
        self.model.head.validate().map_err(cfg)?;
        if self.model.head.horizon != self.data.scenario.future_frames {
            return Err(CliError::Config(format!(
                "model.head.horizon = {} but data.scenario.future_frames = {}",
                self.model.head.horizon, self.data.scenario.future_frames
            )));
        }
        if self.frame.output_ratio != self.model.backbone.stage_scales[0] {
            return Err(CliError::Config(format!(
                "frame.output_ratio = {} must equal the context feature downsampling {}",
                self.frame.output_ratio, self.model.backbone.stage_scales[0]
            )));
        }
        if self.train.batch_size == 0 || self.eval.batch_size == 0 {
            return Err(CliError::Config("batch sizes must be at least 1".into()));
        }
        if !(self.train.lr >= 0.0 && self.train.lr_scale >= 0.0) {
            return Err(CliError::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.frame.channel_count(self.data.scenario.past_frames)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.eval
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.train.out.join("best.ckpt"))
    }
}

/// Sets `a.b.c = value`, parsing the value as TOML and falling back to a string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        node = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {part} is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
