//! The run configuration: one TOML file covering every stage.

use std::path::{Path, PathBuf};

use kws_core::augment::AugmentPlan;
use kws_core::dataset::{IngestOptions, Split};
use kws_core::frontend::FrontendConfig;
use kws_core::disnorm::{DEFAULT_EPS, DEFAULT_MOMENTUM};
use kws_core::model::{ModelConfig, NormConfig};
use kws_core::pipeline::ScoringConfig;
use kws_core::trainer::TrainConfig;
use kws_core::{KwsError, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Speech Commands style directory: word folders, split lists, `_background_noise_`.
    pub root: PathBuf,
    /// Where checkpoints, reports, scores and manifests go.
    pub out_dir: PathBuf,
    /// Hold out every k-th noise recording from training (0 keeps all).
    pub noise_holdout_every: usize,
    pub ingest: IngestOptions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/speech_commands_v0.01"),
            out_dir: PathBuf::from("runs/default"),
            noise_holdout_every: 0,
            ingest: IngestOptions::default(),
        }
    }
}

/// Normalization constants; the branch count follows from the strategy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormSection {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for NormSection {
    fn default() -> Self {
        Self {
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }
}

impl NormSection {
    pub fn with_branches(&self, branches: usize) -> NormConfig {
        NormConfig {
            branches,
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    /// Operating points reported as FRR at these false-accept rates.
    pub far_targets: Vec<f64>,
    pub scoring: ScoringConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            far_targets: vec![0.01, 0.05],
            scoring: ScoringConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: DataConfig,
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub norm: NormSection,
    pub augment: AugmentPlan,
    /// `train.seed` seeds everything: weights, augmentation and batching.
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::mn7_45(11);
        model.with_simam = true;
        Self {
            schema_version: SCHEMA_VERSION,
            data: DataConfig::default(),
            frontend: FrontendConfig::default(),
            model,
            norm: NormSection::default(),
            augment: AugmentPlan::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from the defaults), applies `key=value`
    /// overrides, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| KwsError::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| KwsError::config("<file>", format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::try_from(RunConfig::default()).expect("defaults serialize"),
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg = Self::from_table(tree)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let tree = toml::from_str::<toml::Table>(text).map_err(|e| KwsError::config("<file>", e.message()))?;
        Self::from_table(tree)
    }

    fn from_table(tree: toml::Table) -> Result<Self> {
        serde_path_to_error::deserialize(toml::Value::Table(tree)).map_err(|e| {
            let key = e.path().to_string();
            KwsError::config(key, e.into_inner().to_string().trim().to_string())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(KwsError::config(
                "schema_version",
                format!("found {}, this build reads {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        self.frontend.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let classes = self.data.ingest.keywords.len() + 1;
        if self.model.num_classes != classes {
            return Err(KwsError::config(
                "model.num_classes",
                format!("{} keywords plus unknown need {classes} classes", self.data.ingest.keywords.len()),
            ));
        }
        if self.model.input_bins != self.frontend.num_mel_bins {
            return Err(KwsError::config("model.input_bins", "must equal frontend.num_mel_bins"));
        }
        let frames = self.augment.clip_samples.div_ceil(self.frontend.frame_shift);
        if self.model.input_frames != frames {
            return Err(KwsError::config(
                "model.input_frames",
                format!("{} samples at shift {} give {frames} frames", self.augment.clip_samples, self.frontend.frame_shift),
            ));
        }
        if self.eval.far_targets.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(KwsError::config("eval.far_targets", "rates lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Sets a dotted key in the TOML tree. The value is parsed as TOML and
/// falls back to a bare string, so `train.strategy=DAT` works unquoted.
fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| KwsError::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = tree;
    for (i, p) in parents.iter().enumerate() {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| KwsError::config(parts[..=i].join("."), "is not a table"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
