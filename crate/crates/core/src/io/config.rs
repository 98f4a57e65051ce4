//! TOML run configuration. Every field has a default and unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::affinity::{NormalizeMode, PropagationConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::head::HeadConfig;
use crate::io::read_file;
use crate::pipeline::PipelineConfig;
use crate::synth::{DetectorModel, SceneConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Propagation settings used by training and inference runs: sharp softmax
/// rows, so each cell attends to its few most similar cells.
pub fn run_propagation() -> PropagationConfig {
    PropagationConfig {
        mode: NormalizeMode::Softmax,
        row_temperature: 0.02,
        attention_temperature: 0.25,
        ..PropagationConfig::default()
    }
}

/// Training settings used by runs. The higher learning rate lets the head
/// leave the all-background solution within the default step budget.
pub fn run_train() -> TrainConfig {
    TrainConfig {
        lr: 0.05,
        ..TrainConfig::default()
    }
}

// A partial `[train]` table falls back to `run_train()`, not `TrainConfig::default()`.
fn train_over_run_defaults<'de, D>(de: D) -> std::result::Result<TrainConfig, D::Error>
where
    D: serde::Deserializer<'de>,
{
    use serde::de::Error as _;
    let given = toml::Table::deserialize(de)?;
    let mut table = toml::Table::try_from(run_train()).map_err(D::Error::custom)?;
    table.extend(given);
    table.try_into().map_err(D::Error::custom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds scene generation, the detector model and training.
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub propagation: PropagationConfig,
    pub head: HeadConfig,
    #[serde(deserialize_with = "train_over_run_defaults")]
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
    pub detector: DetectorModel,
    pub scene: SceneConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            propagation: run_propagation(),
            head: HeadConfig::default(),
            train: run_train(),
            pipeline: PipelineConfig::default(),
            eval: EvalConfig::default(),
            detector: DetectorModel::default(),
            scene: SceneConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.propagation.validate()?;
        if self.head.hidden_width == 0 {
            return Err(Error::Config("head.hidden_width must be at least 1".into()));
        }
        self.train.validate()?;
        self.pipeline.validate()?;
        self.eval.validate()?;
        self.detector.validate()?;
        self.scene.validate()
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.train.steps = 7;
        cfg.paths.dataset = Some("data".into());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(RunConfig::from_toml("sede = 3"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml("[train]\nstepz = 3"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_toml("seed = 5\n[pipeline]\nfill = false\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert!(!cfg.pipeline.fill);
        assert_eq!(cfg.pipeline.match_iou, 0.5);
        assert_eq!(cfg.train_config().seed, 5);
    }

    #[test]
    fn partial_train_table_keeps_run_learning_rate() {
        let cfg = RunConfig::from_toml("[train]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.lr, run_train().lr);
        let cfg = RunConfig::from_toml("[train]\nlr = 0.01\n").unwrap();
        assert_eq!(cfg.train.lr, 0.01);
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(RunConfig::from_toml("[pipeline]\nmatch_iou = 1.5").is_err());
        assert!(RunConfig::from_toml("[train]\ndecay_points = [0.9, 0.5]").is_err());
    }
}
