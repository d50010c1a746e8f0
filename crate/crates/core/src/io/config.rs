//! JSON run configuration.
//!
//! ```json
//! {
//!   "model": {"image_size": 16, "patch_size": 4, "in_channels": 3, "embed_dim": 64,
//!             "num_heads": 4, "depth": 4, "num_classes": 10},
//!   "grid": {"s": "1/4", "l": "1", "eps": "1/4"},
//!   "train": {"epochs": 20, "batch_size": 50, "lr": 0.003, "seed": 7},
//!   "data": {"kind": "synthetic", "num_classes": 10, "image_size": 16, "seed": 1,
//!            "noise": 0.3, "train": 1000, "test": 500},
//!   "output": {"dir": "runs/toy"}
//! }
//! ```
//!
//! Loading validates everything up front; the first failure is reported
//! with the name of the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::idx::load_idx;
use super::synthetic::{Split, SyntheticSpec};
use crate::coordination::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::slicing::RatioGrid;

/// Overrides `output.dir` when set.
pub const OUTPUT_DIR_ENV: &str = "SLIMVIT_OUTPUT_DIR";

fn three() -> usize {
    3
}

fn four() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "three")]
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    #[serde(default = "four")]
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Idx(IdxSpec),
}

fn default_dir() -> PathBuf {
    PathBuf::from(".")
}

fn default_teacher() -> PathBuf {
    PathBuf::from("teacher.sclc")
}

fn default_checkpoint() -> PathBuf {
    PathBuf::from("scala.sclc")
}

fn default_metrics() -> PathBuf {
    PathBuf::from("metrics.csv")
}

fn default_teacher_metrics() -> PathBuf {
    PathBuf::from("teacher_metrics.csv")
}

/// Output locations; relative paths are resolved against `dir`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_teacher")]
    pub teacher: PathBuf,
    #[serde(default = "default_checkpoint")]
    pub checkpoint: PathBuf,
    #[serde(default = "default_metrics")]
    pub metrics: PathBuf,
    #[serde(default = "default_teacher_metrics")]
    pub teacher_metrics: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_dir(),
            teacher: default_teacher(),
            checkpoint: default_checkpoint(),
            metrics: default_metrics(),
            teacher_metrics: default_teacher_metrics(),
        }
    }
}

impl OutputConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.dir.join(p)
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.resolve(&self.teacher)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.resolve(&self.checkpoint)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.resolve(&self.metrics)
    }

    pub fn teacher_metrics_path(&self) -> PathBuf {
        self.resolve(&self.teacher_metrics)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelBlock,
    pub grid: RatioGrid,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    /// Reads, parses and validates `path`. Relative data paths are taken
    /// relative to the config file; the output directory honours
    /// [`OUTPUT_DIR_ENV`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DataConfig::Idx(spec) = &mut cfg.data {
            for p in [
                &mut spec.train_images,
                &mut spec.train_labels,
                &mut spec.test_images,
                &mut spec.test_labels,
            ] {
                *p = base.join(&*p);
            }
        }
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output.dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::validation("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The network described by the model and grid blocks, with the
    /// isolated-activation flag taken from the train block.
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            image_size: m.image_size,
            patch_size: m.patch_size,
            in_channels: m.in_channels,
            embed_dim: m.embed_dim,
            num_heads: m.num_heads,
            depth: m.depth,
            mlp_ratio: m.mlp_ratio,
            num_classes: m.num_classes,
            grid: Some(self.grid),
            isolated_activation: self.train.isolated_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model_config();
        model.validate()?;
        if self.grid.num_networks() < 4 {
            return Err(Error::validation(
                "grid",
                format!(
                    "{} ratios leave a sampling band empty; need at least 4",
                    self.grid.num_networks()
                ),
            ));
        }
        self.train.validate()?;
        let (classes, size, channels) = match &self.data {
            DataConfig::Synthetic(s) => {
                s.validate()?;
                (s.num_classes, s.image_size, s.channels)
            }
            DataConfig::Idx(s) => (s.num_classes, self.model.image_size, 1),
        };
        if classes != model.num_classes {
            return Err(Error::validation(
                "data.num_classes",
                format!("{classes} differs from model.num_classes {}", model.num_classes),
            ));
        }
        if size != model.image_size {
            return Err(Error::validation(
                "data.image_size",
                format!("{size} differs from model.image_size {}", model.image_size),
            ));
        }
        if channels != model.in_channels {
            return Err(Error::validation(
                "model.in_channels",
                format!("{} but the data has {channels} channels", model.in_channels),
            ));
        }
        Ok(())
    }

    pub fn load_split(&self, split: Split) -> Result<Dataset> {
        let ds = match &self.data {
            DataConfig::Synthetic(s) => s.generate(split)?,
            DataConfig::Idx(s) => match split {
                Split::Train => load_idx(&s.train_images, &s.train_labels, s.num_classes)?,
                Split::Test => load_idx(&s.test_images, &s.test_labels, s.num_classes)?,
            },
        };
        if ds.size != self.model.image_size {
            return Err(Error::validation(
                "data",
                format!("images are {}px, model expects {}px", ds.size, self.model.image_size),
            ));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TOY: &str = r#"{
        "model": {"image_size": 16, "patch_size": 4, "embed_dim": 64, "num_heads": 4,
                  "depth": 4, "num_classes": 10},
        "grid": {"s": "1/4", "l": "1", "eps": "1/4"},
        "train": {"epochs": 2, "batch_size": 8, "lr": 0.001, "seed": 3, "pkt": false},
        "data": {"kind": "synthetic", "num_classes": 10, "image_size": 16, "seed": 1,
                 "noise": 0.3, "train": 20, "test": 10}
    }"#;

    #[test]
    fn toy_config_parses_with_defaults() {
        let cfg = RunConfig::parse(TOY).unwrap();
        assert_eq!(cfg.model.in_channels, 3);
        assert_eq!(cfg.grid.num_networks(), 4);
        assert!(!cfg.train.pkt && cfg.train.stable_sampling);
        assert_eq!(cfg.train.lambda, 1.0);
        assert_eq!(cfg.output.checkpoint_path(), PathBuf::from("./scala.sclc"));
        assert_eq!(cfg.model_config().grid, Some(cfg.grid));
    }

    fn expect_field(text: &str, field: &str) {
        let err = RunConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains(field), "expected {field} in: {err}");
    }

    #[test]
    fn invalid_fields_are_named() {
        expect_field(&TOY.replace("\"embed_dim\": 64", "\"embed_dim\": 62"), "model.embed_dim");
        expect_field(&TOY.replace("\"num_heads\": 4", "\"num_heads\": 32"), "model.num_heads");
        expect_field(&TOY.replace("\"eps\": \"1/4\"", "\"eps\": \"1/3\""), "grid");
        expect_field(&TOY.replace("\"eps\": \"1/4\"", "\"eps\": \"3/8\""), "grid");
        expect_field(&TOY.replace("\"lr\": 0.001", "\"lr\": -1"), "train.lr");
        expect_field(&TOY.replace("\"batch_size\": 8", "\"batch_size\": 0"), "train.batch_size");
        expect_field(&TOY.replace("\"noise\": 0.3", "\"noise\": -0.3"), "data.noise");
        expect_field(&TOY.replace("\"seed\": 3,", "\"seed\": 3, \"bogus\": 1,"), "bogus");
        expect_field(&TOY.replace("\"lr\": 0.001,", ""), "lr");
        expect_field(
            &TOY.replace("\"num_classes\": 10, \"image_size\": 16", "\"num_classes\": 9, \"image_size\": 16"),
            "data.num_classes",
        );
    }
}
