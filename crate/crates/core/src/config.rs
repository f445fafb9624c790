//! Experiment configuration.
//!
//! Configs are TOML documents, usually written with dotted keys:
//!
//! ```toml
//! run_id = "vision-toy"
//!
//! model.kind = "encoder_vision"
//! model.depth = 2
//! model.d_model = 32
//! model.n_heads = 2
//! model.d_ff = 64
//! model.n_classes = 4
//! model.image_side = 8
//! model.channels = 1
//! model.patch_size = 4
//!
//! data.source = "synthetic_vision"
//! data.seed = 0
//! data.n_train = 2000
//! data.n_val = 500
//! data.side = 8
//! data.n_classes = 4
//!
//! train.mode = "vision_full_train"
//! train.epochs = 30
//! train.batch_size = 32
//! train.seed = 0
//! train.p = 0.3
//! train.optimizer.kind = "adamw"
//! train.optimizer.lr = 0.001
//! train.detector.epsilon = 0.1
//! train.detector.max_epochs = 30
//! ```
//!
//! Any key can be overridden with [`set_key`] using the same dotted path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, TextGen, VisionGen};
use crate::error::{Error, Result};
use crate::model::{InputSpec, ModelConfig};
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataSpec,
    pub train: TrainConfig,
    /// Starting point for `language_finetune` runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PretrainSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    SyntheticVision(VisionGen),
    SyntheticText(TextGen),
    /// CIFAR-10 binary batches; the first file is the train split, the second validation.
    Cifar10 {
        train_path: PathBuf,
        val_path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit_train: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit_val: Option<usize>,
    },
}

/// Where a fine-tuning run's weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum PretrainSpec {
    /// Classification warm-up on a synthetic text task whose marker tokens are
    /// disjoint from the fine-tuning task's. Requires `synthetic_text` data.
    Warmup {
        seed: u64,
        epochs: usize,
        marker_offset: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n_train: Option<usize>,
    },
    /// Checkpoint stem written by [`crate::model::checkpoint::save`].
    Checkpoint { path: PathBuf },
}

impl PretrainSpec {
    /// The warm-up task for `data`: same generator, new seed, shifted markers.
    pub fn warmup_task(&self, data: &DataSpec) -> Result<Option<TextGen>> {
        let PretrainSpec::Warmup {
            seed,
            marker_offset,
            n_train,
            ..
        } = self
        else {
            return Ok(None);
        };
        let DataSpec::SyntheticText(gen) = data else {
            return Err(Error::Config(
                "warm-up pretraining needs synthetic_text data".into(),
            ));
        };
        let lo = gen.marker_offset.max(*marker_offset);
        let hi = gen.marker_offset.min(*marker_offset) + gen.n_classes * gen.markers_per_class;
        if lo < hi {
            return Err(Error::Config(format!(
                "warm-up marker_offset {marker_offset} overlaps the task's marker tokens"
            )));
        }
        Ok(Some(TextGen {
            seed: *seed,
            n_train: n_train.unwrap_or(gen.n_train),
            n_val: gen.n_val.max(1),
            marker_offset: *marker_offset,
            ..gen.clone()
        }))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, applying `key=value` overrides before validation.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (k, v) in overrides {
            set_key(&mut table, k, v)?;
        }
        Self::from_table(table)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty()
            || self.run_id.contains(['/', '\\'])
            || self.run_id.starts_with('.')
        {
            return Err(Error::Config(format!(
                "run_id {:?} is not a plain directory name",
                self.run_id
            )));
        }
        let spec = self.model.validate()?;
        self.train.validate()?;
        let kind_ok = matches!(
            (&self.data, spec),
            (
                DataSpec::SyntheticVision(_) | DataSpec::Cifar10 { .. },
                InputSpec::Vision { .. }
            ) | (DataSpec::SyntheticText(_), InputSpec::Text { .. })
        );
        if !kind_ok {
            return Err(Error::Config(
                "data source does not match the model kind".into(),
            ));
        }
        match (&self.data, spec) {
            (
                DataSpec::SyntheticVision(g),
                InputSpec::Vision {
                    image_side,
                    channels,
                    ..
                },
            ) if g.side != image_side || g.channels != channels => {
                return Err(Error::Config(format!(
                    "data is {}x{}x{} but the model expects {channels}x{image_side}x{image_side}",
                    g.channels, g.side, g.side
                )))
            }
            (
                DataSpec::SyntheticText(g),
                InputSpec::Text {
                    vocab_size,
                    max_len,
                },
            ) => {
                if g.vocab_size > vocab_size || g.max_len > max_len {
                    return Err(Error::Config(format!(
                        "text data (vocab {}, length {}) exceeds the model (vocab {vocab_size}, length {max_len})",
                        g.vocab_size, g.max_len
                    )));
                }
            }
            (
                DataSpec::Cifar10 { .. },
                InputSpec::Vision {
                    image_side,
                    channels,
                    ..
                },
            ) if image_side != data::CIFAR10_SIDE || channels != 3 => {
                return Err(Error::Config(
                    "CIFAR-10 needs image_side = 32 and channels = 3".into(),
                ))
            }
            _ => {}
        }
        let data_classes = match &self.data {
            DataSpec::SyntheticVision(g) => g.n_classes,
            DataSpec::SyntheticText(g) => g.n_classes,
            DataSpec::Cifar10 { .. } => data::CIFAR10_CLASSES,
        };
        if data_classes != self.model.n_classes {
            return Err(Error::Config(format!(
                "data has {data_classes} classes but the model has {}",
                self.model.n_classes
            )));
        }
        match (self.train.mode, &self.pretrained) {
            (TrainMode::LanguageFinetune, None) => {
                return Err(Error::Config(
                    "language_finetune needs a pretrained source".into(),
                ))
            }
            (TrainMode::VisionFullTrain, Some(_)) => {
                return Err(Error::Config(
                    "vision_full_train starts from a fresh init; drop `pretrained`".into(),
                ))
            }
            (_, Some(p)) => {
                p.warmup_task(&self.data)?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Generates or reads the dataset.
    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataSpec::SyntheticVision(g) => data::gen_vision(g),
            DataSpec::SyntheticText(g) => data::gen_text(g),
            DataSpec::Cifar10 {
                train_path,
                val_path,
                limit_train,
                limit_val,
            } => {
                let train = truncate(data::read_cifar10_binary(train_path)?, *limit_train)?;
                let val = truncate(data::read_cifar10_binary(val_path)?, *limit_val)?;
                train.with_validation(val)
            }
        }
    }
}

fn truncate(ds: Dataset, limit: Option<usize>) -> Result<Dataset> {
    match limit {
        Some(n) if n < ds.len() => {
            let idx: Vec<usize> = (0..n).collect();
            let inputs = match ds.inputs() {
                data::Inputs::Images {
                    channels,
                    side,
                    pixels,
                } => data::Inputs::Images {
                    channels: *channels,
                    side: *side,
                    pixels: pixels[..n * channels * side * side].to_vec(),
                },
                data::Inputs::Tokens { seq_len, ids } => data::Inputs::Tokens {
                    seq_len: *seq_len,
                    ids: ids[..n * seq_len].to_vec(),
                },
            };
            let labels = idx.iter().map(|&i| ds.labels()[i]).collect();
            Dataset::new(inputs, labels, ds.n_classes(), n.min(ds.n_train()))
        }
        _ => Ok(ds),
    }
}

/// Sets a dotted key in a TOML table. The value is read as a TOML literal
/// when it parses as one (`0.3`, `true`, `"x"`, `[1, 2]`) and as a bare
/// string otherwise.
pub fn set_key(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let slot = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
