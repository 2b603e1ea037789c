use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic_dataset, load_dataset, PoseDataset, SceneConfig, Split, SyntheticScene,
};
use crate::model::ModelConfig;
use crate::train::{AugmentConfig, TrainConfig};
use crate::{Error, Result};

/// Where training and test images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root; image paths in listings are relative to it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Listing files, relative to `root` unless absolute.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_listing: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_listing: Option<PathBuf>,
    /// Render a synthetic scene instead of reading files.
    pub synthetic: bool,
    pub image_size: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            train_listing: None,
            test_listing: None,
            synthetic: false,
            image_size: 64,
            train_samples: 256,
            test_samples: 64,
            train_seed: 1,
            test_seed: 2,
            scene: SceneConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn load(&self, split: Split) -> Result<PoseDataset> {
        if self.synthetic {
            let scene = SyntheticScene::new(self.scene.clone())?;
            let (n, seed) = match split {
                Split::Train => (self.train_samples, self.train_seed),
                Split::Test => (self.test_samples, self.test_seed),
            };
            return generate_synthetic_dataset(&scene, n, self.image_size, seed, split);
        }
        let root = self.root.as_ref().ok_or_else(|| {
            Error::Config("data.root is required unless data.synthetic is set".into())
        })?;
        let listing = match split {
            Split::Train => &self.train_listing,
            Split::Test => &self.test_listing,
        }
        .as_ref()
        .ok_or_else(|| {
            Error::Config(format!(
                "data.{}_listing is required unless data.synthetic is set",
                if split == Split::Train {
                    "train"
                } else {
                    "test"
                }
            ))
        })?;
        let mut data = load_dataset(root, &root.join(listing))?;
        data.split = split;
        Ok(data)
    }
}

/// Everything a command needs, read from one TOML file with sections
/// `[model]`, `[train]`, `[augment]` and `[data]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Parses a config file and applies `section.key=value` overrides. The
    /// value is read as a TOML value, falling back to a bare string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>().map_err(|e| Error::Parse {
                    path: p.to_path_buf(),
                    line: e.span().map(|s| line_of(&text, s.start)).unwrap_or(0),
                    msg: e.message().to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.augment.crop != self.model.input_size {
            return Err(Error::Config(format!(
                "augment.crop ({}) must equal model.input_size ({})",
                self.augment.crop, self.model.input_size
            )));
        }
        Ok(())
    }

    /// The config with every default made explicit, as TOML.
    pub fn resolved_toml(&self) -> Result<String> {
        let resolved = RunConfig {
            train: self.train.resolved(),
            ..self.clone()
        };
        toml::to_string(&resolved).map_err(|e| Error::Config(e.to_string()))
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
