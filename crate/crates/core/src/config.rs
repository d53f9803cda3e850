use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gapnet::ModelConfig;
use crate::headmodel::SyntheticTemplateConfig;
use crate::losses::LossWeights;
use crate::pipeline::{PersonalizationConfig, PriorConfig};
use crate::synthdata::DatasetSpec;

/// Dataset location and, for generation, its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: String,
    pub identities: usize,
    pub views: usize,
    pub expressions: usize,
    pub resolution: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: "data".into(),
            identities: 9,
            views: 16,
            expressions: 3,
            resolution: 64,
        }
    }
}

impl DataConfig {
    pub fn spec(&self, seed: u64) -> DatasetSpec {
        DatasetSpec {
            identities: self.identities,
            views: self.views,
            expressions: self.expressions,
            resolution: self.resolution,
            seed,
        }
    }
}

/// Everything a command needs; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub template: SyntheticTemplateConfig,
    pub model: ModelConfig,
    pub prior: PriorConfig,
    pub personalization: PersonalizationConfig,
    pub losses: LossWeights,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` overrides with dotted keys, e.g.
    /// `prior.steps=100`. Values parse as TOML, falling back to strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<RunConfig> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut table = &mut doc;
            for p in &parts[..parts.len() - 1] {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override key {key:?} descends into a value")))?;
            }
            table.insert(parts[parts.len() - 1].to_string(), value);
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        RunConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.losses.validate()?;
        self.prior.validate()?;
        self.personalization.validate()?;
        if self.data.resolution < crate::losses::SSIM_WINDOW {
            return Err(Error::Config(format!(
                "data.resolution must be at least {}",
                crate::losses::SSIM_WINDOW
            )));
        }
        Ok(())
    }
}
