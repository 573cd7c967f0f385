//! TOML run configuration layered over presets, with flags applied last.

use std::path::Path;

use latent_relight::data::SyntheticSceneSpec;
use latent_relight::train::TrainConfig;
use latent_relight::ModelConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "LATENT_RELIGHT_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 256-px model, batch 256, 1000 epochs.
    #[default]
    Full,
    /// 64-px model, batch 16, 125 epochs.
    Tiny,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Full => ModelConfig::default(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Preset::Full => TrainConfig::default(),
            Preset::Tiny => TrainConfig::tiny(),
        }
    }
}

/// Contents of a `--config` file. Sections are partial overrides.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub model: Option<toml::Table>,
    pub train: Option<toml::Table>,
    pub synth: Option<toml::Table>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn model(&self, preset: Preset) -> Result<ModelConfig, CliError> {
        overlay(&preset.model(), self.model.as_ref(), "model")
    }

    pub fn train(&self, preset: Preset) -> Result<TrainConfig, CliError> {
        overlay(&preset.train(), self.train.as_ref(), "train")
    }

    pub fn synth(&self) -> Result<SyntheticSceneSpec, CliError> {
        overlay(&SyntheticSceneSpec::default(), self.synth.as_ref(), "synth")
    }

    /// Flag, then config file, then the environment, then 0.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }
}

/// Replaces the fields of `base` named in `patch`.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<&toml::Table>, section: &str) -> Result<T, CliError> {
    let Some(patch) = patch else {
        let table = toml::Table::new();
        return overlay(base, Some(&table), section);
    };
    let mut merged = match toml::Value::try_from(base) {
        Ok(toml::Value::Table(t)) => t,
        _ => return Err(CliError::Usage(format!("[{section}] defaults are not a table"))),
    };
    for (k, v) in patch {
        if !merged.contains_key(k) && !optional_field(base, k) {
            return Err(CliError::Usage(format!("[{section}] has no setting named {k:?}")));
        }
        merge(&mut merged, k, v.clone());
    }
    toml::Value::Table(merged).try_into().map_err(|e| CliError::Usage(format!("[{section}]: {e}")))
}

/// Fields serialized as `None` are absent from the TOML table but still valid.
fn optional_field<T: Serialize>(base: &T, key: &str) -> bool {
    serde_json::to_value(base).ok().and_then(|v| v.get(key).map(|x| x.is_null())).unwrap_or(false)
}

fn merge(table: &mut toml::Table, key: &str, value: toml::Value) {
    match (table.get_mut(key), value) {
        (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => {
            for (k, v) in src {
                merge(dst, &k, v);
            }
        }
        (_, value) => {
            table.insert(key.to_string(), value);
        }
    }
}
