//! Layered run configuration: preset, then an optional TOML file, then flags.

use std::path::Path;

use anyhow::Result;
use catf_core::model::ModelConfig;
use catf_core::scene::GenConfig;
use catf_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::usage;

/// Everything `train` needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let train = TrainConfig::preset(name).map_err(|e| usage(format!("--preset: {e}")))?;
        let model = ModelConfig::preset(name).map_err(|e| usage(format!("--preset: {e}")))?;
        Ok(RunConfig { train, model })
    }
}

/// Recursively overlay `top` onto `base`; tables merge key by key, anything
/// else is replaced.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` with the TOML file at `path` (if any) merged on top. Errors name `flag`.
pub fn layer<T>(base: &T, path: Option<&Path>, flag: &str) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let Some(path) = path else {
        return Ok(toml::from_str(&toml::to_string(base)?)?);
    };
    let text =
        std::fs::read_to_string(path).map_err(|e| usage(format!("{flag}: cannot read {}: {e}", path.display())))?;
    let top: Value = toml::from_str(&text).map_err(|e| usage(format!("{flag}: {}: {e}", path.display())))?;
    let mut value = Value::try_from(base)?;
    merge(&mut value, top);
    value
        .try_into()
        .map_err(|e| usage(format!("{flag}: {}: {e}", path.display())))
}

pub fn echo<T: Serialize>(title: &str, cfg: &T) -> Result<()> {
    eprintln!("# resolved {title} config\n{}", toml::to_string(cfg)?);
    Ok(())
}

pub fn gen_config(path: Option<&Path>) -> Result<GenConfig> {
    layer(&GenConfig::default(), path, "--config")
}
