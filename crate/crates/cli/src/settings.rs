//! Configuration file, flag overrides and seed resolution.

use std::fs;
use std::path::Path;

use mtinet::phantom::PhantomConfig;
use mtinet::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

pub const SEED_ENV: &str = "MTI_SEED";

/// Contents of a `--config` file. Every field is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfigFile {
    pub train: TrainConfig,
    pub phantom: PhantomConfig,
    /// Samples per class for `generate`.
    pub per_class: Option<usize>,
    /// Concurrent folds for `crossval`.
    pub jobs: Option<usize>,
}

/// A parsed configuration file plus which optional keys it set explicitly.
pub struct Loaded {
    pub file: CliConfigFile,
    pub seed_set: bool,
    pub dims_set: bool,
}

pub fn load(path: Option<&Path>) -> Result<Loaded, CliError> {
    let Some(path) = path else {
        return Ok(Loaded {
            file: CliConfigFile::default(),
            seed_set: false,
            dims_set: false,
        });
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("--config {}: {e}", path.display())))?;
    let raw: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("--config {}: {e}", path.display())))?;
    let file: CliConfigFile = serde_json::from_value(raw.clone())
        .map_err(|e| CliError::usage(format!("--config {}: {e}", path.display())))?;
    let model = raw.pointer("/train/model");
    let dims_set = model.is_some_and(|m| m.get("height").is_some() || m.get("width").is_some());
    Ok(Loaded {
        file,
        seed_set: raw.pointer("/train/seed").is_some(),
        dims_set,
    })
}

/// Flag, then config file, then the environment, then zero.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}
