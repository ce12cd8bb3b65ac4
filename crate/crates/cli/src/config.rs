//! Run-configuration loading: JSON file, then `MIXWB_SEED`, then flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

pub const SEED_ENV: &str = "MIXWB_SEED";

/// A parsed config file (or the defaults) plus the raw JSON, used to tell
/// which keys the file set explicitly.
pub struct Loaded<T> {
    pub value: T,
    raw: Value,
}

impl<T: DeserializeOwned + Default> Loaded<T> {
    pub fn from_file(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Loaded { value: T::default(), raw: Value::Object(Default::default()) });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let raw: Value =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let value =
            serde_json::from_value(raw.clone()).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Ok(Loaded { value, raw })
    }

    /// Whether the file set the key at `path` (e.g. `["train", "seed"]`).
    pub fn file_sets(&self, path: &[&str]) -> bool {
        let mut v = &self.raw;
        for k in path {
            match v.get(k) {
                Some(next) => v = next,
                None => return false,
            }
        }
        true
    }

    /// Resolves a seed: flag, else file, else `MIXWB_SEED`, else the default
    /// already in place.
    pub fn seed(&self, flag: Option<u64>, path: &[&str], current: u64) -> Result<u64, CliError> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if self.file_sets(path) {
            return Ok(current);
        }
        Ok(env_seed()?.unwrap_or(current))
    }
}

pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Help footer listing every config-file key with its default.
pub fn defaults_help<T: Default + Serialize>() -> String {
    let json = serde_json::to_string_pretty(&T::default()).unwrap_or_default();
    format!(
        "Config file keys (--config FILE, JSON) and their defaults:\n{json}\n\n\
         Precedence: command-line flag > config file > {SEED_ENV} (seeds only) > default."
    )
}
