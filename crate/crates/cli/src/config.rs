//! JSON experiment configs. A config file is an object holding the
//! subcommand's settings plus optional top-level `seed` and `jobs`; missing
//! keys keep their defaults and unknown keys are rejected.

use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::Value;

/// Bad command line or config; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// A parsed config file before flag overrides.
#[derive(Debug)]
pub struct Loaded<T> {
    pub body: T,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

/// Reads `path` (or defaults when `None`).
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<Loaded<T>> {
    let Some(path) = path else {
        return Ok(Loaded {
            body: T::default(),
            seed: None,
            jobs: None,
        });
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    parse(value).map_err(|e| config_error(format!("{}: {}", path.display(), e.0)))
}

/// Splits off `seed` and `jobs`, then deserializes the rest.
pub fn parse<T: DeserializeOwned>(value: Value) -> Result<Loaded<T>, ConfigError> {
    let Value::Object(mut map) = value else {
        return Err(ConfigError("top level must be a JSON object".into()));
    };
    let seed = match map.remove("seed") {
        None => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| ConfigError(format!("seed must be a u64, got {v}")))?,
        ),
    };
    let jobs = match map.remove("jobs") {
        None => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| ConfigError(format!("jobs must be a positive integer, got {v}")))?
                as usize,
        ),
    };
    let body =
        serde_json::from_value(Value::Object(map)).map_err(|e| ConfigError(e.to_string()))?;
    Ok(Loaded { body, seed, jobs })
}

/// Fails with a [`ConfigError`] unless `ok`.
pub fn require(ok: bool, msg: impl FnOnce() -> String) -> anyhow::Result<()> {
    if ok {
        Ok(())
    } else {
        Err(config_error(msg()))
    }
}
