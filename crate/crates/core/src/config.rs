//! Loading and saving flat TOML configuration files.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Reads a TOML file into `T`; unknown keys are rejected by the types that
/// ask for it.
pub fn read_toml<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_toml<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = toml::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
