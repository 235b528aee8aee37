//! Configuration resolution: built-in defaults, then the JSON config file,
//! then command-line flags.

use std::path::Path;

use anyhow::Result;
use guidenet::train::ComparisonConfig;
use guidenet::Error;

/// The config file has the shape of [`ComparisonConfig`]; every field is
/// optional and missing ones keep their defaults. `gen-data` reads
/// `generator`, `train` reads `train`, `compare` reads everything.
pub fn load(path: Option<&Path>) -> Result<ComparisonConfig> {
    let Some(path) = path else {
        return Ok(ComparisonConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let config = serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
    Ok(config)
}

/// Overwrites `slot` when the flag was given.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}
