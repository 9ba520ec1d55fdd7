//! Shared structured-text configuration format.
//!
//! Every config file (table, chain, noise, strategy, ensemble manifest) is a
//! TOML document carrying a top-level `format_version` key. Loading rejects
//! unknown versions so that stale files fail loudly instead of silently
//! picking up new defaults.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Version written into and expected from every config file.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("unsupported format_version {found} in {path} (expected {FORMAT_VERSION})")]
    Version { path: String, found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(serde::Deserialize)]
struct VersionProbe {
    format_version: Option<u32>,
}

/// Parses a TOML document after checking its `format_version`.
///
/// `origin` is only used in error messages.
pub fn from_toml_str<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, ConfigError> {
    let probe: VersionProbe = toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    let found = probe.format_version.ok_or_else(|| ConfigError::Parse {
        path: origin.to_string(),
        message: "missing format_version".into(),
    })?;
    if found != FORMAT_VERSION {
        return Err(ConfigError::Version {
            path: origin.to_string(),
            found,
        });
    }
    toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_toml_str(&text, &path.display().to_string())
}

pub fn to_toml_string<T: Serialize>(value: &T) -> Result<String, ConfigError> {
    toml::to_string_pretty(value).map_err(|e| ConfigError::Invalid(e.to_string()))
}

pub fn save<T: Serialize>(value: &T, path: &Path) -> Result<(), ConfigError> {
    let text = to_toml_string(value)?;
    fs::write(path, text).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Short content hash of a serializable config, used in replay headers and
/// manifests. Hashes the canonical TOML rendering, not the source file.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = toml::to_string(value).unwrap_or_default();
    bytes_hash(text.as_bytes())
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}
