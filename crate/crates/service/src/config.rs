//! Service configuration: store root and adapter selection.

use std::path::{Path, PathBuf};

use caplens_core::adapter::AdapterConfig;
use caplens_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const STORE_ENV: &str = "CAPLENS_STORE";
pub const ADAPTER_CONFIG_ENV: &str = "CAPLENS_ADAPTER_CONFIG";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub store: PathBuf,
    pub adapter: AdapterConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            store: PathBuf::from("caplens-store"),
            adapter: AdapterConfig::default(),
        }
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

impl ServiceConfig {
    /// Load from an optional TOML file, then apply environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => read_toml(p)?,
            None => Self::default(),
        };
        if let Some(store) = std::env::var_os(STORE_ENV) {
            cfg.store = store.into();
        }
        if let Some(adapter) = std::env::var_os(ADAPTER_CONFIG_ENV) {
            cfg.adapter = read_toml(Path::new(&adapter))?;
        }
        Ok(cfg)
    }
}
