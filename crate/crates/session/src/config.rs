//! Service configuration: listen address, weights, session root and
//! backend registry. Files are TOML or JSON; `SEGEDIT_*` environment
//! variables override individual fields.

use std::path::{Path, PathBuf};

use segedit_core::backend::BackendConfig;
use segedit_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "SEGEDIT_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    /// Generator checkpoint; without one the service starts from freshly
    /// initialised weights.
    pub weights: Option<PathBuf>,
    pub session_root: PathBuf,
    pub backends: BackendConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            weights: None,
            session_root: PathBuf::from("sessions"),
            backends: BackendConfig::default(),
        }
    }
}

impl ServiceConfig {
    /// Parses TOML, or JSON when `path` ends in `.json`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parameter(format!("config: {e}")))
    }

    /// Applies overrides from `(name, value)` pairs; names without the
    /// prefix are ignored and unknown prefixed names are rejected.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: Into<String>,
    {
        for (key, value) in vars {
            let Some(name) = key.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let value = value.into();
            match name {
                "LISTEN" => self.listen = value,
                "WEIGHTS" => self.weights = (!value.is_empty()).then(|| PathBuf::from(value)),
                "SESSION_ROOT" => self.session_root = PathBuf::from(value),
                "BACKEND_SEGMENTATION" => self.backends.segmentation = value,
                "BACKEND_DETECTION" => self.backends.detection = value,
                "BACKEND_SUPER_RESOLUTION" => self.backends.super_resolution = value,
                "BACKEND_INPAINTING" => self.backends.inpainting = value,
                "CONFIG" => {}
                other => return Err(Error::Parameter(format!("unknown environment override {ENV_PREFIX}{other}"))),
            }
        }
        Ok(())
    }

    /// Defaults or `path`, then the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        config.apply_env(std::env::vars())?;
        Ok(config)
    }
}
