//! Operator configuration, read from a TOML file.
//!
//! Secrets never live here: backends and the operator endpoints name the
//! environment variable that holds them.

use std::path::{Path, PathBuf};

use labelforge_core::gateway::BackendConfig;
use labelforge_core::verification::ResolutionPolicy;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Defaults {
    pub policy: ResolutionPolicy,
    pub overlap_fraction: f64,
    pub overlap_coders: usize,
    pub outage_threshold: usize,
    /// Documents in flight during crowd classification.
    pub workers: usize,
    /// Scale checkpoint interval.
    pub batch_size: usize,
    /// Scale requests in flight.
    pub concurrency: usize,
    pub doc_attempts: u32,
    pub ratio: f64,
    pub seed: u64,
}

impl Default for Defaults {
    fn default() -> Self {
        Defaults {
            policy: ResolutionPolicy::AnyRejectDrops,
            overlap_fraction: 0.2,
            overlap_coders: 2,
            outage_threshold: 5,
            workers: 8,
            batch_size: 100,
            concurrency: 8,
            doc_attempts: 2,
            ratio: 0.7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub store: PathBuf,
    pub bind: String,
    /// Directory with the built web UI; not served when absent.
    pub static_dir: Option<PathBuf>,
    /// Job directories (journals, checkpoints) live under here.
    pub work_dir: PathBuf,
    /// Env var holding the bearer token for operator endpoints. Unset means
    /// operator endpoints are open (suitable for localhost only).
    pub operator_token_env: Option<String>,
    /// Extra prompt template files (TOML) added to the builtin registry.
    pub templates: Vec<PathBuf>,
    pub defaults: Defaults,
    pub backends: Vec<BackendConfig>,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            store: PathBuf::from("labelforge.db"),
            bind: "127.0.0.1:8080".into(),
            static_dir: None,
            work_dir: PathBuf::from("labelforge-work"),
            operator_token_env: None,
            templates: Vec::new(),
            defaults: Defaults::default(),
            backends: Vec::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
    #[error("backend `{0}` is declared twice")]
    DuplicateBackend(String),
    #[error("operator token variable `{0}` is not set")]
    MissingOperatorToken(String),
}

impl AppConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let config: AppConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
        let mut seen = std::collections::HashSet::new();
        for b in &config.backends {
            if !seen.insert(b.name.as_str()) {
                return Err(ConfigError::DuplicateBackend(b.name.clone()));
            }
        }
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn backend(&self, name: &str) -> Option<&BackendConfig> {
        self.backends.iter().find(|b| b.name == name)
    }

    /// Reads the operator token from the environment, if one is configured.
    pub fn operator_token(&self) -> Result<Option<String>, ConfigError> {
        match &self.operator_token_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .ok()
                .filter(|v| !v.is_empty())
                .map(Some)
                .ok_or_else(|| ConfigError::MissingOperatorToken(var.clone())),
        }
    }
}
