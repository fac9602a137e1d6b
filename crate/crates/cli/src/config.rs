//! Run configuration: command-line flags layered over an optional config
//! file layered over built-in defaults.
//!
//! The config file is plain `key = value` lines (TOML syntax):
//!
//! ```text
//! backend = "table:model.json"
//! top_k = 50
//! grid = [0, 1, 2, 5, 10, 20, 50, 100]
//! tau = 0.85
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

pub const REMOTE_URL_ENV: &str = "CID_REMOTE_URL";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend: Option<String>,
    pub model: Option<String>,
    pub lambda: Option<f64>,
    pub lambdas: Option<Vec<f64>>,
    pub grid: Option<Vec<f64>>,
    pub tau: Option<f64>,
    pub top_k: Option<usize>,
    pub max_new_tokens: Option<usize>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub prefix: Option<String>,
    pub similarity: Option<String>,
    pub fold_below: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// Where next-token distributions come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Table(PathBuf),
    Remote(String),
}

impl BackendSpec {
    pub fn parse(spec: &str) -> Result<Self, CliError> {
        if let Some(path) = spec.strip_prefix("table:") {
            if path.is_empty() {
                return Err(CliError::usage("table backend needs a path: table:PATH"));
            }
            return Ok(BackendSpec::Table(PathBuf::from(path)));
        }
        if let Some(url) = spec.strip_prefix("remote:") {
            if url.is_empty() {
                return Err(CliError::usage("remote backend needs a URL: remote:URL"));
            }
            return Ok(BackendSpec::Remote(url.to_string()));
        }
        Err(CliError::usage(format!("unknown backend {spec:?}; expected table:PATH or remote:URL")))
    }

    /// Flag, then config file, then the remote URL environment variable.
    pub fn resolve(flag: Option<&str>, file: Option<&str>) -> Result<Self, CliError> {
        if let Some(spec) = flag.or(file) {
            return Self::parse(spec);
        }
        match std::env::var(REMOTE_URL_ENV) {
            Ok(url) if !url.trim().is_empty() => Ok(BackendSpec::Remote(url.trim().to_string())),
            _ => Err(CliError::usage(format!(
                "no backend selected; pass --backend table:PATH|remote:URL or set {REMOTE_URL_ENV}"
            ))),
        }
    }
}
