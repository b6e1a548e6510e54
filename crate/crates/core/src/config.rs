//! Configuration loading for the CLI and proxy. Files may be TOML or JSON,
//! chosen by extension; the `SEMCACHE_CONFIG` env var supplies a default
//! path that an explicit `--config` flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_ENV_VAR: &str = "SEMCACHE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Embedding dimension of the stub provider.
    pub embedding_dim: usize,
    /// Remote embedding endpoint; the stub provider is used when unset.
    pub embedding_url: Option<String>,
    /// Adapter weights file (JSON) to load into the pipeline.
    pub adapter_path: Option<PathBuf>,
    /// PCA model file to load into the pipeline.
    pub pca_path: Option<PathBuf>,
    /// Cache file to load on startup and save on shutdown.
    pub cache_path: Option<PathBuf>,
    pub tau: f64,
    pub beta: f64,
    pub top_k: usize,
    pub context_depth: Option<usize>,
    pub verify_context: bool,
    /// Maximum entries kept in the cache; unlimited when unset.
    pub capacity: Option<usize>,
    pub proxy: ProxyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    pub bind_addr: String,
    /// Real upstream URL; a deterministic mock upstream is used when unset.
    pub upstream_url: Option<String>,
    /// Artificial latency floor of the mock upstream, in milliseconds.
    pub mock_latency_ms: u64,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            embedding_dim: crate::embedding::STUB_DEFAULT_DIM,
            embedding_url: None,
            adapter_path: None,
            pca_path: None,
            cache_path: None,
            tau: 0.83,
            beta: crate::threshold::DEFAULT_BETA,
            top_k: 5,
            context_depth: None,
            verify_context: true,
            capacity: None,
            proxy: ProxyConfig::default(),
        }
    }
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self { bind_addr: "127.0.0.1:8080".to_string(), upstream_url: None, mock_latency_ms: 0 }
    }
}

impl AppConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        match ext {
            "json" => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
            "toml" => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
            other => Err(Error::Config(format!(
                "{}: unsupported config extension {other:?} (expected .toml or .json)",
                path.display()
            ))),
        }
    }

    /// Resolve the effective config: explicit flag path, else the
    /// `SEMCACHE_CONFIG` env var, else built-in defaults.
    pub fn resolve(flag_path: Option<&Path>) -> Result<Self> {
        if let Some(path) = flag_path {
            return Self::from_file(path);
        }
        if let Ok(env_path) = std::env::var(CONFIG_ENV_VAR) {
            if !env_path.is_empty() {
                return Self::from_file(Path::new(&env_path));
            }
        }
        Ok(Self::default())
    }

    pub fn lookup_config(&self) -> crate::cache::LookupConfig {
        crate::cache::LookupConfig {
            tau: self.tau,
            top_k: self.top_k,
            context_depth: self.context_depth,
            verify_context: self.verify_context,
        }
    }
}
