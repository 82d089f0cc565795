//! Optional JSON run-config file: any field may be set there, and any
//! explicit command-line flag overrides it. The ADEE_SEED environment
//! variable overrides the seed from either source.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub task: Option<PathBuf>,
    pub mode: Option<String>,
    pub policy: Option<String>,
    pub threshold: Option<f32>,
    pub seed: Option<u64>,
    pub exit_layer: Option<usize>,
    pub output: Option<PathBuf>,
    pub format: Option<String>,
    pub jobs: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

/// Seed precedence: ADEE_SEED env var, then the flag, then the config
/// file, then the default.
pub fn resolve_seed(flag: Option<u64>, config: &FileConfig) -> Result<u64> {
    if let Ok(env) = std::env::var("ADEE_SEED") {
        let parsed: u64 = env
            .trim()
            .parse()
            .with_context(|| format!("ADEE_SEED must be an unsigned integer, got '{env}'"))?;
        return Ok(parsed);
    }
    Ok(flag.or(config.seed).unwrap_or(0))
}
