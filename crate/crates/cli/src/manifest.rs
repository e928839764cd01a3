//! Run manifests: the resolved configuration serialized next to every
//! output, so any result can be reproduced from the output directory alone.

use anyhow::{Context, Result};
use serde::Serialize;
use std::path::Path;

use crate::config::ResolvedConfig;

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub artifact: String,
    pub version: String,
    pub subcommand: String,
    pub base_seed: u64,
    pub outputs: Vec<String>,
    pub config: ResolvedConfig,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: ResolvedConfig, outputs: Vec<String>) -> Self {
        Self {
            artifact: "skmlab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            base_seed: config.run.seed,
            outputs,
            config,
        }
    }

    /// Writes `manifest.toml` into the output directory.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing manifest")?;
        let path = dir.join("manifest.toml");
        std::fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))
    }
}
