//! Optional TOML configuration. Values apply only where neither a flag nor
//! its environment variable was given.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub spool_dir: Option<PathBuf>,
    /// Manager control address, used by control commands and the node.
    pub manager_url: Option<String>,
    /// Producer control address, used by subscription commands.
    pub producer_url: Option<String>,
    pub node: NodeSection,
    pub producer: ProducerSection,
    pub manager: ManagerSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeSection {
    pub forward_to: Option<String>,
    pub poll_interval: Option<f64>,
    pub forward_interval: Option<f64>,
    pub flush_interval: Option<f64>,
    pub host: Option<String>,
    pub rotate_bytes: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProducerSection {
    pub listen: Option<String>,
    pub control: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub ack_interval: Option<f64>,
    pub sink_flush_interval: Option<f64>,
    pub ring_size: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManagerSection {
    pub listen: Option<String>,
    pub state: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// First of flag (or env), file value, default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: impl FnOnce() -> T) -> T {
    flag.or(file).unwrap_or_else(default)
}
