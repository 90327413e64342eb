use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cilk_core::model::ModelConfig;
use cilk_core::session::SessionConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BusyPolicy {
    /// Wait for the active session to finish.
    #[default]
    Queue,
    /// Answer 409 while another session is active.
    Reject,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub original_kb: Option<PathBuf>,
    pub world: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub addr: String,
    pub busy: BusyPolicy,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            addr: "127.0.0.1:8080".into(),
            busy: BusyPolicy::Queue,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub seed: u64,
    pub init_epochs: usize,
    pub paths: Paths,
    pub model: ModelConfig,
    pub session: SessionConfig,
    pub service: ServiceConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            seed: 42,
            init_epochs: 100,
            paths: Paths::default(),
            model: ModelConfig::default(),
            session: SessionConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: EngineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Loads `path` when given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.dim == 0 {
            bail!("model.dim must be positive");
        }
        if self.model.batch_size == 0 {
            bail!("model.batch_size must be positive");
        }
        if self.model.learning_rate.is_nan() || self.model.learning_rate <= 0.0 {
            bail!("model.learning_rate must be positive");
        }
        if self.model.l2 < 0.0 {
            bail!("model.l2 must be non-negative");
        }
        self.session.validate().map_err(anyhow::Error::msg)?;
        Ok(())
    }
}
