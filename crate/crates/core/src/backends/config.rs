use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backends, CachedEmbedder, Captioner, ImageEmbedder, MockBackend, OpenAiClient, RuleGeneralizer, TextEmbedder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendRole {
    ImageEmbed,
    TextEmbed,
    Caption,
    RuleLlm,
}

impl BackendRole {
    pub const ALL: [BackendRole; 4] = [Self::ImageEmbed, Self::TextEmbed, Self::Caption, Self::RuleLlm];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ImageEmbed => "image_embed",
            Self::TextEmbed => "text_embed",
            Self::Caption => "caption",
            Self::RuleLlm => "rule_llm",
        }
    }

    /// Name of the environment variable that overrides this role's URL.
    pub fn url_env_var(self) -> String {
        format!("CERBERUS_BACKEND_{}_URL", self.as_str().to_uppercase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Openai,
    Mock,
}

fn default_timeout() -> f64 {
    30.0
}

fn default_in_flight() -> usize {
    4
}

fn default_dim() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub url: String,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub multi_image: bool,
    /// Mock only.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub dim: usize,
}

impl BackendConfig {
    pub fn openai(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Openai,
            url: url.into(),
            model: model.into(),
            timeout_s: default_timeout(),
            max_in_flight: default_in_flight(),
            api_key_env: None,
            multi_image: false,
            seed: 0,
            dim: default_dim(),
        }
    }

    pub fn mock(seed: u64, dim: usize) -> Self {
        Self { kind: BackendKind::Mock, seed, dim, ..Self::openai("", "mock") }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(Error::Config("timeout_s must be > 0".into()));
        }
        if self.max_in_flight < 1 {
            return Err(Error::Config("max_in_flight must be >= 1".into()));
        }
        if self.kind == BackendKind::Openai && self.url.trim().is_empty() {
            return Err(Error::Config("url is required for openai backends".into()));
        }
        Ok(())
    }
}

/// TOML layout: one `[backend.<role>]` table per role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendsConfig {
    pub backend: BTreeMap<BackendRole, BackendConfig>,
    #[serde(default = "default_cache_capacity")]
    pub cache_capacity: usize,
}

fn default_cache_capacity() -> usize {
    4096
}

impl BackendsConfig {
    pub fn all_mock(seed: u64, dim: usize) -> Self {
        let backend = BackendRole::ALL.into_iter().map(|r| (r, BackendConfig::mock(seed, dim))).collect();
        Self { backend, cache_capacity: default_cache_capacity() }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Apply `CERBERUS_BACKEND_<ROLE>_URL` overrides.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        for (role, cfg) in self.backend.iter_mut() {
            if let Some(url) = lookup(&role.url_env_var()) {
                cfg.url = url;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        for role in BackendRole::ALL {
            let cfg = self.backend.get(&role).ok_or_else(|| Error::Config(format!("missing [backend.{}] table", role.as_str())))?;
            cfg.validate().map_err(|e| Error::Config(format!("backend.{}: {e}", role.as_str())))?;
        }
        Ok(())
    }

    fn role(&self, role: BackendRole) -> Result<&BackendConfig> {
        self.backend.get(&role).ok_or_else(|| Error::Config(format!("missing [backend.{}]", role.as_str())))
    }

    pub(super) fn build(&self) -> Result<Backends> {
        self.validate()?;
        let cap = self.cache_capacity;
        let image_embedder: Arc<dyn ImageEmbedder> = match self.role(BackendRole::ImageEmbed)? {
            c if c.kind == BackendKind::Mock => Arc::new(MockBackend::new(c.seed, c.dim)),
            c => Arc::new(CachedEmbedder::new(OpenAiClient::new(c.clone())?, cap)),
        };
        let text_embedder: Arc<dyn TextEmbedder> = match self.role(BackendRole::TextEmbed)? {
            c if c.kind == BackendKind::Mock => Arc::new(MockBackend::new(c.seed, c.dim)),
            c => Arc::new(CachedEmbedder::new(OpenAiClient::new(c.clone())?, cap)),
        };
        let captioner: Arc<dyn Captioner> = match self.role(BackendRole::Caption)? {
            c if c.kind == BackendKind::Mock => Arc::new(MockBackend::new(c.seed, c.dim)),
            c => Arc::new(OpenAiClient::new(c.clone())?),
        };
        let rule_llm: Arc<dyn RuleGeneralizer> = match self.role(BackendRole::RuleLlm)? {
            c if c.kind == BackendKind::Mock => Arc::new(MockBackend::new(c.seed, c.dim)),
            c => Arc::new(OpenAiClient::new(c.clone())?),
        };
        Ok(Backends { image_embedder, text_embedder, captioner, rule_llm })
    }
}
