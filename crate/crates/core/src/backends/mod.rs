//! Model roles behind pluggable contracts.
//!
//! The dialogue loop needs five roles: a summarizer (dialogue -> prompt), an
//! image generator, a captioner, a text-similarity embedder and a question
//! writer. Each has a deterministic toy implementation over [`AspectVector`]s
//! and a remote implementation speaking JSON over HTTP.

mod remote;
mod toy;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AspectSchema, CaptionSet, DialogueMemory, ImageRecord, PromptRecord};

pub use remote::{
    ChatMessage, ChatRequest, ChatResponse, ChatRole, RemoteCaptioner, RemoteClient,
    RemoteEmbedder, RemoteGenerator, RemoteQuestionWriter, RemoteSummarizer,
};
pub use toy::{phrase_similarity, ToyCaptioner, ToyEmbedder, ToyGenerator, ToySummarizer};

pub const ENV_BASE_URL: &str = "REFLEX_BASE_URL";
pub const ENV_API_KEY: &str = "REFLEX_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("dialogue memory has no user turn")]
    EmptyMemory,
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("caption reply is missing aspect `{0}`")]
    MissingAspect(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading backend config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing backend config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("remote backend requires base_url")]
    MissingBaseUrl,
    #[error("timeout_ms must be positive")]
    ZeroTimeout,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Toy,
    Remote,
}

fn default_timeout_ms() -> u64 {
    30_000
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub persona: Option<String>,
}

impl std::fmt::Debug for BackendConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendConfig")
            .field("kind", &self.kind)
            .field("base_url", &self.base_url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("model_name", &self.model_name)
            .field("timeout_ms", &self.timeout_ms)
            .field("persona", &self.persona)
            .finish()
    }
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Toy,
            base_url: None,
            api_key: None,
            model_name: None,
            timeout_ms: default_timeout_ms(),
            persona: None,
        }
    }
}

impl BackendConfig {
    pub fn toy() -> Self {
        Self::default()
    }

    pub fn remote(base_url: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Remote,
            base_url: Some(base_url.into()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.timeout_ms == 0 {
            return Err(ConfigError::ZeroTimeout);
        }
        if self.kind == BackendKind::Remote && self.base_url.is_none() {
            return Err(ConfigError::MissingBaseUrl);
        }
        Ok(())
    }

    /// Applies `REFLEX_BASE_URL` / `REFLEX_API_KEY` style overrides.
    pub fn apply_env_with(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(url) = lookup(ENV_BASE_URL).filter(|s| !s.is_empty()) {
            self.base_url = Some(url);
        }
        if let Some(key) = lookup(ENV_API_KEY).filter(|s| !s.is_empty()) {
            self.api_key = Some(key);
        }
    }

    pub fn apply_env(&mut self) {
        self.apply_env_with(|k| std::env::var(k).ok());
    }

    /// Reads a JSON config file (if given), then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
            None => Self::default(),
        };
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `M_S`: turns the dialogue so far into a prompt.
pub trait Summarizer: Send + Sync {
    fn summarize(
        &self,
        schema: &AspectSchema,
        memory: &DialogueMemory,
        round: u32,
    ) -> Result<PromptRecord, BackendError>;
}

/// `M_G`: renders a prompt into an image.
pub trait ImageGenerator: Send + Sync {
    fn generate(
        &self,
        schema: &AspectSchema,
        prompt: &PromptRecord,
        seed: u64,
    ) -> Result<ImageRecord, BackendError>;
}

/// `M_E`: describes an image along every schema aspect.
pub trait Captioner: Send + Sync {
    fn caption(
        &self,
        image: &ImageRecord,
        schema: &AspectSchema,
    ) -> Result<CaptionSet, BackendError>;
}

/// Text-to-text similarity in `[0, 1]`.
pub trait Embedder: Send + Sync {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, BackendError>;
}

/// `M_A` in backend mode: phrases a question about one aspect.
pub trait QuestionWriter: Send + Sync {
    fn write_question(
        &self,
        schema: &AspectSchema,
        captions: &CaptionSet,
        aspect: &str,
    ) -> Result<String, BackendError>;
}

/// The bundle of role implementations a session runs against.
#[derive(Clone)]
pub struct Backends {
    pub summarizer: Arc<dyn Summarizer>,
    pub generator: Arc<dyn ImageGenerator>,
    pub captioner: Arc<dyn Captioner>,
    pub embedder: Arc<dyn Embedder>,
    pub questioner: Option<Arc<dyn QuestionWriter>>,
}

impl Backends {
    pub fn toy(generator: ToyGenerator) -> Self {
        Self {
            summarizer: Arc::new(ToySummarizer),
            generator: Arc::new(generator),
            captioner: Arc::new(ToyCaptioner),
            embedder: Arc::new(ToyEmbedder),
            questioner: None,
        }
    }

    pub fn remote(cfg: &BackendConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let client = Arc::new(RemoteClient::new(cfg)?);
        Ok(Self {
            summarizer: Arc::new(RemoteSummarizer::new(client.clone())),
            generator: Arc::new(RemoteGenerator::new(client.clone())),
            captioner: Arc::new(RemoteCaptioner::new(client.clone())),
            embedder: Arc::new(RemoteEmbedder::new(client.clone())),
            questioner: Some(Arc::new(RemoteQuestionWriter::new(client))),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remote_requires_base_url() {
        let cfg = BackendConfig {
            kind: BackendKind::Remote,
            ..BackendConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(ConfigError::MissingBaseUrl)));
    }

    #[test]
    fn zero_timeout_rejected() {
        let cfg = BackendConfig {
            timeout_ms: 0,
            ..BackendConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(ConfigError::ZeroTimeout)));
    }

    #[test]
    fn env_overrides_file_values() {
        let mut cfg: BackendConfig = serde_json::from_str(
            r#"{"kind":"remote","base_url":"http://file","api_key":"a","timeout_ms":5}"#,
        )
        .unwrap();
        cfg.apply_env_with(|k| match k {
            ENV_BASE_URL => Some("http://env".into()),
            _ => None,
        });
        assert_eq!(cfg.base_url.as_deref(), Some("http://env"));
        assert_eq!(cfg.api_key.as_deref(), Some("a"));
        assert_eq!(cfg.timeout_ms, 5);
    }

    #[test]
    fn debug_redacts_api_key() {
        let cfg = BackendConfig {
            api_key: Some("sk-secret".into()),
            ..BackendConfig::default()
        };
        assert!(!format!("{cfg:?}").contains("sk-secret"));
    }
}
