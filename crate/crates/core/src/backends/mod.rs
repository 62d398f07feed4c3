//! Model backends: generation, sequence scoring, embedding and reward.
//!
//! Every pipeline stage talks to a [`Backend`] trait object. Concrete
//! implementations are the OpenAI-compatible [`http::HttpBackend`], the
//! deterministic [`mock::MockBackend`] and the closure-driven
//! [`scripted::ScriptedBackend`] used by tests. [`layers`] adds caching,
//! retries, an in-flight bound and request metering on top of any of them.

pub mod http;
pub mod layers;
pub mod mock;
pub mod scripted;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layers::{BackendStack, CachedBackend, ConcurrencyLimit, Metered, RetryingBackend};
pub use mock::{MockBackend, MockSettings};
pub use scripted::ScriptedBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage { role, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl GenParams {
    pub fn new(temperature: f64, max_tokens: u32, seed: Option<u64>) -> Result<Self, BackendError> {
        let p = GenParams { temperature, max_tokens, seed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::Precondition(format!(
                "temperature must lie in [0, 2], got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::Precondition("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams { temperature: 0.1, max_tokens: 2048, seed: None }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("backend {backend} does not support {capability}")]
    Unsupported { capability: &'static str, backend: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unexpected response: {0}")]
    Protocol(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl BackendError {
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transient(_))
    }

    pub fn is_unsupported(&self) -> bool {
        matches!(self, BackendError::Unsupported { .. })
    }
}

/// A model endpoint. Implementations must be safe for concurrent calls.
///
/// Capabilities a backend does not have return [`BackendError::Unsupported`].
pub trait Backend: Send + Sync {
    /// Stable identity (model name) used in cache keys and index headers.
    fn identity(&self) -> String;

    fn generate(&self, messages: &[ChatMessage], params: &GenParams) -> Result<String, BackendError>;

    /// Total log-probability of `completion` given the prompt.
    fn score_completion(&self, prompt: &[ChatMessage], completion: &str) -> Result<f64, BackendError> {
        let _ = (prompt, completion);
        Err(BackendError::Unsupported { capability: "score_completion", backend: self.identity() })
    }

    /// Unit-norm embedding of fixed dimension.
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let _ = text;
        Err(BackendError::Unsupported { capability: "embed", backend: self.identity() })
    }

    /// Scalar reward of `response` as the assistant turn after `context`.
    fn reward(&self, context: &[ChatMessage], response: &str) -> Result<f64, BackendError> {
        let _ = (context, response);
        Err(BackendError::Unsupported { capability: "reward", backend: self.identity() })
    }
}

pub(crate) fn check_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    if messages.is_empty() {
        return Err(BackendError::Precondition("messages must not be empty".into()));
    }
    if let Some(i) = messages.iter().position(|m| m.content.trim().is_empty()) {
        return Err(BackendError::Precondition(format!("message {i} has empty content")));
    }
    Ok(())
}

pub(crate) fn check_text(what: &str, text: &str) -> Result<(), BackendError> {
    if text.trim().is_empty() {
        return Err(BackendError::Precondition(format!("{what} must not be empty")));
    }
    Ok(())
}

/// Scale to unit L2 norm. Fails on an all-zero or non-finite vector.
pub fn l2_normalize(mut v: Vec<f32>) -> Result<Vec<f32>, BackendError> {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(BackendError::Protocol("embedding has zero or non-finite norm".into()));
    }
    for x in &mut v {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

fn default_in_flight() -> usize {
    4
}

fn default_retry_budget() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    500
}

fn default_timeout_secs() -> u64 {
    120
}

/// Named endpoint configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendProfile {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Embedding dimension; checked against every returned vector.
    #[serde(default)]
    pub dimension: Option<usize>,
    /// Whether the endpoint can echo prompt log-probabilities.
    #[serde(default)]
    pub supports_scoring: bool,
    /// Replay HTTP traffic from this cassette instead of the network.
    #[serde(default)]
    pub cassette: Option<PathBuf>,
    #[serde(default)]
    pub mock: mock::MockSettings,
}

impl BackendProfile {
    pub fn mock(model: &str) -> Self {
        BackendProfile {
            kind: BackendKind::Mock,
            endpoint: None,
            model: model.to_string(),
            auth_env: None,
            max_in_flight: default_in_flight(),
            retry_budget: default_retry_budget(),
            retry_backoff_ms: 0,
            timeout_secs: default_timeout_secs(),
            cache_dir: None,
            dimension: None,
            supports_scoring: false,
            cassette: None,
            mock: mock::MockSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_in_flight == 0 {
            return Err(BackendError::Config("max_in_flight must be at least 1".into()));
        }
        if self.model.trim().is_empty() {
            return Err(BackendError::Config("model name must not be empty".into()));
        }
        if self.kind == BackendKind::Http && self.endpoint.is_none() {
            return Err(BackendError::Config(format!("http profile {:?} needs an endpoint", self.model)));
        }
        Ok(())
    }
}

/// Concrete backend for a profile wrapped in the standard layers.
pub fn build_stack(profile: &BackendProfile) -> Result<BackendStack, BackendError> {
    profile.validate()?;
    let inner: std::sync::Arc<dyn Backend> = match profile.kind {
        BackendKind::Mock => std::sync::Arc::new(MockBackend::new(&profile.model, profile.mock.clone())),
        BackendKind::Http => std::sync::Arc::new(http::HttpBackend::from_profile(profile)?),
    };
    Ok(BackendStack::new(inner, profile))
}
