//! The model-invocation interface shared by every backend.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use modevote_core::{ClipRange, Sampling};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend `{backend}`: authentication failed: {message}")]
    Auth { backend: String, message: String },
    #[error("backend `{backend}`: gave up after {attempts} attempts: {message}")]
    Exhausted {
        backend: String,
        attempts: u32,
        message: String,
    },
    #[error("backend `{backend}`: request rejected with HTTP {status}: {body}")]
    Rejected { backend: String, status: u16, body: String },
    #[error("backend `{backend}`: malformed response: {message}")]
    Malformed { backend: String, message: String },
    #[error("backend `{backend}`: {message}")]
    Config { backend: String, message: String },
    #[error("backend `{backend}` is unavailable: {message}")]
    Unavailable { backend: String, message: String },
}

impl BackendError {
    pub fn is_auth(&self) -> bool {
        matches!(self, BackendError::Auth { .. })
    }
}

/// How a backend is reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    /// Deterministic offline stand-in.
    Mock {
        #[serde(default)]
        seed: u64,
        /// JSON object `q_uid -> answer index` forced onto every reply.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        script: Option<PathBuf>,
        /// Labels file; with `skill` > 0 the mock answers correctly that often.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<PathBuf>,
        #[serde(default)]
        skill: f64,
        /// Share of replies that contain no JSON at all.
        #[serde(default)]
        garble_rate: f64,
    },
    /// OpenAI-compatible chat-completions endpoint.
    Openai {
        endpoint: String,
        /// Name of the environment variable holding the bearer token.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        auth_env: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    #[serde(alias = "id")]
    pub backend_id: String,
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles per attempt, plus up to 50% jitter.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default)]
    pub supports_video: bool,
    /// Most requests in flight at once.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_minute: Option<u32>,
}

fn default_model() -> String {
    "mock".into()
}

fn default_timeout() -> f64 {
    120.0
}

fn default_retries() -> u32 {
    4
}

fn default_backoff() -> u64 {
    500
}

fn default_concurrency() -> usize {
    8
}

impl BackendProfile {
    pub fn mock(backend_id: impl Into<String>, seed: u64) -> Self {
        BackendProfile {
            backend_id: backend_id.into(),
            kind: BackendKind::Mock {
                seed,
                script: None,
                labels: None,
                skill: 0.0,
                garble_rate: 0.0,
            },
            model: default_model(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            supports_video: true,
            concurrency: default_concurrency(),
            requests_per_minute: None,
        }
    }

    pub fn openai(backend_id: impl Into<String>, endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        BackendProfile {
            kind: BackendKind::Openai {
                endpoint: endpoint.into(),
                auth_env: None,
            },
            model: model.into(),
            supports_video: false,
            ..BackendProfile::mock(backend_id, 0)
        }
    }

    pub fn is_network(&self) -> bool {
        matches!(self.kind, BackendKind::Openai { .. })
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |message: &str| {
            Err(BackendError::Config {
                backend: self.backend_id.clone(),
                message: message.to_string(),
            })
        };
        if self.backend_id.is_empty() {
            return bad("empty backend id");
        }
        if !(self.timeout_secs > 0.0) || !self.timeout_secs.is_finite() {
            return bad("timeout_secs must be positive");
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1");
        }
        if self.requests_per_minute == Some(0) {
            return bad("requests_per_minute must be at least 1");
        }
        if let BackendKind::Mock { skill, garble_rate, .. } = &self.kind {
            if !(0.0..=1.0).contains(skill) || !(0.0..=1.0).contains(garble_rate) {
                return bad("skill and garble_rate must lie in [0, 1]");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRequest {
    pub prompt: String,
    /// Video URI or path, passed through untouched.
    pub video_ref: Option<String>,
    /// Clip layout, for backends that take frame references instead of video.
    pub clips: Vec<ClipRange>,
    pub sampling: Sampling,
    /// For logging and the mock's answer script; never sent over the wire.
    pub q_uid: String,
}

impl ModelRequest {
    pub fn text(prompt: impl Into<String>, q_uid: impl Into<String>) -> Self {
        ModelRequest {
            prompt: prompt.into(),
            video_ref: None,
            clips: Vec::new(),
            sampling: Sampling::default(),
            q_uid: q_uid.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelReply {
    /// Exactly what the model said.
    pub text: String,
    pub attempts: u32,
    pub latency: Duration,
    pub usage: Option<Usage>,
}

#[async_trait]
pub trait Backend: Send + Sync {
    fn profile(&self) -> &BackendProfile;

    /// Identity of whatever produces the replies, for cache keys. Two
    /// backends with equal fingerprints must answer alike.
    fn fingerprint(&self) -> String;

    async fn invoke(&self, req: &ModelRequest) -> Result<ModelReply, BackendError>;
}

/// Backends by id.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn Backend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a backend; fails when the id is taken.
    pub fn insert(&mut self, backend: Arc<dyn Backend>) -> Result<(), BackendError> {
        let id = backend.profile().backend_id.clone();
        if self.backends.contains_key(&id) {
            return Err(BackendError::Config {
                backend: id,
                message: "duplicate backend id".into(),
            });
        }
        self.backends.insert(id, backend);
        Ok(())
    }

    pub fn get(&self, backend_id: &str) -> Result<&Arc<dyn Backend>, BackendError> {
        self.backends.get(backend_id).ok_or_else(|| BackendError::Config {
            backend: backend_id.to_string(),
            message: "no such backend in the registry".into(),
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }
}
