//! Client for OpenAI-compatible chat-completions endpoints.

use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::Rng;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::{json, Value};
use tracing::{debug, warn};

use crate::backend::{Backend, BackendError, BackendKind, BackendProfile, ModelReply, ModelRequest, Usage};

pub struct HttpBackend {
    profile: BackendProfile,
    endpoint: String,
    auth_env: Option<String>,
    client: reqwest::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<Value>,
}

enum Failure {
    Retry(String),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(profile: BackendProfile) -> Result<Self, BackendError> {
        profile.validate()?;
        let BackendKind::Openai { endpoint, auth_env } = profile.kind.clone() else {
            return Err(BackendError::Config {
                backend: profile.backend_id,
                message: "not an openai profile".into(),
            });
        };
        let client = reqwest::Client::builder()
            .timeout(profile.timeout())
            .build()
            .map_err(|e| BackendError::Config {
                backend: profile.backend_id.clone(),
                message: e.to_string(),
            })?;
        Ok(HttpBackend {
            profile,
            endpoint,
            auth_env,
            client,
        })
    }

    fn token(&self) -> Result<Option<String>, BackendError> {
        let Some(var) = &self.auth_env else {
            return Ok(None);
        };
        match std::env::var(var) {
            Ok(token) if !token.is_empty() => Ok(Some(token)),
            _ => Err(BackendError::Auth {
                backend: self.profile.backend_id.clone(),
                message: format!("environment variable {var} is not set"),
            }),
        }
    }

    /// The request body, video passed as a URI part or as clip references.
    pub fn body(&self, req: &ModelRequest) -> Value {
        let mut content = vec![json!({"type": "text", "text": req.prompt})];
        if let Some(video) = &req.video_ref {
            if self.profile.supports_video {
                content.push(json!({"type": "video_url", "video_url": {"url": video}}));
            } else {
                for clip in &req.clips {
                    let url = format!("{video}#t={},{}", clip.start, clip.end);
                    content.push(json!({"type": "image_url", "image_url": {"url": url}}));
                }
            }
        }
        json!({
            "model": self.profile.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": req.sampling.temperature,
            "max_tokens": req.sampling.max_tokens,
        })
    }

    async fn attempt(&self, body: &Value, token: Option<&str>) -> Result<(String, Option<Usage>), Failure> {
        let mut request = self.client.post(&self.endpoint).json(body);
        if let Some(token) = token {
            request = request.bearer_auth(token);
        }
        let response = request.send().await.map_err(|e| Failure::Retry(e.to_string()))?;
        let status = response.status();
        let text = response.text().await.map_err(|e| Failure::Retry(e.to_string()))?;
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(Failure::Fatal(BackendError::Auth {
                backend: self.profile.backend_id.clone(),
                message: format!("HTTP {status}"),
            }));
        }
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(Failure::Retry(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(BackendError::Rejected {
                backend: self.profile.backend_id.clone(),
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            }));
        }
        let malformed = |message: String| {
            Failure::Fatal(BackendError::Malformed {
                backend: self.profile.backend_id.clone(),
                message,
            })
        };
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| malformed("no message content".into()))?;
        Ok((content_text(content).ok_or_else(|| malformed("content is not text".into()))?, parsed.usage))
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = self.profile.backoff_ms as f64 * 2f64.powi(retry.min(16) as i32);
        Duration::from_millis((base * (1.0 + rand::rng().random_range(0.0..0.5))) as u64)
    }
}

/// Content is either a string or a list of `{type: text, text}` parts.
fn content_text(content: Value) -> Option<String> {
    match content {
        Value::String(s) => Some(s),
        Value::Array(parts) => {
            let texts: Option<Vec<String>> = parts
                .into_iter()
                .map(|p| p.get("text").and_then(Value::as_str).map(str::to_string))
                .collect();
            texts.map(|t| t.concat())
        }
        _ => None,
    }
}

#[async_trait]
impl Backend for HttpBackend {
    fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn fingerprint(&self) -> String {
        format!("openai:{}:{}", self.endpoint, self.profile.model)
    }

    async fn invoke(&self, req: &ModelRequest) -> Result<ModelReply, BackendError> {
        let token = self.token()?;
        let body = self.body(req);
        let started = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body, token.as_deref()).await {
                Ok((text, usage)) => {
                    debug!(backend = %self.profile.backend_id, q_uid = %req.q_uid, attempts, "reply");
                    return Ok(ModelReply {
                        text,
                        attempts,
                        latency: started.elapsed(),
                        usage,
                    });
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(message)) => {
                    if attempts > self.profile.max_retries {
                        return Err(BackendError::Exhausted {
                            backend: self.profile.backend_id.clone(),
                            attempts,
                            message,
                        });
                    }
                    warn!(backend = %self.profile.backend_id, q_uid = %req.q_uid, attempts, %message, "retrying");
                    tokio::time::sleep(self.backoff(attempts - 1)).await;
                }
            }
        }
    }
}
