//! Offline backend whose replies are a pure function of the prompt and a seed.
//!
//! The mock reads the output-format block of the prompt to learn which keys
//! are owed, the answer numbering and the number of captions, then fills in
//! plausible values. Prompts without a format block (focus calls) get short
//! plain-text notes.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use modevote_core::prompt::FORMAT_MARKER;
use modevote_core::{Labels, OptionIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::backend::{Backend, BackendError, BackendKind, BackendProfile, ModelReply, ModelRequest};

const VERBS: [&str; 8] = ["picks up", "puts down", "washes", "cuts", "opens", "moves", "holds", "looks at"];
const OBJECTS: [&str; 8] = ["a knife", "a bowl", "a cloth", "a box", "a phone", "a brush", "a plate", "a lid"];

/// Answer source for scripted and label-aware replies.
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    /// Forced answers by q_uid.
    pub answers: BTreeMap<String, OptionIndex>,
    /// Ground truth used together with `skill`.
    pub labels: Labels,
    /// Probability of answering with the label when one is known.
    pub skill: f64,
}

impl MockScript {
    pub fn fixed(answers: impl IntoIterator<Item = (String, OptionIndex)>) -> Self {
        MockScript {
            answers: answers.into_iter().collect(),
            ..Default::default()
        }
    }
}

pub struct MockBackend {
    profile: BackendProfile,
    seed: u64,
    script: MockScript,
    garble_rate: f64,
    script_digest: String,
    calls: AtomicU64,
    fail_after: Option<u64>,
    latency: Duration,
}

impl MockBackend {
    pub fn new(backend_id: impl Into<String>, seed: u64) -> Self {
        Self::with_script(backend_id, seed, MockScript::default())
    }

    pub fn with_script(backend_id: impl Into<String>, seed: u64, script: MockScript) -> Self {
        let mut profile = BackendProfile::mock(backend_id, seed);
        if let BackendKind::Mock { skill, .. } = &mut profile.kind {
            *skill = script.skill;
        }
        Self::build(profile, seed, script, 0.0)
    }

    /// Builds a mock from a `kind = "mock"` profile, reading its script and
    /// labels files.
    pub fn from_profile(profile: BackendProfile) -> Result<Self, BackendError> {
        let BackendKind::Mock {
            seed,
            script,
            labels,
            skill,
            garble_rate,
        } = profile.kind.clone()
        else {
            return Err(BackendError::Config {
                backend: profile.backend_id,
                message: "not a mock profile".into(),
            });
        };
        let read_err = |path: &Path, e: std::io::Error| BackendError::Config {
            backend: profile.backend_id.clone(),
            message: format!("reading {}: {e}", path.display()),
        };
        let mut loaded = MockScript {
            skill,
            ..Default::default()
        };
        if let Some(path) = &script {
            loaded.answers = Labels::load(path).map_err(|e| read_err(path, e))?.iter().map(|(q, a)| (q.to_string(), a)).collect();
        }
        if let Some(path) = &labels {
            loaded.labels = Labels::load(path).map_err(|e| read_err(path, e))?;
        }
        Ok(Self::build(profile, seed, loaded, garble_rate))
    }

    fn build(profile: BackendProfile, seed: u64, script: MockScript, garble_rate: f64) -> Self {
        let mut hasher = Sha256::new();
        for (q, a) in &script.answers {
            hasher.update(format!("a:{q}={}\n", a.get()));
        }
        for (q, a) in script.labels.iter() {
            hasher.update(format!("l:{q}={}\n", a.get()));
        }
        hasher.update(format!("skill={};garble={garble_rate}", script.skill));
        MockBackend {
            profile,
            seed,
            script,
            garble_rate,
            script_digest: hex::encode(hasher.finalize()),
            calls: AtomicU64::new(0),
            fail_after: None,
            latency: Duration::ZERO,
        }
    }

    /// Makes every call after the first `n` fail, to simulate an outage.
    pub fn fail_after(mut self, n: u64) -> Self {
        self.fail_after = Some(n);
        self
    }

    /// Adds an artificial delay to every call.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn with_garble_rate(mut self, rate: f64) -> Self {
        self.garble_rate = rate;
        self.script_digest = Self::build(self.profile.clone(), self.seed, self.script.clone(), rate).script_digest;
        self
    }

    /// Number of `invoke` calls so far, failed ones included.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reply_for(&self, prompt: &str, q_uid: &str) -> String {
        mock_reply(prompt, q_uid, self.seed, &self.script, self.garble_rate)
    }
}

#[async_trait]
impl Backend for MockBackend {
    fn profile(&self) -> &BackendProfile {
        &self.profile
    }

    fn fingerprint(&self) -> String {
        format!("mock:{}:seed={}:script={}", self.profile.model, self.seed, self.script_digest)
    }

    async fn invoke(&self, req: &ModelRequest) -> Result<ModelReply, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        if self.fail_after.is_some_and(|limit| n >= limit) {
            return Err(BackendError::Unavailable {
                backend: self.profile.backend_id.clone(),
                message: "simulated outage".into(),
            });
        }
        Ok(ModelReply {
            text: self.reply_for(&req.prompt, &req.q_uid),
            attempts: 1,
            latency: self.latency,
            usage: None,
        })
    }
}

/// What the format block of a prompt asks for.
#[derive(Debug, Default, PartialEq)]
struct Request {
    keys: Vec<String>,
    one_based: bool,
    captions: Option<usize>,
}

fn read_format_block(prompt: &str) -> Option<Request> {
    let start = prompt.rfind(FORMAT_MARKER)?;
    let block = &prompt[start + FORMAT_MARKER.len()..];
    let first_line = block.lines().next().unwrap_or("");
    let keys = first_line
        .split('"')
        .skip(1)
        .step_by(2)
        .map(str::to_string)
        .collect();
    let captions = block.find("exactly ").and_then(|i| {
        block[i + "exactly ".len()..]
            .split_whitespace()
            .next()
            .and_then(|n| n.parse().ok())
    });
    Some(Request {
        keys,
        one_based: block.contains("from 1 to 5"),
        captions,
    })
}

/// Deterministic reply to `prompt`: same inputs, same bytes.
pub fn mock_reply(prompt: &str, q_uid: &str, seed: u64, script: &MockScript, garble_rate: f64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(prompt.as_bytes());
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(&hasher.finalize());
    let mut rng = ChaCha8Rng::from_seed(rng_seed);

    let Some(request) = read_format_block(prompt) else {
        let lines: Vec<String> = (0..3)
            .map(|_| format!("- C {} {}.", VERBS[rng.random_range(0..8)], OBJECTS[rng.random_range(0..8)]))
            .collect();
        return lines.join("\n");
    };
    if garble_rate > 0.0 && rng.random_bool(garble_rate) {
        return "I believe the camera wearer is mostly tidying up, so one of the middle options fits best.".into();
    }

    let mut answer = OptionIndex::new(rng.random_range(0..5)).expect("in range");
    if let Some(label) = script.labels.get(q_uid) {
        if script.skill > 0.0 && rng.random_bool(script.skill) {
            answer = label;
        }
    }
    if let Some(forced) = script.answers.get(q_uid) {
        answer = *forced;
    }

    let mut out = Map::new();
    for key in &request.keys {
        let value = match key.as_str() {
            "caption" => {
                let n = request.captions.unwrap_or_else(|| rng.random_range(3..7));
                Value::from(
                    (0..n)
                        .map(|_| format!("C {} {}.", VERBS[rng.random_range(0..8)], OBJECTS[rng.random_range(0..8)]))
                        .collect::<Vec<_>>(),
                )
            }
            "summary" => Value::from(format!(
                "C spends the video handling {} and {}.",
                OBJECTS[rng.random_range(0..8)],
                OBJECTS[rng.random_range(0..8)]
            )),
            "reason" => Value::from(format!(
                "The video mostly shows C handling {}, which fits option {} best.",
                OBJECTS[rng.random_range(0..8)],
                answer.get() + usize::from(request.one_based)
            )),
            "answer" => json!(answer.get() + usize::from(request.one_based)),
            "confidence" => json!(f64::from(rng.random_range(50u32..100)) / 100.0),
            _ => Value::Null,
        };
        out.insert(key.clone(), value);
    }
    Value::Object(out).to_string()
}
