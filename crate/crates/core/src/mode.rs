//! Mode recipes: paradigm, prompt style, CoT field set, backend and focus variant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModeError {
    #[error("mode `{0}`: the answer field cannot be disabled")]
    AnswerDisabled(String),
    #[error("mode `{mode}`: clip_seconds must be positive, got {value}")]
    ClipSeconds { mode: String, value: f64 },
    #[error("mode `{0}`: a two-stage mode needs caption or summary for its first stage")]
    EmptyFirstStage(String),
    #[error("mode id is empty")]
    EmptyId,
    #[error("mode `{0}`: backend id is empty")]
    EmptyBackend(String),
    #[error("mode `{mode}`: max_tokens must be positive")]
    MaxTokens { mode: String },
    #[error("duplicate mode id `{0}`")]
    Duplicate(String),
    #[error("unknown CoT field `{0}`")]
    UnknownField(String),
    #[error("unknown prompt style `{0}`")]
    UnknownStyle(String),
}

/// One item of the requested output, in emission order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotField {
    Caption,
    Summary,
    Reason,
    Answer,
    Confidence,
}

impl CotField {
    pub const ALL: [CotField; 5] = [
        CotField::Caption,
        CotField::Summary,
        CotField::Reason,
        CotField::Answer,
        CotField::Confidence,
    ];

    /// JSON key the model is asked to emit.
    pub fn key(self) -> &'static str {
        match self {
            CotField::Caption => "caption",
            CotField::Summary => "summary",
            CotField::Reason => "reason",
            CotField::Answer => "answer",
            CotField::Confidence => "confidence",
        }
    }

    /// Caption and summary are produced by the first stage of a two-stage run.
    pub fn is_first_stage(self) -> bool {
        matches!(self, CotField::Caption | CotField::Summary)
    }
}

impl fmt::Display for CotField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for CotField {
    type Err = ModeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "caption" | "captions" | "cap" => Ok(CotField::Caption),
            "summary" | "sum" => Ok(CotField::Summary),
            "reason" | "rs" => Ok(CotField::Reason),
            "answer" | "ans" => Ok(CotField::Answer),
            "confidence" | "conf" => Ok(CotField::Confidence),
            other => Err(ModeError::UnknownField(other.to_string())),
        }
    }
}

/// Which output items a mode requests. The answer is always requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CotFieldSet {
    pub caption: bool,
    pub summary: bool,
    pub reason: bool,
    pub confidence: bool,
}

impl CotFieldSet {
    pub const ANSWER_ONLY: CotFieldSet = CotFieldSet {
        caption: false,
        summary: false,
        reason: false,
        confidence: false,
    };

    pub const ALL: CotFieldSet = CotFieldSet {
        caption: true,
        summary: true,
        reason: true,
        confidence: true,
    };

    pub fn contains(&self, field: CotField) -> bool {
        match field {
            CotField::Caption => self.caption,
            CotField::Summary => self.summary,
            CotField::Reason => self.reason,
            CotField::Answer => true,
            CotField::Confidence => self.confidence,
        }
    }

    pub fn fields(&self) -> impl Iterator<Item = CotField> + '_ {
        CotField::ALL.into_iter().filter(|f| self.contains(*f))
    }

    pub fn has_first_stage(&self) -> bool {
        self.caption || self.summary
    }

    /// All 16 valid sets (answer fixed on), in bitmask order.
    pub fn all_valid() -> impl Iterator<Item = CotFieldSet> {
        (0u8..16).map(|bits| CotFieldSet {
            caption: bits & 1 != 0,
            summary: bits & 2 != 0,
            reason: bits & 4 != 0,
            confidence: bits & 8 != 0,
        })
    }

    /// Builds a set from field names. Rejects a list without `answer`.
    pub fn from_fields(fields: impl IntoIterator<Item = CotField>) -> Result<Self, ModeError> {
        let mut set = CotFieldSet::ANSWER_ONLY;
        let mut has_answer = false;
        for field in fields {
            match field {
                CotField::Caption => set.caption = true,
                CotField::Summary => set.summary = true,
                CotField::Reason => set.reason = true,
                CotField::Answer => has_answer = true,
                CotField::Confidence => set.confidence = true,
            }
        }
        if !has_answer {
            return Err(ModeError::AnswerDisabled(String::new()));
        }
        Ok(set)
    }
}

impl fmt::Display for CotFieldSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.fields().map(CotField::key).collect();
        f.write_str(&names.join("+"))
    }
}

impl Serialize for CotFieldSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.fields().map(CotField::key))
    }
}

impl<'de> Deserialize<'de> for CotFieldSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(deserializer)?;
        let fields = names
            .iter()
            .map(|n| n.parse::<CotField>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(serde::de::Error::custom)?;
        CotFieldSet::from_fields(fields)
            .map_err(|_| serde::de::Error::custom("cot_fields must include `answer`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    OneStage,
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PromptStyle {
    /// Minimalist.
    #[serde(alias = "p1")]
    P1,
    /// Detailed, with a long worked example.
    #[serde(alias = "p2")]
    P2,
    /// Rule guidance with moderate examples.
    #[serde(alias = "p3")]
    P3,
}

impl PromptStyle {
    pub const ALL: [PromptStyle; 3] = [PromptStyle::P1, PromptStyle::P2, PromptStyle::P3];
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for PromptStyle {
    type Err = ModeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "P1" | "p1" => Ok(PromptStyle::P1),
            "P2" | "p2" => Ok(PromptStyle::P2),
            "P3" | "p3" => Ok(PromptStyle::P3),
            other => Err(ModeError::UnknownStyle(other.to_string())),
        }
    }
}

/// Optional preliminary call whose notes are injected into the main prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocusVariant {
    #[default]
    None,
    /// Question-conditioned: what to look for, given the question and options.
    QaFocal,
    /// Question-free: what stands out in the video itself.
    QaFocus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_max_tokens() -> u32 {
    2048
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            temperature: 0.0,
            max_tokens: default_max_tokens(),
        }
    }
}

fn default_clip_seconds() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeConfig {
    #[serde(alias = "id")]
    pub mode_id: String,
    pub paradigm: Paradigm,
    pub prompt_style: PromptStyle,
    pub cot_fields: CotFieldSet,
    #[serde(alias = "backend")]
    pub backend_id: String,
    #[serde(default)]
    pub focus_variant: FocusVariant,
    /// Backend for the preliminary focus call; defaults to `backend_id`.
    #[serde(default, alias = "focus_backend", skip_serializing_if = "Option::is_none")]
    pub focus_backend_id: Option<String>,
    #[serde(default = "default_clip_seconds")]
    pub clip_seconds: f64,
    #[serde(default)]
    pub sampling: Sampling,
}

impl ModeConfig {
    pub fn one_stage(mode_id: impl Into<String>, style: PromptStyle, fields: CotFieldSet, backend_id: impl Into<String>) -> Self {
        ModeConfig {
            mode_id: mode_id.into(),
            paradigm: Paradigm::OneStage,
            prompt_style: style,
            cot_fields: fields,
            backend_id: backend_id.into(),
            focus_variant: FocusVariant::None,
            focus_backend_id: None,
            clip_seconds: default_clip_seconds(),
            sampling: Sampling::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModeError> {
        if self.mode_id.is_empty() {
            return Err(ModeError::EmptyId);
        }
        if self.backend_id.is_empty() {
            return Err(ModeError::EmptyBackend(self.mode_id.clone()));
        }
        if !(self.clip_seconds > 0.0) || !self.clip_seconds.is_finite() {
            return Err(ModeError::ClipSeconds {
                mode: self.mode_id.clone(),
                value: self.clip_seconds,
            });
        }
        if self.paradigm == Paradigm::TwoStage && !self.cot_fields.has_first_stage() {
            return Err(ModeError::EmptyFirstStage(self.mode_id.clone()));
        }
        if self.sampling.max_tokens == 0 {
            return Err(ModeError::MaxTokens {
                mode: self.mode_id.clone(),
            });
        }
        Ok(())
    }

    pub fn focus_backend(&self) -> &str {
        self.focus_backend_id.as_deref().unwrap_or(&self.backend_id)
    }

    /// Canonical serialization; equal configs yield equal strings.
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(self).expect("mode configs always serialize")
    }
}

/// Validates every mode and checks id uniqueness.
pub fn validate_modes<'a>(modes: impl IntoIterator<Item = &'a ModeConfig>) -> Result<(), ModeError> {
    let mut seen = std::collections::BTreeSet::new();
    for mode in modes {
        mode.validate()?;
        if !seen.insert(mode.mode_id.as_str()) {
            return Err(ModeError::Duplicate(mode.mode_id.clone()));
        }
    }
    Ok(())
}
