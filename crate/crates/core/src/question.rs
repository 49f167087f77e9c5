//! Questions, question sets and the input-record validation that builds them.
//!
//! Input records follow the EgoSchema layout: `q_uid`, `question`,
//! `option 0` .. `option 4`, a video reference and an optional `truth`
//! label. A file is either one JSON array of records or JSON lines.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::answer::{OptionIndex, NUM_OPTIONS};
use crate::predictions::Labels;

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("duplicate q_uid `{0}`")]
    DuplicateId(String),
    #[error("question `{q_uid}` has {found} options, expected {NUM_OPTIONS}")]
    OptionCount { q_uid: String, found: usize },
    #[error("question `{q_uid}` has an empty option {index}")]
    EmptyOption { q_uid: String, index: usize },
    #[error("question `{q_uid}` has ground truth {truth}, expected 0..{NUM_OPTIONS}")]
    TruthOutOfRange { q_uid: String, truth: i64 },
    #[error("question record has an empty q_uid")]
    EmptyId,
    #[error("question `{q_uid}` has non-positive duration {duration}")]
    BadDuration { q_uid: String, duration: f64 },
    #[error("record {record}: {source}")]
    Json {
        record: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A raw input record, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub q_uid: String,
    pub question: String,
    #[serde(default, alias = "google_drive_id", skip_serializing_if = "Option::is_none")]
    pub video_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    /// `option 0` .. `option 4`, plus any unrelated keys (ignored).
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl QuestionRecord {
    fn options(&self) -> BTreeMap<usize, String> {
        self.extra
            .iter()
            .filter_map(|(key, value)| {
                let index = key.strip_prefix("option")?.trim().parse::<usize>().ok()?;
                Some((index, value.as_str().unwrap_or("").to_string()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Question {
    pub q_uid: String,
    pub question_text: String,
    pub options: [String; NUM_OPTIONS],
    /// Opaque URI or path, handed to backends as-is.
    pub video_ref: String,
    pub ground_truth: Option<OptionIndex>,
    /// Video length in seconds when known; used to plan clip captions.
    pub duration: Option<f64>,
}

impl Question {
    pub fn to_record(&self) -> QuestionRecord {
        let extra = self
            .options
            .iter()
            .enumerate()
            .map(|(i, text)| (format!("option {i}"), Value::String(text.clone())))
            .collect();
        QuestionRecord {
            q_uid: self.q_uid.clone(),
            question: self.question_text.clone(),
            video_ref: Some(self.video_ref.clone()),
            truth: self.ground_truth.map(|t| t.get() as i64),
            duration: self.duration,
            extra,
        }
    }
}

/// Validated questions, always ordered by `q_uid`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuestionSet {
    questions: Vec<Question>,
}

impl QuestionSet {
    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Question> {
        self.questions.iter()
    }

    pub fn get(&self, q_uid: &str) -> Option<&Question> {
        self.questions
            .binary_search_by(|q| q.q_uid.as_str().cmp(q_uid))
            .ok()
            .map(|i| &self.questions[i])
    }

    pub fn labeled_subset(&self) -> impl Iterator<Item = &Question> {
        self.questions.iter().filter(|q| q.ground_truth.is_some())
    }

    pub fn labels(&self) -> Labels {
        self.labeled_subset()
            .filter_map(|q| Some((q.q_uid.clone(), q.ground_truth?)))
            .collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.questions.iter().map(|q| q.q_uid.as_str())
    }

    pub fn to_records(&self) -> Vec<QuestionRecord> {
        self.questions.iter().map(Question::to_record).collect()
    }

    /// Load and validate a question file (JSON array or JSON lines).
    pub fn load(path: &Path) -> Result<Self, ValidationError> {
        let text = std::fs::read_to_string(path).map_err(|source| ValidationError::Io {
            path: path.display().to_string(),
            source,
        })?;
        validate_question_set(parse_records(&text)?)
    }
}

/// Parse question records from either a JSON array or JSON lines.
pub fn parse_records(text: &str) -> Result<Vec<QuestionRecord>, ValidationError> {
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(text).map_err(|source| ValidationError::Json { record: 0, source });
    }
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|source| ValidationError::Json { record: i + 1, source })
        })
        .collect()
}

pub fn validate_question_set(
    records: impl IntoIterator<Item = QuestionRecord>,
) -> Result<QuestionSet, ValidationError> {
    let mut seen = BTreeSet::new();
    let mut questions = Vec::new();
    for record in records {
        if record.q_uid.is_empty() {
            return Err(ValidationError::EmptyId);
        }
        if !seen.insert(record.q_uid.clone()) {
            return Err(ValidationError::DuplicateId(record.q_uid));
        }
        questions.push(validate_record(record)?);
    }
    questions.sort_by(|a, b| a.q_uid.cmp(&b.q_uid));
    Ok(QuestionSet { questions })
}

fn validate_record(record: QuestionRecord) -> Result<Question, ValidationError> {
    let found = record.options();
    let contiguous = found.keys().copied().eq(0..found.len());
    if found.len() != NUM_OPTIONS || !contiguous {
        return Err(ValidationError::OptionCount {
            q_uid: record.q_uid,
            found: found.len(),
        });
    }
    if let Some((&index, _)) = found.iter().find(|(_, text)| text.trim().is_empty()) {
        return Err(ValidationError::EmptyOption {
            q_uid: record.q_uid,
            index,
        });
    }
    let options: [String; NUM_OPTIONS] = std::array::from_fn(|i| found[&i].clone());

    let ground_truth = match record.truth {
        None => None,
        Some(truth) => Some(OptionIndex::new(truth).ok_or_else(|| ValidationError::TruthOutOfRange {
            q_uid: record.q_uid.clone(),
            truth,
        })?),
    };
    if let Some(duration) = record.duration {
        if !(duration > 0.0) {
            return Err(ValidationError::BadDuration {
                q_uid: record.q_uid,
                duration,
            });
        }
    }
    Ok(Question {
        video_ref: record.video_ref.unwrap_or_else(|| record.q_uid.clone()),
        q_uid: record.q_uid,
        question_text: record.question,
        options,
        ground_truth,
        duration: record.duration,
    })
}
