//! Per-mode prediction sets and ground-truth label maps.
//!
//! Prediction file: `{"mode_id": "m1", "answers": {"<q_uid>": 2, ...}}`.
//! Label file: `{"<q_uid>": 2, ...}`, the shape of EgoSchema's
//! `subset_answers.json`.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::answer::OptionIndex;
use crate::question::QuestionSet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub mode_id: String,
    pub answers: BTreeMap<String, OptionIndex>,
}

impl PredictionSet {
    pub fn new(mode_id: impl Into<String>) -> Self {
        PredictionSet {
            mode_id: mode_id.into(),
            answers: BTreeMap::new(),
        }
    }

    pub fn from_pairs<K: Into<String>>(
        mode_id: impl Into<String>,
        pairs: impl IntoIterator<Item = (K, OptionIndex)>,
    ) -> Self {
        PredictionSet {
            mode_id: mode_id.into(),
            answers: pairs.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    pub fn get(&self, q_uid: &str) -> Option<OptionIndex> {
        self.answers.get(q_uid).copied()
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    /// q_uids present here but absent from `qs`.
    pub fn unknown_ids<'a>(&'a self, qs: &'a QuestionSet) -> impl Iterator<Item = &'a str> {
        self.answers
            .keys()
            .map(String::as_str)
            .filter(|id| qs.get(id).is_none())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prediction sets always serialize") + "\n"
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_json())
    }
}

/// Ground truth by q_uid.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Labels(BTreeMap<String, OptionIndex>);

impl Labels {
    pub fn get(&self, q_uid: &str) -> Option<OptionIndex> {
        self.0.get(q_uid).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, OptionIndex)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

impl<K: Into<String>> FromIterator<(K, OptionIndex)> for Labels {
    fn from_iter<I: IntoIterator<Item = (K, OptionIndex)>>(iter: I) -> Self {
        Labels(iter.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }
}
