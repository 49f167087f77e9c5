//! Similarity-modulated weighted voting across modes.
//!
//! * A mode's weight `w` is its accuracy on the labeled questions it answered.
//! * The similarity of two modes is the fraction of their commonly answered
//!   questions on which they agree.
//! * Each active mode `k` votes for its answer with
//!   `w_k / D_k`, `D_k = sum_j sim(k, j)` over all active modes `j` including
//!   `k` itself, so `D_k >= 1`. The option with the largest total wins.
//!
//! Sums are taken over values sorted ascending, which makes every score
//! independent of mode order down to the last bit.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{OptionIndex, NUM_OPTIONS};
use crate::predictions::{Labels, PredictionSet};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EnsembleError {
    #[error("mode `{0}` answered no labeled question")]
    NoLabeledOverlap(String),
    #[error("modes `{0}` and `{1}` share no answered question")]
    EmptyOverlap(String, String),
    #[error("no active mode answered `{0}`")]
    NoVotes(String),
    #[error("activation selects no mode")]
    NoActiveModes,
    #[error("activation has {found} entries, expected {expected}")]
    ActivationLength { expected: usize, found: usize },
    #[error("bad activation vector `{0}`, expected a string of 0/1")]
    BadActivation(String),
    #[error("unknown mode `{0}`")]
    UnknownMode(String),
    #[error("mode `{0}` is not active")]
    InactiveMode(String),
    #[error("prediction sets do not line up with the ensemble modes")]
    ModeMismatch,
    #[error("no candidate modes")]
    NoCandidates,
    #[error("max_k must be at least 1")]
    InvalidMaxK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeWeight {
    pub mode_id: String,
    pub w: f64,
    /// Labeled questions the weight was measured on.
    pub n_eval: usize,
}

/// Accuracy of `preds` on the labeled questions it answered.
pub fn compute_weight(preds: &PredictionSet, labels: &Labels) -> Result<ModeWeight, EnsembleError> {
    let (correct, answered) = labels
        .iter()
        .filter_map(|(q_uid, truth)| preds.get(q_uid).map(|p| p == truth))
        .fold((0usize, 0usize), |(c, n), hit| (c + hit as usize, n + 1));
    if answered == 0 {
        return Err(EnsembleError::NoLabeledOverlap(preds.mode_id.clone()));
    }
    Ok(ModeWeight {
        mode_id: preds.mode_id.clone(),
        w: correct as f64 / answered as f64,
        n_eval: answered,
    })
}

/// Agreement counts over the questions both sets answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Agreement {
    pub agree: usize,
    pub overlap: usize,
}

impl Agreement {
    pub fn between(a: &PredictionSet, b: &PredictionSet) -> Agreement {
        let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        small
            .answers
            .iter()
            .filter_map(|(q_uid, x)| large.get(q_uid).map(|y| *x == y))
            .fold(Agreement { agree: 0, overlap: 0 }, |acc, same| Agreement {
                agree: acc.agree + same as usize,
                overlap: acc.overlap + 1,
            })
    }

    pub fn ratio(&self) -> Option<f64> {
        (self.overlap > 0).then(|| self.agree as f64 / self.overlap as f64)
    }
}

pub fn compute_similarity(a: &PredictionSet, b: &PredictionSet) -> Result<f64, EnsembleError> {
    Agreement::between(a, b)
        .ratio()
        .ok_or_else(|| EnsembleError::EmptyOverlap(a.mode_id.clone(), b.mode_id.clone()))
}

/// Pairwise similarities; `None` marks a pair without common answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub modes: Vec<String>,
    pub entries: Vec<Vec<Option<f64>>>,
    pub overlaps: Vec<Vec<usize>>,
}

impl SimilarityMatrix {
    pub fn from_predictions(sets: &[PredictionSet]) -> Self {
        let n = sets.len();
        let mut entries = vec![vec![None; n]; n];
        let mut overlaps = vec![vec![0; n]; n];
        for i in 0..n {
            for j in i..n {
                let agreement = Agreement::between(&sets[i], &sets[j]);
                let sim = if i == j { (agreement.overlap > 0).then_some(1.0) } else { agreement.ratio() };
                entries[i][j] = sim;
                entries[j][i] = sim;
                overlaps[i][j] = agreement.overlap;
                overlaps[j][i] = agreement.overlap;
            }
        }
        SimilarityMatrix {
            modes: sets.iter().map(|s| s.mode_id.clone()).collect(),
            entries,
            overlaps,
        }
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i][j]
    }

    pub fn index_of(&self, mode_id: &str) -> Option<usize> {
        self.modes.iter().position(|m| m == mode_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Among tied options take the one backed by the single highest-weight
    /// mode, then the lowest option index.
    #[default]
    HighestWeightThenLowestIndex,
}

mod activation_bits {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bits: &[bool], serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&super::format_activation(bits))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<bool>, D::Error> {
        let s = String::deserialize(deserializer)?;
        super::parse_activation(&s).map_err(serde::de::Error::custom)
    }
}

pub fn format_activation(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

pub fn parse_activation(s: &str) -> Result<Vec<bool>, EnsembleError> {
    s.trim()
        .chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(EnsembleError::BadActivation(s.to_string())),
        })
        .collect()
}

/// Candidate modes with an activation vector, weights and similarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub modes: Vec<String>,
    #[serde(with = "activation_bits")]
    pub activation: Vec<bool>,
    pub weights: Vec<ModeWeight>,
    pub similarity: SimilarityMatrix,
    #[serde(default)]
    pub tie_policy: TiePolicy,
}

impl EnsembleSpec {
    /// Measures weights on `labels` and similarities on `preds`.
    pub fn build(preds: &[PredictionSet], labels: &Labels, activation: Vec<bool>) -> Result<Self, EnsembleError> {
        let weights = preds
            .iter()
            .map(|p| compute_weight(p, labels))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(weights, SimilarityMatrix::from_predictions(preds), activation)
    }

    pub fn from_parts(
        weights: Vec<ModeWeight>,
        similarity: SimilarityMatrix,
        activation: Vec<bool>,
    ) -> Result<Self, EnsembleError> {
        let modes: Vec<String> = weights.iter().map(|w| w.mode_id.clone()).collect();
        if modes != similarity.modes {
            return Err(EnsembleError::ModeMismatch);
        }
        if activation.len() != modes.len() {
            return Err(EnsembleError::ActivationLength {
                expected: modes.len(),
                found: activation.len(),
            });
        }
        if !activation.iter().any(|&a| a) {
            return Err(EnsembleError::NoActiveModes);
        }
        Ok(EnsembleSpec {
            modes,
            activation,
            weights,
            similarity,
            tie_policy: TiePolicy::default(),
        })
    }

    pub fn with_activation(&self, activation: Vec<bool>) -> Result<Self, EnsembleError> {
        Self::from_parts(self.weights.clone(), self.similarity.clone(), activation)
    }

    pub fn active_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.activation.iter().enumerate().filter(|(_, a)| **a).map(|(i, _)| i)
    }

    pub fn active_modes(&self) -> impl Iterator<Item = &str> + '_ {
        self.active_indices().map(|i| self.modes[i].as_str())
    }

    pub fn activation_string(&self) -> String {
        format_activation(&self.activation)
    }

    /// `D_k`: summed similarity of mode `k` to every active mode, itself
    /// counted as 1. Pairs without common answers count as 0.
    pub fn redundancy(&self, k: usize) -> f64 {
        let mut terms: Vec<f64> = self
            .active_indices()
            .filter(|&j| j != k)
            .map(|j| self.similarity.get(k, j).unwrap_or(0.0))
            .collect();
        terms.push(1.0);
        order_free_sum(terms)
    }

    /// Effective weight of every mode; `None` for inactive ones.
    pub fn effective_weights(&self) -> Vec<Option<f64>> {
        (0..self.modes.len())
            .map(|k| self.activation[k].then(|| self.weights[k].w / self.redundancy(k)))
            .collect()
    }

    /// Fused decisions for every question answered by at least one active mode.
    pub fn decide_all(&self, preds: &[PredictionSet]) -> Result<Vec<EnsembleDecision>, EnsembleError> {
        self.check_alignment(preds)?;
        let effective = self.effective_weights();
        let q_uids: BTreeSet<&str> = self
            .active_indices()
            .flat_map(|k| preds[k].answers.keys().map(String::as_str))
            .collect();
        q_uids
            .into_iter()
            .map(|q| self.vote_with(q, preds, &effective))
            .collect()
    }

    /// Fraction of labeled questions (answered by some active mode) decided correctly.
    pub fn accuracy(&self, preds: &[PredictionSet], labels: &Labels) -> Result<f64, EnsembleError> {
        let fused = decisions_to_predictions("ensemble", &self.decide_all(preds)?);
        Ok(compute_weight(&fused, labels)?.w)
    }

    fn check_alignment(&self, preds: &[PredictionSet]) -> Result<(), EnsembleError> {
        let aligned = preds.len() == self.modes.len() && preds.iter().zip(&self.modes).all(|(p, m)| &p.mode_id == m);
        if aligned {
            Ok(())
        } else {
            Err(EnsembleError::ModeMismatch)
        }
    }

    fn vote_with(&self, q_uid: &str, preds: &[PredictionSet], effective: &[Option<f64>]) -> Result<EnsembleDecision, EnsembleError> {
        let mut contributions: [Vec<f64>; NUM_OPTIONS] = Default::default();
        // Highest raw weight backing each option, for tie-breaking.
        let mut backing: [Option<f64>; NUM_OPTIONS] = [None; NUM_OPTIONS];
        let mut participants = Vec::new();
        for k in self.active_indices() {
            let (Some(choice), Some(eff)) = (preds[k].get(q_uid), effective[k]) else {
                continue;
            };
            contributions[choice.get()].push(eff);
            let w = self.weights[k].w;
            backing[choice.get()] = Some(backing[choice.get()].map_or(w, |b| b.max(w)));
            participants.push(self.modes[k].clone());
        }
        if participants.is_empty() {
            return Err(EnsembleError::NoVotes(q_uid.to_string()));
        }
        let scores: [f64; NUM_OPTIONS] = contributions.map(order_free_sum);
        let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..NUM_OPTIONS).filter(|&c| scores[c] == best).collect();
        let choice = match self.tie_policy {
            TiePolicy::HighestWeightThenLowestIndex => tied
                .iter()
                .copied()
                .filter(|&c| backing[c].is_some())
                .fold(None::<usize>, |acc, c| match acc {
                    Some(a) if backing[a] >= backing[c] => Some(a),
                    _ => Some(c),
                })
                .unwrap_or(tied[0]),
        };
        Ok(EnsembleDecision {
            q_uid: q_uid.to_string(),
            choice: OptionIndex::ALL[choice],
            scores,
            participants,
            tie: tied.len() > 1,
        })
    }
}

fn order_free_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

/// `w_k / D_k` for the active mode `mode_id`.
pub fn effective_weight(mode_id: &str, spec: &EnsembleSpec) -> Result<f64, EnsembleError> {
    let k = spec
        .modes
        .iter()
        .position(|m| m == mode_id)
        .ok_or_else(|| EnsembleError::UnknownMode(mode_id.to_string()))?;
    if !spec.activation[k] {
        return Err(EnsembleError::InactiveMode(mode_id.to_string()));
    }
    Ok(spec.weights[k].w / spec.redundancy(k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub q_uid: String,
    pub choice: OptionIndex,
    pub scores: [f64; NUM_OPTIONS],
    pub participants: Vec<String>,
    /// Two or more options reached the top score before tie-breaking.
    pub tie: bool,
}

/// Fused decision for one question. `preds` must follow `spec.modes` order.
pub fn vote(q_uid: &str, spec: &EnsembleSpec, preds: &[PredictionSet]) -> Result<EnsembleDecision, EnsembleError> {
    spec.check_alignment(preds)?;
    spec.vote_with(q_uid, preds, &spec.effective_weights())
}

pub fn decisions_to_predictions(mode_id: &str, decisions: &[EnsembleDecision]) -> PredictionSet {
    PredictionSet::from_pairs(mode_id, decisions.iter().map(|d| (d.q_uid.clone(), d.choice)))
}

/// Greedy forward selection.
///
/// Starting from the highest-weight mode, repeatedly adds the candidate that
/// gives the best ensemble accuracy on `labels` (ties: lower mean similarity
/// to the modes already chosen, then lower index) until `max_k` modes are
/// chosen. The returned activation is the shortest prefix of that path with
/// the highest accuracy.
pub fn select_modes(candidates: &[PredictionSet], labels: &Labels, max_k: usize) -> Result<EnsembleSpec, EnsembleError> {
    if candidates.is_empty() {
        return Err(EnsembleError::NoCandidates);
    }
    if max_k == 0 {
        return Err(EnsembleError::InvalidMaxK);
    }
    let n = candidates.len();
    let base = EnsembleSpec::build(candidates, labels, vec![true; n])?;
    let subset_accuracy = |chosen: &[usize]| -> Result<f64, EnsembleError> {
        let mut bits = vec![false; n];
        for &i in chosen {
            bits[i] = true;
        }
        base.with_activation(bits)?.accuracy(candidates, labels)
    };

    let first = (0..n)
        .fold(None::<usize>, |acc, i| match acc {
            Some(a) if base.weights[a].w >= base.weights[i].w => Some(a),
            _ => Some(i),
        })
        .expect("non-empty");
    let mut path = vec![first];
    let mut path_accuracy = vec![subset_accuracy(&path)?];

    while path.len() < max_k.min(n) {
        let mut best: Option<(usize, f64, f64)> = None;
        for c in (0..n).filter(|c| !path.contains(c)) {
            let mut trial = path.clone();
            trial.push(c);
            let acc = subset_accuracy(&trial)?;
            let mean_sim = path.iter().map(|&j| base.similarity.get(c, j).unwrap_or(0.0)).sum::<f64>() / path.len() as f64;
            let better = match best {
                None => true,
                Some((_, best_acc, best_sim)) => acc > best_acc || (acc == best_acc && mean_sim < best_sim),
            };
            if better {
                best = Some((c, acc, mean_sim));
            }
        }
        let (c, acc, _) = best.expect("remaining candidates");
        path.push(c);
        path_accuracy.push(acc);
    }

    let top = path_accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let keep = path_accuracy.iter().position(|&a| a == top).expect("non-empty") + 1;
    let mut activation = vec![false; n];
    for &i in &path[..keep] {
        activation[i] = true;
    }
    base.with_activation(activation)
}
