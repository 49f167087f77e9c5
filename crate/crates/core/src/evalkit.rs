//! Reports: accuracy tables, similarity matrices, activation sweeps and
//! submission files.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::OptionIndex;
use crate::ensemble::{compute_weight, format_activation, EnsembleDecision, EnsembleError, EnsembleSpec, SimilarityMatrix};
use crate::predictions::{Labels, PredictionSet};
use crate::question::QuestionSet;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("need at least {0} prediction sets")]
    TooFewSets(usize),
    #[error("no activation vectors given")]
    NoVectors,
    #[error("missing decisions for {} question(s), first `{}`", .0.len(), .0[0])]
    MissingDecisions(Vec<String>),
    #[error("malformed submission file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Same quantity as a mode weight, reported as a plain number.
pub fn accuracy(preds: &PredictionSet, labels: &Labels) -> Result<f64, ReportError> {
    Ok(compute_weight(preds, labels)?.w)
}

/// `0.79` -> `"79.0%"`.
pub fn format_percent(value: f64) -> String {
    format!("{:.1}%", value * 100.0)
}

fn percent_cell(value: f64) -> String {
    format!("{:.1}", value * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub mode_id: String,
    pub accuracy: f64,
    pub n_eval: usize,
}

/// Per-mode accuracy table. Modes with no labeled answers are skipped.
pub fn accuracy_table(sets: &[PredictionSet], labels: &Labels) -> Vec<AccuracyRow> {
    sets.iter()
        .filter_map(|p| compute_weight(p, labels).ok())
        .map(|w| AccuracyRow {
            mode_id: w.mode_id,
            accuracy: w.w,
            n_eval: w.n_eval,
        })
        .collect()
}

pub fn accuracy_table_csv(rows: &[AccuracyRow]) -> Result<String, ReportError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["mode", "accuracy_pct", "n_eval"])?;
    for row in rows {
        writer.write_record([row.mode_id.clone(), percent_cell(row.accuracy), row.n_eval.to_string()])?;
    }
    Ok(String::from_utf8(writer.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
}

/// Similarity matrix as a percent table plus the raw matrix as JSON.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub matrix: SimilarityMatrix,
    /// Comma-separated, percent with one decimal, `n/a` where two modes share
    /// no answered question.
    pub table: String,
    pub json: String,
}

pub fn similarity_report(sets: &[PredictionSet]) -> Result<SimilarityReport, ReportError> {
    if sets.len() < 2 {
        return Err(ReportError::TooFewSets(2));
    }
    let matrix = SimilarityMatrix::from_predictions(sets);
    let mut writer = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = std::iter::once("mode").chain(matrix.modes.iter().map(String::as_str)).collect();
    writer.write_record(&header)?;
    for (i, mode) in matrix.modes.iter().enumerate() {
        let mut row = vec![mode.clone()];
        row.extend((0..matrix.len()).map(|j| matrix.get(i, j).map_or_else(|| "n/a".to_string(), percent_cell)));
        writer.write_record(&row)?;
    }
    let table = String::from_utf8(writer.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8");
    let json = serde_json::to_string_pretty(&matrix).expect("matrix serializes") + "\n";
    Ok(SimilarityReport { matrix, table, json })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub activation: String,
    pub accuracy: f64,
}

/// Ensemble accuracy for every activation vector, best first. Equal
/// accuracies keep their input order.
pub fn activation_sweep(vectors: &[Vec<bool>], preds: &[PredictionSet], labels: &Labels) -> Result<Vec<SweepRow>, ReportError> {
    if vectors.is_empty() {
        return Err(ReportError::NoVectors);
    }
    let base = EnsembleSpec::build(preds, labels, vec![true; preds.len()])?;
    let mut rows = vectors
        .iter()
        .map(|bits| {
            let spec = base.with_activation(bits.clone())?;
            Ok(SweepRow {
                activation: format_activation(bits),
                accuracy: spec.accuracy(preds, labels)?,
            })
        })
        .collect::<Result<Vec<_>, ReportError>>()?;
    rows.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy));
    Ok(rows)
}

/// Every non-empty activation vector over `n` modes, in counting order.
pub fn all_activations(n: usize) -> Vec<Vec<bool>> {
    (1u64..(1 << n))
        .map(|mask| (0..n).map(|i| mask & (1 << (n - 1 - i)) != 0).collect())
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String, ReportError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["activation", "accuracy_pct"])?;
    for row in rows {
        writer.write_record([row.activation.clone(), percent_cell(row.accuracy)])?;
    }
    Ok(String::from_utf8(writer.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
}

/// Writes `path` as a JSON object `{q_uid: answer}` with sorted keys and a
/// sibling `.csv` with header `q_uid,answer`. When `qs` is given every one of
/// its questions must have a decision.
pub fn write_submission(decisions: &[EnsembleDecision], qs: Option<&QuestionSet>, path: &Path) -> Result<PathBuf, ReportError> {
    let mapping: BTreeMap<&str, OptionIndex> = decisions.iter().map(|d| (d.q_uid.as_str(), d.choice)).collect();
    if let Some(qs) = qs {
        let missing: Vec<String> = qs.ids().filter(|id| !mapping.contains_key(id)).map(str::to_string).collect();
        if !missing.is_empty() {
            return Err(ReportError::MissingDecisions(missing));
        }
    }
    let json = serde_json::to_string_pretty(&mapping).expect("mapping serializes") + "\n";
    std::fs::write(path, json)?;

    let csv_path = path.with_extension("csv");
    let mut writer = csv::Writer::from_path(&csv_path)?;
    writer.write_record(["q_uid", "answer"])?;
    for (q_uid, answer) in &mapping {
        writer.write_record([*q_uid, &answer.to_string()])?;
    }
    writer.flush()?;
    Ok(csv_path)
}

pub fn read_submission(path: &Path) -> Result<BTreeMap<String, OptionIndex>, ReportError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| ReportError::Malformed(e.to_string()))
}
