//! `modevote ensemble`, `eval` and `report`: everything that works on saved
//! prediction files.

use std::path::{Path, PathBuf};

use clap::Args;
use modevote_core::ensemble::{parse_activation, ModeWeight};
use modevote_core::evalkit::{
    accuracy_table, accuracy_table_csv, activation_sweep, all_activations, format_percent, similarity_report, sweep_csv,
    write_submission,
};
use modevote_core::{compute_weight, select_modes, EnsembleSpec, Labels, PredictionSet, QuestionSet, SimilarityMatrix};
use serde::Serialize;

use crate::error::CliError;
use crate::write_file;

/// Sweeps over more candidates than this are skipped (2^n subsets).
const MAX_SWEEP_MODES: usize = 12;

#[derive(Debug, Clone, Args)]
pub struct Inputs {
    /// Prediction files written by `run`.
    #[arg(required = true, num_args = 1..)]
    pub predictions: Vec<PathBuf>,
    /// Labels as a JSON object `{q_uid: answer}`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Question file; its `truth` fields serve as labels when `--labels` is
    /// absent, and every question must receive a decision.
    #[arg(long)]
    pub questions: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EnsembleArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// `all`, `auto` (greedy selection on the labels) or a 0/1 string such as `1011`.
    #[arg(long, default_value = "all")]
    pub activation: String,
    /// Most modes `auto` may select.
    #[arg(long, default_value_t = 7)]
    pub max_k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    /// Directory for `accuracy.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[arg(long)]
    pub out: PathBuf,
}

struct Loaded {
    sets: Vec<PredictionSet>,
    labels: Option<Labels>,
    questions: Option<QuestionSet>,
}

fn load(inputs: &Inputs) -> Result<Loaded, CliError> {
    if inputs.predictions.is_empty() {
        return Err(CliError::Usage("no prediction files given".into()));
    }
    let sets = inputs
        .predictions
        .iter()
        .map(|p| load_predictions(p))
        .collect::<Result<Vec<_>, _>>()?;
    for (i, a) in sets.iter().enumerate() {
        if sets[..i].iter().any(|b| b.mode_id == a.mode_id) {
            return Err(CliError::Validation(format!("mode `{}` appears in two prediction files", a.mode_id)));
        }
    }
    let questions = inputs.questions.as_deref().map(QuestionSet::load).transpose()?;
    let labels = match (&inputs.labels, &questions) {
        (Some(path), _) => Some(Labels::load(path).map_err(|e| read_error(path, e))?),
        (None, Some(qs)) if qs.labeled_subset().next().is_some() => Some(qs.labels()),
        _ => None,
    };
    if let Some(qs) = &questions {
        for set in &sets {
            if let Some(id) = set.unknown_ids(qs).next() {
                return Err(CliError::Validation(format!("mode `{}` answers unknown question `{id}`", set.mode_id)));
            }
        }
    }
    Ok(Loaded { sets, labels, questions })
}

fn read_error(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::InvalidData {
        CliError::Validation(format!("{}: {e}", path.display()))
    } else {
        CliError::io(path, e)
    }
}

fn load_predictions(path: &Path) -> Result<PredictionSet, CliError> {
    PredictionSet::load(path).map_err(|e| read_error(path, e))
}

fn require_labels(labels: Option<Labels>) -> Result<Labels, CliError> {
    labels.ok_or_else(|| CliError::Usage("labels are required: pass --labels or a --questions file with truth".into()))
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub activation: String,
    pub active_modes: Vec<String>,
    pub decisions: usize,
    pub ties: usize,
    /// Ensemble accuracy on the labels, when labels were given.
    pub accuracy: Option<f64>,
    pub submission: PathBuf,
}

pub fn cmd_ensemble(args: &EnsembleArgs) -> Result<EnsembleSummary, CliError> {
    let Loaded { sets, labels, questions } = load(&args.inputs)?;
    let spec = match (args.activation.as_str(), &labels) {
        ("auto", Some(labels)) => select_modes(&sets, labels, args.max_k)?,
        ("auto", None) => return Err(CliError::Usage("--activation auto needs labels".into())),
        (bits, labels) => {
            let activation = if bits == "all" { vec![true; sets.len()] } else { parse_activation(bits)? };
            match labels {
                Some(labels) => EnsembleSpec::build(&sets, labels, activation)?,
                None if sets.len() == 1 => {
                    // One mode needs no weight: it wins every vote it casts.
                    let weight = ModeWeight {
                        mode_id: sets[0].mode_id.clone(),
                        w: 1.0,
                        n_eval: 0,
                    };
                    EnsembleSpec::from_parts(vec![weight], SimilarityMatrix::from_predictions(&sets), activation)?
                }
                None => return Err(require_labels(None).unwrap_err()),
            }
        }
    };
    let decisions = spec.decide_all(&sets)?;

    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let submission = args.out.join("submission.json");
    write_submission(&decisions, questions.as_ref(), &submission)?;
    write_file(
        &args.out.join("ensemble_spec.json"),
        &(serde_json::to_string_pretty(&spec).expect("spec serializes") + "\n"),
    )?;
    let mut lines = String::new();
    for d in &decisions {
        lines.push_str(&serde_json::to_string(d).expect("decisions serialize"));
        lines.push('\n');
    }
    write_file(&args.out.join("decisions.jsonl"), &lines)?;
    write_reports(&args.out, &sets, labels.as_ref())?;

    let accuracy = match &labels {
        Some(labels) => Some(spec.accuracy(&sets, labels)?),
        None => None,
    };
    Ok(EnsembleSummary {
        activation: spec.activation_string(),
        active_modes: spec.active_modes().map(str::to_string).collect(),
        decisions: decisions.len(),
        ties: decisions.iter().filter(|d| d.tie).count(),
        accuracy,
        submission,
    })
}

/// Similarity matrix (two or more sets), accuracy table and activation
/// sweep (with labels).
fn write_reports(out: &Path, sets: &[PredictionSet], labels: Option<&Labels>) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    let mut put = |name: &str, text: &str| -> Result<(), CliError> {
        let path = out.join(name);
        write_file(&path, text)?;
        written.push(path);
        Ok(())
    };
    if sets.len() >= 2 {
        let report = similarity_report(sets)?;
        put("similarity.csv", &report.table)?;
        put("similarity.json", &report.json)?;
    }
    if let Some(labels) = labels {
        put("accuracy.csv", &accuracy_table_csv(&accuracy_table(sets, labels))?)?;
        let sweepable = sets.len() >= 2 && sets.len() <= MAX_SWEEP_MODES && sets.iter().all(|s| compute_weight(s, labels).is_ok());
        if sweepable {
            put("sweep.csv", &sweep_csv(&activation_sweep(&all_activations(sets.len()), sets, labels)?)?)?;
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub mode_id: String,
    pub accuracy: f64,
    pub n_eval: usize,
}

impl EvalRow {
    pub fn line(&self) -> String {
        format!("{}\t{}\t(n={})", self.mode_id, format_percent(self.accuracy), self.n_eval)
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<EvalRow>, CliError> {
    let Loaded { sets, labels, .. } = load(&args.inputs)?;
    let labels = require_labels(labels)?;
    let rows = sets
        .iter()
        .map(|s| {
            let w = compute_weight(s, &labels)?;
            Ok(EvalRow {
                mode_id: w.mode_id,
                accuracy: w.w,
                n_eval: w.n_eval,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    if let Some(out) = &args.out {
        write_file(&out.join("accuracy.csv"), &accuracy_table_csv(&accuracy_table(&sets, &labels))?)?;
    }
    Ok(rows)
}

pub fn cmd_report(args: &ReportArgs) -> Result<Vec<PathBuf>, CliError> {
    let Loaded { sets, labels, .. } = load(&args.inputs)?;
    if sets.len() < 2 {
        return Err(CliError::Usage("report needs at least two prediction files".into()));
    }
    write_reports(&args.out, &sets, labels.as_ref())
}
