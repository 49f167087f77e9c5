//! `modevote run`: execute modes and write their outputs.
//!
//! Output tree under `--out`:
//!
//! ```text
//! predictions/<mode>.json   answers by q_uid
//! records/<mode>.jsonl      prompts, replies and parses per question
//! traces/<mode>.jsonl       timing, attempts and cache hits per call
//! manifest.json             fingerprints, question digest, timestamps
//! cache/                    reply cache, unless paths.cache says otherwise
//! checkpoints/<mode>.jsonl  progress of an unfinished run
//! ```
//!
//! Everything except `traces/` and `manifest.json` is reproducible byte for
//! byte under a deterministic backend.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Args;
use modevote_core::{ModeConfig, QuestionSet};
use modevote_runtime::config::Backends;
use modevote_runtime::pipeline::{question_set_digest, DEFAULT_MAX_REASKS, DEFAULT_WORKERS};
use modevote_runtime::{run_mode, Config, ModeRun, PipelineError, ResponseCache, RunContext, RunOptions};
use serde::Serialize;
use tracing::info;

use crate::error::CliError;
use crate::write_file;

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated mode ids; all modes when omitted.
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<String>,
    /// Question file, overriding `paths.questions`.
    #[arg(long)]
    pub questions: Option<PathBuf>,
    /// Output directory, overriding `paths.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Questions in flight per mode.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Seed for every mock backend.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Refuse to build backends that need the network.
    #[arg(long)]
    pub offline: bool,
    /// Do not read or write the reply cache.
    #[arg(long)]
    pub no_cache: bool,
}

impl RunArgs {
    pub fn new(config: impl Into<PathBuf>) -> Self {
        RunArgs {
            config: config.into(),
            modes: Vec::new(),
            questions: None,
            out: None,
            workers: None,
            seed: None,
            offline: false,
            no_cache: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeSummary {
    pub mode_id: String,
    pub fingerprint: String,
    pub answered: usize,
    pub abstained: usize,
    pub resumed: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub out: PathBuf,
    pub modes: Vec<ModeSummary>,
    /// Calls that reached a backend (cache misses).
    pub backend_calls: usize,
    pub cache_hits: usize,
    /// Invocations counted by the mock backends themselves.
    pub mock_invocations: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn check_file_name(mode: &ModeConfig) -> Result<(), CliError> {
    let ok = mode
        .mode_id
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok && !mode.mode_id.starts_with('.') {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "mode id `{}` must use only letters, digits, `-`, `_` and `.`",
            mode.mode_id
        )))
    }
}

fn write_mode(out: &Path, run: &ModeRun) -> Result<(), CliError> {
    let mode_id = &run.predictions.mode_id;
    write_file(&out.join("predictions").join(format!("{mode_id}.json")), &run.predictions.to_json())?;
    let mut records = String::new();
    let mut traces = String::new();
    for record in &run.records {
        records.push_str(&serde_json::to_string(record).expect("records serialize"));
        records.push('\n');
        for trace in record.traces() {
            traces.push_str(&trace.to_string());
            traces.push('\n');
        }
    }
    write_file(&out.join("records").join(format!("{mode_id}.jsonl")), &records)?;
    write_file(&out.join("traces").join(format!("{mode_id}.jsonl")), &traces)
}

/// Runs the selected modes concurrently, each bounded by its worker count.
pub async fn run_async(args: &RunArgs) -> Result<RunSummary, CliError> {
    let started_at = unix_now();
    let config = Config::load(&args.config)?;
    let modes = config.select_modes(&args.modes)?;
    if modes.is_empty() {
        return Err(CliError::Config("the config declares no modes".into()));
    }
    modes.iter().try_for_each(|m| check_file_name(m))?;
    let questions_path = args
        .questions
        .clone()
        .or_else(|| config.paths.questions.clone())
        .ok_or_else(|| CliError::Usage("no question file: pass --questions or set paths.questions".into()))?;
    let qs = QuestionSet::load(&questions_path)?;
    let out = args
        .out
        .clone()
        .or_else(|| config.paths.out.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set paths.out".into()))?;
    let workers = args.workers.or(config.run.workers).unwrap_or(DEFAULT_WORKERS);
    if workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }

    let templates = config.template_set()?;
    let Backends { registry, mocks } = config.build_backends(args.offline, args.seed)?;
    let cache = if args.no_cache {
        None
    } else {
        let dir = config.paths.cache.clone().unwrap_or_else(|| out.join("cache"));
        Some(ResponseCache::open(&dir).map_err(|e| CliError::io(&dir, e))?)
    };
    let ctx = RunContext {
        templates: &templates,
        registry: &registry,
        cache: cache.as_ref(),
    };
    info!(modes = modes.len(), questions = qs.len(), workers, "starting run");

    let runs = futures::future::join_all(modes.iter().map(|mode| {
        let opts = RunOptions {
            workers,
            max_reasks: config.run.max_reasks.unwrap_or(DEFAULT_MAX_REASKS),
            checkpoint: Some(out.join("checkpoints").join(format!("{}.jsonl", mode.mode_id))),
        };
        let ctx = ctx;
        let qs = &qs;
        async move { run_mode(mode, qs, ctx, &opts).await }
    }))
    .await;

    let mut summaries = Vec::new();
    let mut first_error: Option<PipelineError> = None;
    let (mut backend_calls, mut cache_hits) = (0, 0);
    for (mode, result) in modes.iter().zip(runs) {
        match result {
            Ok(run) => {
                write_mode(&out, &run)?;
                for call in run.records.iter().flat_map(|r| &r.calls) {
                    if call.trace.cache_hit {
                        cache_hits += 1;
                    } else if call.trace.attempts > 0 {
                        // Records restored from a checkpoint carry no trace.
                        backend_calls += 1;
                    }
                }
                info!(mode = %mode.mode_id, answered = run.predictions.len(), abstained = run.abstentions(), "mode finished");
                summaries.push(ModeSummary {
                    mode_id: mode.mode_id.clone(),
                    fingerprint: mode.fingerprint(),
                    answered: run.predictions.len(),
                    abstained: run.abstentions(),
                    resumed: run.resumed,
                });
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let summary = RunSummary {
        out: out.clone(),
        modes: summaries,
        backend_calls,
        cache_hits,
        mock_invocations: mocks.values().map(|m| m.calls()).sum(),
    };
    let manifest = serde_json::json!({
        "started_at": started_at,
        "finished_at": unix_now(),
        "questions": questions_path.display().to_string(),
        "question_set_digest": question_set_digest(&qs),
        "n_questions": qs.len(),
        "workers": workers,
        "backends": config.backends.iter().map(|b| {
            serde_json::json!({"id": b.backend_id, "fingerprint": registry.get(&b.backend_id).map(|x| x.fingerprint()).ok()})
        }).collect::<Vec<_>>(),
        "modes": summary.modes,
        "backend_calls": summary.backend_calls,
        "cache_hits": summary.cache_hits,
        "complete": first_error.is_none(),
    });
    write_file(&out.join("manifest.json"), &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"))?;
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(summary),
    }
}

pub fn cmd_run(args: &RunArgs) -> Result<RunSummary, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io(Path::new("<tokio runtime>"), e))?
        .block_on(run_async(args))
}
