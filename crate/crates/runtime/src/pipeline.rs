//! Runs one mode over a question set.
//!
//! Per question: an optional focus call whose notes go into the main
//! prompts, then either one call or two (stage 1 describes the video, stage
//! 2 answers with the stage-1 notes in its prompt). A reply that does not
//! parse is re-asked with a format reminder; when re-asks run out the
//! question is recorded as an abstention.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use futures::stream::{self, StreamExt};
use modevote_core::parser::parse_stage1;
use modevote_core::prompt::{render_focus_prompt, StageInputs, FORMAT_REMINDER};
use modevote_core::{
    build_output_schema, clip_plan, parse_structured, render_prompt, Caption, ModeConfig, ModeError, Numbering, Paradigm,
    ParseError, ParseErrorKind, PredictionSet, PromptError, Question, QuestionSet, Stage, StructuredAnswer, TemplateSet,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use crate::backend::{Backend, BackendError, BackendRegistry, ModelRequest};
use crate::cache::{cache_key, CacheEntry, ResponseCache};

/// Re-asks after a reply that does not parse.
pub const DEFAULT_MAX_REASKS: u32 = 3;
pub const DEFAULT_WORKERS: usize = 8;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Mode(#[from] ModeError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("mode `{mode}`: {source}")]
    Backend {
        mode: String,
        #[source]
        source: BackendError,
    },
    #[error("mode `{mode}`, question `{q_uid}`: {source}{}", checkpoint_hint(.checkpoint))]
    Aborted {
        mode: String,
        q_uid: String,
        checkpoint: Option<PathBuf>,
        #[source]
        source: BackendError,
    },
    #[error("cache or checkpoint I/O: {0}")]
    Io(#[from] io::Error),
}

fn checkpoint_hint(path: &Option<PathBuf>) -> String {
    path.as_ref()
        .map(|p| format!(" (progress kept in {}; rerun to resume)", p.display()))
        .unwrap_or_default()
}

impl PipelineError {
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            PipelineError::Backend { source, .. } | PipelineError::Aborted { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallStage {
    Focus,
    Single,
    Stage1,
    Stage2,
}

impl CallStage {
    pub fn as_str(self) -> &'static str {
        match self {
            CallStage::Focus => "focus",
            CallStage::Single => "single",
            CallStage::Stage1 => "stage1",
            CallStage::Stage2 => "stage2",
        }
    }
}

/// Run-dependent facts about a call, kept out of the reproducible records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CallTrace {
    pub cache_hit: bool,
    /// Backend attempts; 0 on a cache hit.
    pub attempts: u32,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub stage: CallStage,
    /// 0 for the first ask, `n` for the n-th re-ask.
    pub reask: u32,
    pub backend_id: String,
    pub prompt: String,
    pub reply: String,
    #[serde(skip)]
    pub trace: CallTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Answered { answer: StructuredAnswer },
    Abstained { stage: CallStage, error: ParseErrorKind, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode_id: String,
    pub q_uid: String,
    pub calls: Vec<CallRecord>,
    pub outcome: Outcome,
}

impl RunRecord {
    pub fn answer(&self) -> Option<&StructuredAnswer> {
        match &self.outcome {
            Outcome::Answered { answer } => Some(answer),
            Outcome::Abstained { .. } => None,
        }
    }

    /// Distinct stages called, re-asks not counted.
    pub fn stage_count(&self) -> usize {
        self.calls.iter().map(|c| c.stage).collect::<BTreeSet<_>>().len()
    }

    pub fn first_call(&self, stage: CallStage) -> Option<&CallRecord> {
        self.calls.iter().find(|c| c.stage == stage)
    }

    /// One trace line per call, for the non-reproducible side files.
    pub fn traces(&self) -> Vec<serde_json::Value> {
        self.calls
            .iter()
            .map(|c| {
                serde_json::json!({
                    "mode_id": self.mode_id,
                    "q_uid": self.q_uid,
                    "stage": c.stage,
                    "reask": c.reask,
                    "cache_hit": c.trace.cache_hit,
                    "attempts": c.trace.attempts,
                    "elapsed_ms": c.trace.elapsed_ms,
                })
            })
            .collect()
    }
}

/// Shared resources for running modes.
#[derive(Clone, Copy)]
pub struct RunContext<'a> {
    pub templates: &'a TemplateSet,
    pub registry: &'a BackendRegistry,
    pub cache: Option<&'a ResponseCache>,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Questions in flight at once for this mode.
    pub workers: usize,
    pub max_reasks: u32,
    /// Progress file; completed questions found there are not re-run.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workers: DEFAULT_WORKERS,
            max_reasks: DEFAULT_MAX_REASKS,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModeRun {
    pub predictions: PredictionSet,
    /// Sorted by q_uid.
    pub records: Vec<RunRecord>,
    /// Records taken from the checkpoint rather than run now.
    pub resumed: usize,
}

impl ModeRun {
    pub fn abstentions(&self) -> usize {
        self.records.iter().filter(|r| r.answer().is_none()).count()
    }
}

/// Digest of the validated question set, for manifests and checkpoints.
pub fn question_set_digest(qs: &QuestionSet) -> String {
    let text = serde_json::to_string(&qs.to_records()).expect("records serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Text handed from stage 1 to stage 2.
pub fn stage1_text(captions: Option<&[Caption]>, summary: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(captions) = captions {
        out.push_str("Captions:\n");
        for c in captions {
            let _ = writeln!(out, "[{}] {}", c.range, c.text);
        }
    }
    if let Some(summary) = summary {
        let _ = writeln!(out, "Summary: {summary}");
    }
    out
}

/// The prompt for the `n`-th re-ask.
pub fn reask_prompt(prompt: &str, n: u32) -> String {
    format!("{}\n\n{FORMAT_REMINDER} (Re-ask {n}.)\n", prompt.trim_end())
}

struct Runner<'a> {
    mode: &'a ModeConfig,
    ctx: RunContext<'a>,
    numbering: Numbering,
    max_reasks: u32,
    main: &'a Arc<dyn Backend>,
    focus: &'a Arc<dyn Backend>,
}

enum Step<T> {
    Parsed(T),
    Failed(ParseError),
}

impl Runner<'_> {
    fn backend_error(&self, q: &Question, source: BackendError) -> PipelineError {
        PipelineError::Aborted {
            mode: self.mode.mode_id.clone(),
            q_uid: q.q_uid.clone(),
            checkpoint: None,
            source,
        }
    }

    async fn call(
        &self,
        backend: &Arc<dyn Backend>,
        q: &Question,
        stage: CallStage,
        reask: u32,
        prompt: String,
    ) -> Result<CallRecord, PipelineError> {
        let request = ModelRequest {
            prompt,
            video_ref: Some(q.video_ref.clone()),
            clips: q
                .duration
                .and_then(|d| clip_plan(d, self.mode.clip_seconds).ok())
                .unwrap_or_default(),
            sampling: self.mode.sampling,
            q_uid: q.q_uid.clone(),
        };
        let started = Instant::now();
        let mut attempts = 0;
        let (reply, cache_hit) = match self.ctx.cache {
            None => {
                let reply = backend.invoke(&request).await.map_err(|e| self.backend_error(q, e))?;
                attempts = reply.attempts;
                (reply.text, false)
            }
            Some(cache) => {
                let entry = CacheEntry {
                    key: cache_key(self.mode, &q.q_uid, stage.as_str(), &request.prompt, &backend.fingerprint(), &self.mode.sampling),
                    mode_id: self.mode.mode_id.clone(),
                    q_uid: q.q_uid.clone(),
                    stage: stage.as_str().to_string(),
                    backend: backend.fingerprint(),
                    text: String::new(),
                };
                let (entry, hit) = cache
                    .get_or_fetch(entry, || async {
                        let reply = backend.invoke(&request).await.map_err(|e| self.backend_error(q, e))?;
                        attempts = reply.attempts;
                        Ok::<_, PipelineError>(reply.text)
                    })
                    .await?;
                (entry.text, hit)
            }
        };
        Ok(CallRecord {
            stage,
            reask,
            backend_id: backend.profile().backend_id.clone(),
            prompt: request.prompt,
            reply,
            trace: CallTrace {
                cache_hit,
                attempts,
                elapsed_ms: started.elapsed().as_millis() as u64,
            },
        })
    }

    /// Asks, re-asking on parse failure, and records every call.
    async fn ask<T>(
        &self,
        q: &Question,
        stage: CallStage,
        prompt: String,
        parse: impl Fn(&str) -> Result<T, ParseError>,
        calls: &mut Vec<CallRecord>,
    ) -> Result<Step<T>, PipelineError> {
        let mut last = ParseError::NoJson;
        for reask in 0..=self.max_reasks {
            let text = if reask == 0 { prompt.clone() } else { reask_prompt(&prompt, reask) };
            let record = self.call(self.main, q, stage, reask, text).await?;
            let parsed = parse(&record.reply);
            calls.push(record);
            match parsed {
                Ok(value) => return Ok(Step::Parsed(value)),
                Err(e) => last = e,
            }
        }
        warn!(mode = %self.mode.mode_id, q_uid = %q.q_uid, stage = stage.as_str(), error = %last, "abstaining");
        Ok(Step::Failed(last))
    }

    async fn answer(&self, q: &Question) -> Result<RunRecord, PipelineError> {
        let mode = self.mode;
        let mut calls = Vec::new();

        let focus_notes = match render_focus_prompt(mode.focus_variant, q) {
            Some(prompt) => {
                let record = self.call(self.focus, q, CallStage::Focus, 0, prompt).await?;
                let notes = record.reply.trim().to_string();
                calls.push(record);
                Some(notes)
            }
            None => None,
        };
        let abstain = |stage: CallStage, e: ParseError, calls: Vec<CallRecord>| RunRecord {
            mode_id: mode.mode_id.clone(),
            q_uid: q.q_uid.clone(),
            calls,
            outcome: Outcome::Abstained {
                stage,
                error: e.kind(),
                message: e.to_string(),
            },
        };
        let schema = |stage: Stage| build_output_schema(mode.cot_fields, stage).with_clips(mode.clip_seconds, q.duration);
        let render = |stage: Stage, stage1: Option<&str>| {
            render_prompt(
                self.ctx.templates,
                mode,
                q,
                stage,
                StageInputs {
                    stage1_output: stage1,
                    focus_notes: focus_notes.as_deref(),
                },
            )
        };

        let answer = match mode.paradigm {
            Paradigm::OneStage => {
                let schema = schema(Stage::Single);
                let prompt = render(Stage::Single, None)?;
                match self
                    .ask(q, CallStage::Single, prompt, |raw| parse_structured(raw, &schema, self.numbering), &mut calls)
                    .await?
                {
                    Step::Parsed(a) => a,
                    Step::Failed(e) => return Ok(abstain(CallStage::Single, e, calls)),
                }
            }
            Paradigm::TwoStage => {
                let first_schema = schema(Stage::Stage1);
                let prompt = render(Stage::Stage1, None)?;
                let (captions, summary) = match self
                    .ask(q, CallStage::Stage1, prompt, |raw| parse_stage1(raw, &first_schema), &mut calls)
                    .await?
                {
                    Step::Parsed(v) => v,
                    Step::Failed(e) => return Ok(abstain(CallStage::Stage1, e, calls)),
                };
                let notes = stage1_text(captions.as_deref(), summary.as_deref());
                let second_schema = schema(Stage::Stage2);
                let prompt = render(Stage::Stage2, Some(&notes))?;
                match self
                    .ask(q, CallStage::Stage2, prompt, |raw| parse_structured(raw, &second_schema, self.numbering), &mut calls)
                    .await?
                {
                    Step::Parsed(a) => StructuredAnswer {
                        captions,
                        summary,
                        ..a
                    },
                    Step::Failed(e) => return Ok(abstain(CallStage::Stage2, e, calls)),
                }
            }
        };
        Ok(RunRecord {
            mode_id: mode.mode_id.clone(),
            q_uid: q.q_uid.clone(),
            calls,
            outcome: Outcome::Answered { answer },
        })
    }
}

#[derive(Serialize, Deserialize, PartialEq)]
struct CheckpointHeader {
    mode_fingerprint: String,
    questions: String,
}

/// Completed records from a checkpoint written for the same mode and
/// questions. A torn final line is ignored.
fn read_checkpoint(path: &Path, header: &CheckpointHeader) -> io::Result<Vec<RunRecord>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut lines = BufReader::new(file).lines();
    let matches = match lines.next() {
        Some(line) => serde_json::from_str::<CheckpointHeader>(&line?).is_ok_and(|h| h == *header),
        None => false,
    };
    if !matches {
        return Ok(Vec::new());
    }
    let mut records = Vec::new();
    for line in lines {
        match serde_json::from_str(&line?) {
            Ok(record) => records.push(record),
            Err(_) => break,
        }
    }
    Ok(records)
}

fn start_checkpoint(path: &Path, header: &CheckpointHeader, done: &[RunRecord]) -> io::Result<File> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
    writeln!(file, "{}", serde_json::to_string(header).map_err(io::Error::other)?)?;
    for record in done {
        writeln!(file, "{}", serde_json::to_string(record).map_err(io::Error::other)?)?;
    }
    file.flush()?;
    Ok(file)
}

/// Runs `mode` over every question of `qs`. The result does not depend on
/// completion order or on `opts.workers`.
pub async fn run_mode(mode: &ModeConfig, qs: &QuestionSet, ctx: RunContext<'_>, opts: &RunOptions) -> Result<ModeRun, PipelineError> {
    mode.validate()?;
    let backend_err = |source| PipelineError::Backend {
        mode: mode.mode_id.clone(),
        source,
    };
    let runner = Runner {
        mode,
        ctx,
        numbering: ctx.templates.get(mode.prompt_style)?.numbering,
        max_reasks: opts.max_reasks,
        main: ctx.registry.get(&mode.backend_id).map_err(backend_err)?,
        focus: ctx.registry.get(mode.focus_backend()).map_err(backend_err)?,
    };

    let header = CheckpointHeader {
        mode_fingerprint: mode.fingerprint(),
        questions: question_set_digest(qs),
    };
    let mut done: BTreeMap<String, RunRecord> = BTreeMap::new();
    if let Some(path) = &opts.checkpoint {
        for record in read_checkpoint(path, &header)? {
            if qs.get(&record.q_uid).is_some() {
                done.insert(record.q_uid.clone(), record);
            }
        }
    }
    let resumed = done.len();
    let mut checkpoint = match &opts.checkpoint {
        Some(path) => Some(start_checkpoint(path, &header, &done.values().cloned().collect::<Vec<_>>())?),
        None => None,
    };
    if resumed > 0 {
        info!(mode = %mode.mode_id, resumed, "resuming from checkpoint");
    }

    let pending: Vec<&Question> = qs.iter().filter(|q| !done.contains_key(&q.q_uid)).collect();
    let mut results = stream::iter(pending)
        .map(|q| runner.answer(q))
        .buffer_unordered(opts.workers.max(1));
    while let Some(result) = results.next().await {
        let record = match result {
            Ok(record) => record,
            Err(PipelineError::Aborted {
                mode, q_uid, source, ..
            }) => {
                return Err(PipelineError::Aborted {
                    mode,
                    q_uid,
                    checkpoint: opts.checkpoint.clone(),
                    source,
                })
            }
            Err(e) => return Err(e),
        };
        if let Some(file) = checkpoint.as_mut() {
            writeln!(file, "{}", serde_json::to_string(&record).map_err(io::Error::other)?)?;
            file.flush()?;
        }
        done.insert(record.q_uid.clone(), record);
    }
    drop(results);
    drop(checkpoint);
    if let Some(path) = &opts.checkpoint {
        std::fs::remove_file(path)?;
    }

    let records: Vec<RunRecord> = done.into_values().collect();
    let predictions = PredictionSet::from_pairs(
        mode.mode_id.clone(),
        records.iter().filter_map(|r| Some((r.q_uid.clone(), r.answer()?.answer))),
    );
    Ok(ModeRun {
        predictions,
        records,
        resumed,
    })
}
