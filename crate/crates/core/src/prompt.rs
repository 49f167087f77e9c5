//! Prompt rendering: style templates with named slots, the JSON output
//! instructions owed at each stage, and clip planning for captions.
//!
//! Template syntax: `{name}` marks a slot, `{{` and `}}` are literal braces.
//! Known slots are `question`, `options`, `clip_index`, `stage1_output` and
//! `focus_notes`; `question` and `options` are mandatory. Leading lines of the
//! form `#! numbering: one_based` set template options.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{ClipRange, NUM_OPTIONS};
use crate::mode::{CotField, CotFieldSet, ModeConfig, ModeError, Paradigm, PromptStyle};
use crate::question::Question;

/// Line that opens the generated output-format block. Backends that need to
/// know the requested keys (the mock) look for it.
pub const FORMAT_MARKER: &str = "Output format: reply with a single JSON object with exactly these keys:";

/// Appended to a prompt when a reply could not be parsed.
pub const FORMAT_REMINDER: &str =
    "Reminder: your previous reply could not be read. Reply with only the JSON object described above, nothing else.";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("unknown slot `{{{0}}}` in template")]
    UnknownSlot(String),
    #[error("unclosed `{{` at byte {0} in template")]
    UnclosedSlot(usize),
    #[error("stray `}}` at byte {0} in template")]
    StrayBrace(usize),
    #[error("template is missing the mandatory slot `{{{0}}}`")]
    MissingSlot(&'static str),
    #[error("bad template header `{0}`")]
    BadHeader(String),
    #[error("no template for prompt style {0}")]
    UnknownStyle(String),
    #[error("stage 2 needs the stage-1 output")]
    MissingStage1Output,
    #[error("stage {stage:?} does not apply to a {paradigm:?} mode")]
    StageMismatch { stage: Stage, paradigm: Paradigm },
    #[error("clip planning needs positive duration and clip length, got ({duration}, {clip_seconds})")]
    BadClipPlan { duration: f64, clip_seconds: f64 },
    #[error(transparent)]
    Mode(#[from] ModeError),
    #[error("reading template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Numbering {
    #[default]
    ZeroBased,
    OneBased,
}

impl Numbering {
    pub fn offset(self) -> usize {
        match self {
            Numbering::ZeroBased => 0,
            Numbering::OneBased => 1,
        }
    }

    pub fn first(self) -> usize {
        self.offset()
    }

    pub fn last(self) -> usize {
        self.offset() + NUM_OPTIONS - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Single,
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Question,
    Options,
    ClipIndex,
    Stage1Output,
    FocusNotes,
}

impl Slot {
    fn parse(name: &str) -> Option<Slot> {
        Some(match name {
            "question" => Slot::Question,
            "options" => Slot::Options,
            "clip_index" => Slot::ClipIndex,
            "stage1_output" => Slot::Stage1Output,
            "focus_notes" => Slot::FocusNotes,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Text(String),
    Slot(Slot),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub style: PromptStyle,
    pub numbering: Numbering,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    /// Parses a template asset: optional `#!` header lines, then the body.
    pub fn parse(style: PromptStyle, source: &str) -> Result<Self, PromptError> {
        let mut numbering = Numbering::ZeroBased;
        let mut body_start = 0;
        for line in source.split_inclusive('\n') {
            let Some(header) = line.strip_prefix("#!") else {
                break;
            };
            body_start += line.len();
            let (key, value) = header
                .split_once(':')
                .ok_or_else(|| PromptError::BadHeader(line.trim().to_string()))?;
            match (key.trim(), value.trim()) {
                ("numbering", "zero_based") => numbering = Numbering::ZeroBased,
                ("numbering", "one_based") => numbering = Numbering::OneBased,
                _ => return Err(PromptError::BadHeader(line.trim().to_string())),
            }
        }
        let segments = parse_segments(&source[body_start..])?;
        for (slot, name) in [(Slot::Question, "question"), (Slot::Options, "options")] {
            if !segments.contains(&Segment::Slot(slot)) {
                return Err(PromptError::MissingSlot(name));
            }
        }
        Ok(PromptTemplate {
            style,
            numbering,
            segments,
        })
    }

    fn uses(&self, slot: Slot) -> bool {
        self.segments.contains(&Segment::Slot(slot))
    }
}

fn parse_segments(body: &str) -> Result<Vec<Segment>, PromptError> {
    let mut segments = Vec::new();
    let mut text = String::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < body.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                text.push('{');
                i += 2;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                text.push('}');
                i += 2;
            }
            b'{' => {
                let close = body[i..].find('}').ok_or(PromptError::UnclosedSlot(i))?;
                let name = &body[i + 1..i + close];
                let slot = Slot::parse(name.trim()).ok_or_else(|| PromptError::UnknownSlot(name.to_string()))?;
                if !text.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut text)));
                }
                segments.push(Segment::Slot(slot));
                i += close + 1;
            }
            b'}' => return Err(PromptError::StrayBrace(i)),
            _ => {
                let ch = body[i..].chars().next().expect("in bounds");
                text.push(ch);
                i += ch.len_utf8();
            }
        }
    }
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    Ok(segments)
}

/// Templates keyed by prompt style.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TemplateSet {
    templates: BTreeMap<PromptStyle, PromptTemplate>,
}

const BUILTIN: [(PromptStyle, &str); 3] = [
    (PromptStyle::P1, include_str!("../assets/templates/p1.txt")),
    (PromptStyle::P2, include_str!("../assets/templates/p2.txt")),
    (PromptStyle::P3, include_str!("../assets/templates/p3.txt")),
];

impl TemplateSet {
    pub fn empty() -> Self {
        TemplateSet::default()
    }

    /// The three shipped styles.
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(style, src)| (*style, PromptTemplate::parse(*style, src).expect("shipped templates parse")))
            .collect();
        TemplateSet { templates }
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.style, template);
    }

    pub fn load_file(&mut self, style: PromptStyle, path: &Path) -> Result<(), PromptError> {
        let source = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        self.insert(PromptTemplate::parse(style, &source)?);
        Ok(())
    }

    pub fn get(&self, style: PromptStyle) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(&style)
            .ok_or_else(|| PromptError::UnknownStyle(style.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    StringList,
    String,
    Integer,
    Number,
}

impl ValueKind {
    fn of(field: CotField) -> ValueKind {
        match field {
            CotField::Caption => ValueKind::StringList,
            CotField::Summary | CotField::Reason => ValueKind::String,
            CotField::Answer => ValueKind::Integer,
            CotField::Confidence => ValueKind::Number,
        }
    }
}

/// The JSON object a model owes at one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSchemaSpec {
    pub keys: Vec<(CotField, ValueKind)>,
    pub clip_seconds: f64,
    /// Clip ranges the captions should cover, when the video length is known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clips: Option<Vec<ClipRange>>,
}

impl OutputSchemaSpec {
    pub fn fields(&self) -> impl Iterator<Item = CotField> + '_ {
        self.keys.iter().map(|(f, _)| *f)
    }

    pub fn contains(&self, field: CotField) -> bool {
        self.keys.iter().any(|(f, _)| *f == field)
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Declares the caption clip layout for a video of `duration` seconds.
    pub fn with_clips(mut self, clip_seconds: f64, duration: Option<f64>) -> Self {
        self.clip_seconds = clip_seconds;
        self.clips = duration.and_then(|d| clip_plan(d, clip_seconds).ok());
        self
    }

    /// Clip range for the `index`-th caption of a plain string list.
    pub fn clip_for(&self, index: usize) -> ClipRange {
        if let Some(range) = self.clips.as_ref().and_then(|c| c.get(index)) {
            return *range;
        }
        let start = index as f64 * self.clip_seconds;
        ClipRange::new(start, start + self.clip_seconds)
    }
}

/// Keys owed at `stage`: everything for a single call, caption/summary for
/// stage 1, reason/answer/confidence for stage 2.
pub fn build_output_schema(fields: CotFieldSet, stage: Stage) -> OutputSchemaSpec {
    let keys = fields
        .fields()
        .filter(|f| match stage {
            Stage::Single => true,
            Stage::Stage1 => f.is_first_stage(),
            Stage::Stage2 => !f.is_first_stage(),
        })
        .map(|f| (f, ValueKind::of(f)))
        .collect();
    OutputSchemaSpec {
        keys,
        clip_seconds: 4.0,
        clips: None,
    }
}

/// Splits `[0, duration]` into consecutive clips of `clip_seconds`; the last
/// clip may be shorter.
pub fn clip_plan(duration: f64, clip_seconds: f64) -> Result<Vec<ClipRange>, PromptError> {
    let valid = |x: f64| x > 0.0 && x.is_finite();
    if !valid(duration) || !valid(clip_seconds) {
        return Err(PromptError::BadClipPlan {
            duration,
            clip_seconds,
        });
    }
    let mut clips = Vec::new();
    for i in 0usize.. {
        let start = i as f64 * clip_seconds;
        // Ignore float slivers left by accumulated rounding.
        if duration - start <= duration * 1e-12 {
            break;
        }
        clips.push(ClipRange::new(start, (start + clip_seconds).min(duration)));
    }
    Ok(clips)
}

/// Text injected for the optional slots.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageInputs<'a> {
    pub stage1_output: Option<&'a str>,
    pub focus_notes: Option<&'a str>,
}

/// Renders the prompt for one stage of `mode` on question `q`.
pub fn render_prompt(
    templates: &TemplateSet,
    mode: &ModeConfig,
    q: &Question,
    stage: Stage,
    inputs: StageInputs<'_>,
) -> Result<String, PromptError> {
    mode.validate()?;
    match (mode.paradigm, stage) {
        (Paradigm::OneStage, Stage::Single) | (Paradigm::TwoStage, Stage::Stage1 | Stage::Stage2) => {}
        (paradigm, stage) => return Err(PromptError::StageMismatch { stage, paradigm }),
    }
    if stage == Stage::Stage2 && inputs.stage1_output.is_none() {
        return Err(PromptError::MissingStage1Output);
    }
    let template = templates.get(mode.prompt_style)?;
    let schema = build_output_schema(mode.cot_fields, stage).with_clips(mode.clip_seconds, q.duration);

    let stage1_text = if stage == Stage::Stage2 { inputs.stage1_output } else { None };
    let mut out = String::new();
    if let Some(notes) = inputs.focus_notes.filter(|_| !template.uses(Slot::FocusNotes)) {
        let _ = write!(out, "Focus notes (points worth attention in this video):\n{}\n\n", notes.trim_end());
    }
    for segment in &template.segments {
        match segment {
            Segment::Text(text) => out.push_str(text),
            Segment::Slot(Slot::Question) => out.push_str(&q.question_text),
            Segment::Slot(Slot::Options) => out.push_str(&render_options(q, template.numbering)),
            Segment::Slot(Slot::ClipIndex) => out.push_str(&render_clip_index(&schema)),
            Segment::Slot(Slot::Stage1Output) => out.push_str(stage1_text.unwrap_or("")),
            Segment::Slot(Slot::FocusNotes) => out.push_str(inputs.focus_notes.unwrap_or("")),
        }
    }
    if !out.ends_with('\n') {
        out.push('\n');
    }
    match stage {
        Stage::Single => {}
        Stage::Stage1 => out.push_str(
            "\nThis is the first of two steps: describe the video only and do not choose an option yet.\n",
        ),
        Stage::Stage2 => {
            out.push_str("\nThis is the second of two steps: choose the answer using the video notes from the first step.\n");
            if let Some(text) = stage1_text.filter(|_| !template.uses(Slot::Stage1Output)) {
                let _ = write!(out, "Video notes from the first step:\n{}\n", text.trim_end());
            }
        }
    }
    out.push('\n');
    out.push_str(&render_format_block(&schema, template.numbering));
    Ok(out)
}

/// Prompt for the preliminary focus call. `QaFocal` sees the question and
/// options; `QaFocus` sees only the video.
pub fn render_focus_prompt(variant: crate::mode::FocusVariant, q: &Question) -> Option<String> {
    use crate::mode::FocusVariant;
    match variant {
        FocusVariant::None => None,
        FocusVariant::QaFocal => {
            let mut out = String::from(
                "You will later answer the multiple-choice question below about a first-person video. \
                 Before answering, list the specific objects, actions and moments in the video that must be \
                 checked to tell the options apart. Reply with short plain-text notes, one per line.\n\n",
            );
            let _ = write!(out, "Question: {}\nOptions:\n{}\n", q.question_text, render_options(q, Numbering::ZeroBased));
            Some(out)
        }
        FocusVariant::QaFocus => Some(
            "Watch the first-person video and list the parts you consider most important: the main \
             activities of the camera wearer, key objects and how the activity changes over time. \
             Reply with short plain-text notes, one per line.\n"
                .to_string(),
        ),
    }
}

fn render_options(q: &Question, numbering: Numbering) -> String {
    let mut out = String::new();
    for (i, option) in q.options.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = write!(out, "{}. {}", i + numbering.offset(), option);
    }
    out
}

fn render_clip_index(schema: &OutputSchemaSpec) -> String {
    match &schema.clips {
        Some(clips) => {
            let ranges: Vec<String> = clips.iter().map(ToString::to_string).collect();
            format!("{} clips: {}", clips.len(), ranges.join(", "))
        }
        None => format!("consecutive {}-second clips", schema.clip_seconds),
    }
}

fn describe(field: CotField, schema: &OutputSchemaSpec, numbering: Numbering) -> String {
    match field {
        CotField::Caption => match &schema.clips {
            Some(clips) => format!(
                "list of strings with exactly {} entries, one caption per {}-second clip in order",
                clips.len(),
                schema.clip_seconds
            ),
            None => format!("list of strings, one caption per {}-second clip in order", schema.clip_seconds),
        },
        CotField::Summary => "string, a summary of the entire video".to_string(),
        CotField::Reason => "string, the reason behind your decision".to_string(),
        CotField::Answer => format!(
            "integer, the number of the selected option, from {} to {}",
            numbering.first(),
            numbering.last()
        ),
        CotField::Confidence => "number between 0 and 1, your confidence in the answer".to_string(),
    }
}

fn example_value(field: CotField, numbering: Numbering) -> &'static str {
    match (field, numbering) {
        (CotField::Caption, _) => r#"["C picks up a knife.", "C cuts an onion.", "..."]"#,
        (CotField::Summary, _) => r#""C prepares vegetables in a kitchen.""#,
        (CotField::Reason, _) => r#""C spends most of the video chopping vegetables.""#,
        (CotField::Answer, Numbering::ZeroBased) => "1",
        (CotField::Answer, Numbering::OneBased) => "2",
        (CotField::Confidence, _) => "0.8",
    }
}

fn render_format_block(schema: &OutputSchemaSpec, numbering: Numbering) -> String {
    let keys: Vec<String> = schema.fields().map(|f| format!("\"{}\"", f.key())).collect();
    let mut out = format!("{FORMAT_MARKER} {}.\n", keys.join(", "));
    for field in schema.fields() {
        let _ = writeln!(out, "- \"{}\": {}.", field.key(), describe(field, schema, numbering));
    }
    let example: Vec<String> = schema
        .fields()
        .map(|f| format!("\"{}\": {}", f.key(), example_value(f, numbering)))
        .collect();
    let _ = write!(out, "Example:\n{{{}}}\n", example.join(", "));
    out
}
