//! Extraction of a [`StructuredAnswer`] from raw model text.
//!
//! Candidates are tried in priority order (fenced code blocks, then the first
//! and the last balanced `{...}` span). Each candidate is parsed as JSON,
//! retried once after removing trailing commas and typographic quotes, then
//! matched against the stage schema.
//!
//! Key aliases (matched case-insensitively):
//!
//! | field      | accepted keys                          |
//! |------------|----------------------------------------|
//! | caption    | caption, captions, clip_captions       |
//! | summary    | summary, summaries                     |
//! | reason     | reason, reasons, reasoning             |
//! | answer     | answer, answers                        |
//! | confidence | confidence, confidences                |

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::answer::{clamp_confidence, Caption, ClipRange, OptionIndex, StructuredAnswer};
use crate::mode::CotField;
use crate::prompt::{Numbering, OutputSchemaSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorKind {
    NoJson,
    MissingKey,
    AnswerOutOfRange,
    WrongKind,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("no JSON object found in reply")]
    NoJson,
    #[error("reply is missing key `{0}`")]
    MissingKey(&'static str),
    #[error("answer {0} is outside the option range")]
    AnswerOutOfRange(i64),
    #[error("key `{key}` should be {expected}")]
    WrongKind { key: &'static str, expected: &'static str },
}

impl ParseError {
    pub fn kind(&self) -> ParseErrorKind {
        match self {
            ParseError::NoJson => ParseErrorKind::NoJson,
            ParseError::MissingKey(_) => ParseErrorKind::MissingKey,
            ParseError::AnswerOutOfRange(_) => ParseErrorKind::AnswerOutOfRange,
            ParseError::WrongKind { .. } => ParseErrorKind::WrongKind,
        }
    }
}

/// Ordered, de-duplicated JSON object candidates found in `raw`.
pub fn repair_candidates(raw: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut push = |s: &str| {
        if !out.iter().any(|c| c == s) {
            out.push(s.to_string());
        }
    };
    for block in fenced_blocks(raw) {
        if let Some(&(start, end)) = balanced_spans(block).first() {
            push(&block[start..end]);
        }
    }
    let spans = balanced_spans(raw);
    if let Some(&(start, end)) = spans.first() {
        push(&raw[start..end]);
    }
    if let Some(&(start, end)) = spans.last() {
        push(&raw[start..end]);
    }
    out
}

/// Contents of ``` fenced blocks, without the opening info string.
fn fenced_blocks(raw: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut rest = raw;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let info = &after[..body_start];
        // A fence opened mid-line with content right after (```{"a":1}```) has no info string.
        let body_start = if info.trim_start().starts_with('{') { 0 } else { body_start };
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                blocks.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => break,
        }
    }
    blocks
}

/// Top-level balanced `{...}` spans as byte ranges. Braces inside JSON strings
/// are ignored; an unclosed brace is skipped and scanning resumes after it.
fn balanced_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut pos = 0;
    while let Some(offset) = text[pos..].find('{') {
        let start = pos + offset;
        match span_end(bytes, start) {
            Some(end) => {
                spans.push((start, end));
                pos = end;
            }
            None => pos = start + 1,
        }
    }
    spans
}

fn span_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Small textual fixes: typographic double quotes and trailing commas.
fn light_repair(candidate: &str) -> String {
    let normalized: String = candidate
        .chars()
        .map(|c| match c {
            '\u{201c}' | '\u{201d}' => '"',
            other => other,
        })
        .collect();
    let mut out = String::with_capacity(normalized.len());
    let mut in_string = false;
    let mut escaped = false;
    let chars: Vec<char> = normalized.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            out.push(c);
            continue;
        }
        if c == '"' {
            in_string = true;
        }
        if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn parse_object(candidate: &str) -> Option<Map<String, Value>> {
    let parsed = serde_json::from_str::<Value>(candidate)
        .ok()
        .or_else(|| serde_json::from_str::<Value>(&light_repair(candidate)).ok())?;
    match parsed {
        Value::Object(map) => Some(map),
        _ => None,
    }
}

fn aliases(field: CotField) -> &'static [&'static str] {
    match field {
        CotField::Caption => &["caption", "captions", "clip_captions"],
        CotField::Summary => &["summary", "summaries"],
        CotField::Reason => &["reason", "reasons", "reasoning"],
        CotField::Answer => &["answer", "answers"],
        CotField::Confidence => &["confidence", "confidences"],
    }
}

fn lookup(map: &Map<String, Value>, field: CotField) -> Option<&Value> {
    // Canonical key first, then aliases, each case-insensitively.
    aliases(field).iter().find_map(|alias| {
        map.iter()
            .find(|(key, _)| key.trim().eq_ignore_ascii_case(alias))
            .map(|(_, v)| v)
    })
}

/// Parses `raw` against `schema`. The answer is returned 0-based.
pub fn parse_structured(raw: &str, schema: &OutputSchemaSpec, numbering: Numbering) -> Result<StructuredAnswer, ParseError> {
    let mut first_error = None;
    for candidate in repair_candidates(raw) {
        let Some(map) = parse_object(&candidate) else {
            continue;
        };
        match extract(&map, schema, numbering) {
            Ok(answer) => return Ok(answer),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    Err(first_error.unwrap_or(ParseError::NoJson))
}

/// Parses the caption/summary fields owed by a first-stage reply. The answer
/// slot of the result is unused.
pub fn parse_stage1(raw: &str, schema: &OutputSchemaSpec) -> Result<(Option<Vec<Caption>>, Option<String>), ParseError> {
    let mut first_error = None;
    for candidate in repair_candidates(raw) {
        let Some(map) = parse_object(&candidate) else {
            continue;
        };
        let result = (|| {
            let captions = schema
                .contains(CotField::Caption)
                .then(|| required(&map, CotField::Caption).and_then(|v| captions(v, schema)))
                .transpose()?;
            let summary = schema
                .contains(CotField::Summary)
                .then(|| required(&map, CotField::Summary).and_then(|v| text(v, "summary")))
                .transpose()?;
            Ok((captions, summary))
        })();
        match result {
            Ok(fields) => return Ok(fields),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    Err(first_error.unwrap_or(ParseError::NoJson))
}

fn required(map: &Map<String, Value>, field: CotField) -> Result<&Value, ParseError> {
    lookup(map, field).ok_or(ParseError::MissingKey(field.key()))
}

fn extract(map: &Map<String, Value>, schema: &OutputSchemaSpec, numbering: Numbering) -> Result<StructuredAnswer, ParseError> {
    // Report a missing key before any value problem.
    for field in schema.fields() {
        required(map, field)?;
    }
    if !schema.contains(CotField::Answer) {
        return Err(ParseError::MissingKey(CotField::Answer.key()));
    }
    let mut out = StructuredAnswer::answer_only(answer(required(map, CotField::Answer)?, numbering)?);
    for field in schema.fields() {
        let value = required(map, field)?;
        match field {
            CotField::Caption => out.captions = Some(captions(value, schema)?),
            CotField::Summary => out.summary = Some(text(value, "summary")?),
            CotField::Reason => out.reason = Some(text(value, "reason")?),
            CotField::Answer => {}
            CotField::Confidence => out.confidence = Some(confidence(value)?),
        }
    }
    Ok(out)
}

fn text(value: &Value, key: &'static str) -> Result<String, ParseError> {
    value.as_str().map(str::to_string).ok_or(ParseError::WrongKind { key, expected: "a string" })
}

fn captions(value: &Value, schema: &OutputSchemaSpec) -> Result<Vec<Caption>, ParseError> {
    let wrong = ParseError::WrongKind {
        key: "caption",
        expected: "a list of strings",
    };
    let items = value.as_array().ok_or(wrong.clone())?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| match item {
            Value::String(s) => Ok(Caption {
                range: schema.clip_for(i),
                text: s.clone(),
            }),
            Value::Object(obj) => {
                let text = obj
                    .get("text")
                    .or_else(|| obj.get("caption"))
                    .and_then(Value::as_str)
                    .ok_or(wrong.clone())?;
                let bound = |k: &str| obj.get(k).and_then(Value::as_f64);
                let range = match (bound("start"), bound("end")) {
                    (Some(start), Some(end)) => ClipRange::new(start, end),
                    _ => schema.clip_for(i),
                };
                Ok(Caption {
                    range,
                    text: text.to_string(),
                })
            }
            _ => Err(wrong.clone()),
        })
        .collect()
}

fn answer(value: &Value, numbering: Numbering) -> Result<OptionIndex, ParseError> {
    let wrong = ParseError::WrongKind {
        key: "answer",
        expected: "an option number",
    };
    let raw = match value {
        Value::Number(n) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => i,
            (None, Some(f)) if f.fract() == 0.0 && f.abs() < 1e9 => f as i64,
            _ => return Err(wrong),
        },
        Value::String(s) => parse_option_string(s).ok_or(wrong)?,
        _ => return Err(wrong),
    };
    OptionIndex::new(raw - numbering.offset() as i64).ok_or(ParseError::AnswerOutOfRange(raw))
}

/// Accepts `"2"`, `"option 2"`, `"Option #2"`.
fn parse_option_string(s: &str) -> Option<i64> {
    let s = s.trim();
    let lower = s.to_ascii_lowercase();
    let rest = lower.strip_prefix("option").unwrap_or(&lower).trim_start();
    let rest = rest.strip_prefix('#').unwrap_or(rest).trim();
    rest.parse::<i64>().ok()
}

fn confidence(value: &Value) -> Result<f64, ParseError> {
    let wrong = ParseError::WrongKind {
        key: "confidence",
        expected: "a number between 0 and 1",
    };
    let raw = match value {
        Value::Number(n) => n.as_f64().ok_or(wrong.clone())?,
        Value::String(s) => {
            let s = s.trim();
            match s.strip_suffix('%') {
                Some(pct) => pct.trim().parse::<f64>().map_err(|_| wrong.clone())? / 100.0,
                None => s.parse::<f64>().map_err(|_| wrong.clone())?,
            }
        }
        _ => return Err(wrong),
    };
    if raw.is_nan() {
        return Err(wrong);
    }
    Ok(clamp_confidence(raw))
}

/// Serializes `answer` the way a compliant model would reply to `schema`.
/// Captions carry explicit `start`/`end` so the ranges survive a round trip.
pub fn serialize_answer(answer: &StructuredAnswer, schema: &OutputSchemaSpec, numbering: Numbering) -> String {
    let mut map = Map::new();
    for field in schema.fields() {
        let value = match field {
            CotField::Caption => Value::Array(
                answer
                    .captions
                    .iter()
                    .flatten()
                    .map(|c| serde_json::json!({"start": c.range.start, "end": c.range.end, "text": c.text}))
                    .collect(),
            ),
            CotField::Summary => Value::from(answer.summary.clone().unwrap_or_default()),
            CotField::Reason => Value::from(answer.reason.clone().unwrap_or_default()),
            CotField::Answer => Value::from(answer.answer.get() + numbering.offset()),
            CotField::Confidence => Value::from(answer.confidence.unwrap_or(0.0)),
        };
        map.insert(field.key().to_string(), value);
    }
    Value::Object(map).to_string()
}
