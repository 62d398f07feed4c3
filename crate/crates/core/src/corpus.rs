//! Data model, dataset file IO and dataset statistics.
//!
//! Datasets are line-delimited JSON (a single top-level array is also
//! accepted on ingest). Field names are matched case-insensitively with
//! spaces, underscores and dashes ignored, so `"Question Parsing"`,
//! `"question_parsing"` and `"questionParsing"` all name the same field.
//! Emission always uses the snake_case names below.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::jsonscan;
use crate::prompts;

pub const MAX_OPTIONS: usize = 26;
pub const SFT_HEADER: &str = "#sft-v1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: file contains no records")]
    EmptyFile { path: PathBuf },
    #[error("{path}:{line}: record {index}: {field}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        index: usize,
        field: String,
        message: String,
    },
    #[error("{path}:{line}: duplicate id {id:?}")]
    DuplicateId { path: PathBuf, line: usize, id: String },
    #[error("invalid verification value {token}")]
    Verification { token: String },
}

/// Validation failure at a field path such as `trace.steps[1].evidence`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl FieldError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionInstance {
    pub id: String,
    pub question: String,
    /// Choice texts; labels are implied by position ("A".."Z").
    pub options: Vec<String>,
    pub gold_answer: Option<String>,
    pub cot: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoTStep {
    pub statement: String,
    pub evidence: String,
    pub verification: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReasoningTrace {
    pub steps: Vec<CoTStep>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedExample {
    pub instance: QuestionInstance,
    pub question_parsing: Vec<String>,
    pub trace: ReasoningTrace,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DatasetStats {
    pub total_traces: usize,
    pub qp_count: usize,
    pub cp_count: usize,
    pub cv_count: usize,
}

/// Supervised fine-tuning subtask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SftSubtask {
    Qp,
    Cp,
    Cv,
}

impl fmt::Display for SftSubtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SftSubtask::Qp => "QP",
            SftSubtask::Cp => "CP",
            SftSubtask::Cv => "CV",
        })
    }
}

impl FromStr for SftSubtask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "QP" => Ok(SftSubtask::Qp),
            "CP" => Ok(SftSubtask::Cp),
            "CV" => Ok(SftSubtask::Cv),
            other => Err(format!("unknown subtask {other:?} (expected QP, CP or CV)")),
        }
    }
}

pub fn option_label(index: usize) -> char {
    debug_assert!(index < MAX_OPTIONS);
    (b'A' + index as u8) as char
}

/// Accepts JSON booleans and the strings True/true/TRUE, False/false/FALSE.
pub fn canonicalize_verification(raw: &Value) -> Result<bool, CorpusError> {
    match raw {
        Value::Bool(b) => Ok(*b),
        Value::String(s) => match s.as_str() {
            "True" | "true" | "TRUE" => Ok(true),
            "False" | "false" | "FALSE" => Ok(false),
            _ => Err(CorpusError::Verification { token: raw.to_string() }),
        },
        other => Err(CorpusError::Verification { token: other.to_string() }),
    }
}

pub fn verification_label(value: bool) -> &'static str {
    if value {
        "True"
    } else {
        "False"
    }
}

fn norm_key(key: &str) -> String {
    key.chars()
        .filter(|c| !matches!(c, ' ' | '_' | '-'))
        .flat_map(char::to_lowercase)
        .collect()
}

fn lookup<'a>(obj: &'a Map<String, Value>, names: &[&str]) -> Option<&'a Value> {
    obj.iter()
        .find(|(k, _)| {
            let k = norm_key(k);
            names.iter().any(|n| *n == k)
        })
        .map(|(_, v)| v)
}

fn require_text(obj: &Map<String, Value>, names: &[&str], path: &str) -> Result<String, FieldError> {
    match lookup(obj, names) {
        None => Err(FieldError::new(path, "missing field")),
        Some(Value::String(s)) if s.trim().is_empty() => Err(FieldError::new(path, "must not be empty")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(FieldError::new(path, format!("expected a string, found {}", kind_of(other)))),
    }
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>, FieldError> {
    v.as_object()
        .ok_or_else(|| FieldError::new(path, format!("expected an object, found {}", kind_of(v))))
}

/// Decode one step object. Used for seeds, synthesized traces and cascade
/// outputs alike.
pub fn decode_step(value: &Value, path: &str) -> Result<CoTStep, FieldError> {
    let obj = as_object(value, path)?;
    let statement = require_text(obj, &["statement"], &format!("{path}.statement"))?;
    let evidence = require_text(obj, &["evidence"], &format!("{path}.evidence"))?;
    let vpath = format!("{path}.verification");
    let raw = lookup(obj, &["verification"]).ok_or_else(|| FieldError::new(&vpath, "missing field"))?;
    let verification = canonicalize_verification(raw).map_err(|e| FieldError::new(&vpath, e.to_string()))?;
    Ok(CoTStep { statement, evidence, verification })
}

/// Decode a list of step objects with paths `{path}.steps[i]`.
pub fn decode_steps(value: &Value, path: &str) -> Result<ReasoningTrace, FieldError> {
    let items = value
        .as_array()
        .ok_or_else(|| FieldError::new(format!("{path}.steps"), format!("expected an array, found {}", kind_of(value))))?;
    let steps = items
        .iter()
        .enumerate()
        .map(|(i, v)| decode_step(v, &format!("{path}.steps[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ReasoningTrace { steps })
}

/// Decode a list of non-blank strings.
pub fn decode_string_list(value: &Value, path: &str) -> Result<Vec<String>, FieldError> {
    let items = value
        .as_array()
        .ok_or_else(|| FieldError::new(path, format!("expected an array, found {}", kind_of(value))))?;
    items
        .iter()
        .enumerate()
        .map(|(i, v)| match v {
            Value::String(s) if !s.trim().is_empty() => Ok(s.clone()),
            Value::String(_) => Err(FieldError::new(format!("{path}[{i}]"), "must not be empty")),
            other => Err(FieldError::new(format!("{path}[{i}]"), format!("expected a string, found {}", kind_of(other)))),
        })
        .collect()
}

fn decode_id(obj: &Map<String, Value>) -> Result<String, FieldError> {
    match lookup(obj, &["id"]) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(Value::String(_)) => Err(FieldError::new("id", "must not be empty")),
        Some(other) => Err(FieldError::new("id", format!("expected a string or number, found {}", kind_of(other)))),
        None => Err(FieldError::new("id", "missing field")),
    }
}

/// Decode the question-level fields shared by every record kind.
pub fn decode_instance(value: &Value) -> Result<QuestionInstance, FieldError> {
    let obj = as_object(value, "$")?;
    let id = decode_id(obj)?;
    let question = require_text(obj, &["question"], "question")?;
    let options = match lookup(obj, &["options", "choices"]) {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => decode_string_list(v, "options")?,
    };
    if options.len() > MAX_OPTIONS {
        return Err(FieldError::new("options", format!("at most {MAX_OPTIONS} options are supported")));
    }
    let gold_answer = match lookup(obj, &["answer", "goldanswer"]) {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(normalize_answer(s, options.len())?),
        Some(other) => return Err(FieldError::new("answer", format!("expected a string, found {}", kind_of(other)))),
    };
    let cot = match lookup(obj, &["cot"]) {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) if s.trim().is_empty() => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(other) => return Err(FieldError::new("cot", format!("expected a string, found {}", kind_of(other)))),
    };
    Ok(QuestionInstance { id, question, options, gold_answer, cot })
}

fn normalize_answer(raw: &str, n_options: usize) -> Result<String, FieldError> {
    let t = raw.trim();
    let mut chars = t.chars();
    let (Some(c), None) = (chars.next(), chars.next()) else {
        return Err(FieldError::new("answer", format!("expected a single option label, found {raw:?}")));
    };
    let c = c.to_ascii_uppercase();
    if !c.is_ascii_uppercase() {
        return Err(FieldError::new("answer", format!("expected a single option label, found {raw:?}")));
    }
    let index = (c as u8 - b'A') as usize;
    if n_options > 0 && index >= n_options {
        return Err(FieldError::new("answer", format!("label {c} is not one of the {n_options} options")));
    }
    Ok(c.to_string())
}

/// Decode a fully annotated example (seed or filtered dataset record).
pub fn decode_seed(value: &Value) -> Result<SeedExample, FieldError> {
    let instance = decode_instance(value)?;
    let obj = as_object(value, "$")?;
    let qp = lookup(obj, &["questionparsing"]).ok_or_else(|| FieldError::new("question_parsing", "missing field"))?;
    let question_parsing = decode_string_list(qp, "question_parsing")?;
    if question_parsing.is_empty() {
        return Err(FieldError::new("question_parsing", "must contain at least one condition"));
    }
    let steps = lookup(obj, &["cotparsing", "cotsteps", "steps"])
        .ok_or_else(|| FieldError::new("trace.steps", "missing field (cot_parsing)"))?;
    let trace = decode_steps(steps, "trace")?;
    if trace.steps.is_empty() {
        return Err(FieldError::new("trace.steps", "must contain at least one step"));
    }
    Ok(SeedExample { instance, question_parsing, trace })
}

impl QuestionInstance {
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        self.write_fields(&mut map);
        Value::Object(map)
    }

    fn write_fields(&self, map: &mut Map<String, Value>) {
        map.insert("id".into(), Value::from(self.id.clone()));
        map.insert("question".into(), Value::from(self.question.clone()));
        if !self.options.is_empty() {
            map.insert("options".into(), Value::from(self.options.clone()));
        }
        if let Some(a) = &self.gold_answer {
            map.insert("answer".into(), Value::from(a.clone()));
        }
        if let Some(c) = &self.cot {
            map.insert("cot".into(), Value::from(c.clone()));
        }
    }
}

impl CoTStep {
    pub fn to_json(&self) -> Value {
        serde_json::json!({
            "statement": self.statement,
            "evidence": self.evidence,
            "verification": verification_label(self.verification),
        })
    }
}

impl ReasoningTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn statements(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.statement.clone()).collect()
    }

    /// Step array in emission form.
    pub fn to_json(&self) -> Value {
        Value::Array(self.steps.iter().map(CoTStep::to_json).collect())
    }

    /// `{"cot_steps": [...]}`, the unified-reasoning output object.
    pub fn to_cot_steps_json(&self) -> Value {
        serde_json::json!({ "cot_steps": self.to_json() })
    }
}

impl SeedExample {
    pub fn id(&self) -> &str {
        &self.instance.id
    }

    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        self.instance.write_fields(&mut map);
        map.insert("question_parsing".into(), Value::from(self.question_parsing.clone()));
        map.insert("cot_parsing".into(), self.trace.to_json());
        Value::Object(map)
    }

    /// The free-text chain of thought, or the statements as a numbered list
    /// when the record carries none (synthesized records).
    pub fn cot_text(&self) -> String {
        match &self.instance.cot {
            Some(c) => c.clone(),
            None => prompts::numbered(&self.trace.statements()),
        }
    }
}

/// Parse records from text. `source` is used in error messages.
pub fn parse_records<T>(
    text: &str,
    source: &Path,
    decode: impl Fn(&Value) -> Result<T, FieldError>,
) -> Result<Vec<T>, CorpusError> {
    let record_err = |line: usize, index: usize, field: String, message: String| CorpusError::Record {
        path: source.to_path_buf(),
        line,
        index,
        field,
        message,
    };
    let body_present = text
        .lines()
        .any(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    if !body_present {
        return Err(CorpusError::EmptyFile { path: source.to_path_buf() });
    }

    let mut raw: Vec<(usize, Value)> = Vec::new();
    if text.trim_start().starts_with('[') {
        match jsonscan::array_element_spans(text) {
            Some(spans) => {
                for (index, span) in spans.into_iter().enumerate() {
                    let line = jsonscan::line_of(text, span.start);
                    let v: Value = serde_json::from_str(&text[span])
                        .map_err(|e| record_err(line + e.line() - 1, index, "$".into(), e.to_string()))?;
                    raw.push((line, v));
                }
            }
            None => {
                let e = serde_json::from_str::<Value>(text).expect_err("unterminated array must fail");
                return Err(record_err(e.line(), 0, "$".into(), e.to_string()));
            }
        }
    } else {
        for (n, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let v: Value = serde_json::from_str(t).map_err(|e| record_err(n + 1, raw.len(), "$".into(), e.to_string()))?;
            raw.push((n + 1, v));
        }
    }

    raw.iter()
        .enumerate()
        .map(|(index, (line, v))| decode(v).map_err(|e| record_err(*line, index, e.path, e.message)))
        .collect()
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

fn check_unique<'a>(path: &Path, text: &str, ids: impl Iterator<Item = &'a str>) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            let line = text
                .lines()
                .enumerate()
                .filter(|(_, l)| l.contains(&format!("\"{id}\"")) || l.contains(&format!(": {id}")))
                .map(|(n, _)| n + 1)
                .nth(1)
                .unwrap_or(0);
            return Err(CorpusError::DuplicateId { path: path.to_path_buf(), line, id: id.to_string() });
        }
    }
    Ok(())
}

pub fn parse_seed_str(text: &str, source: &Path) -> Result<Vec<SeedExample>, CorpusError> {
    let seeds = parse_records(text, source, decode_seed)?;
    check_unique(source, text, seeds.iter().map(|s| s.id()))?;
    Ok(seeds)
}

/// Load fully annotated examples. An empty top-level array yields an empty
/// list; a file without any record is an error.
pub fn load_seed(path: &Path) -> Result<Vec<SeedExample>, CorpusError> {
    parse_seed_str(&read(path)?, path)
}

/// Load unlabeled (or partially labeled) question instances.
pub fn load_questions(path: &Path) -> Result<Vec<QuestionInstance>, CorpusError> {
    let text = read(path)?;
    let items = parse_records(&text, path, decode_instance)?;
    check_unique(path, &text, items.iter().map(|q| q.id.as_str()))?;
    Ok(items)
}

/// Generic loader for any record type.
pub fn load_with<T>(path: &Path, decode: impl Fn(&Value) -> Result<T, FieldError>) -> Result<Vec<T>, CorpusError> {
    parse_records(&read(path)?, path, decode)
}

/// Write line-delimited JSON atomically (temp file + rename).
pub fn write_jsonl<'a>(path: &Path, header: Option<&str>, rows: impl IntoIterator<Item = &'a Value>) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    if let Some(h) = header {
        buf.extend_from_slice(h.as_bytes());
        buf.push(b'\n');
    }
    for row in rows {
        serde_json::to_writer(&mut buf, row).expect("Value serialization is infallible");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

pub fn write_seed(path: &Path, examples: &[SeedExample]) -> Result<(), CorpusError> {
    let rows: Vec<Value> = examples.iter().map(SeedExample::to_json).collect();
    write_jsonl(path, None, &rows)
}

pub fn compute_stats<'a>(traces: impl IntoIterator<Item = &'a ReasoningTrace>) -> DatasetStats {
    let (total, steps) = traces
        .into_iter()
        .fold((0usize, 0usize), |(n, s), t| (n + 1, s + t.steps.len()));
    DatasetStats { total_traces: total, qp_count: total, cp_count: total, cv_count: steps }
}

/// One instruction/input/target training row.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SftRow {
    pub instruction: String,
    pub input: String,
    pub target: String,
}

fn compact(v: &Value) -> String {
    serde_json::to_string(v).expect("Value serialization is infallible")
}

/// Training rows for a subtask, in input order. QP and CP give one row per
/// record; CV gives one row per step.
pub fn sft_rows(records: &[SeedExample], subtask: SftSubtask) -> Vec<SftRow> {
    let mut rows = Vec::new();
    for r in records {
        let question = prompts::render_question(&r.instance);
        match subtask {
            SftSubtask::Qp => rows.push(SftRow {
                instruction: prompts::QP_INSTRUCTION.to_string(),
                input: question,
                target: compact(&Value::from(r.question_parsing.clone())),
            }),
            SftSubtask::Cp => rows.push(SftRow {
                instruction: prompts::CP_INSTRUCTION.to_string(),
                input: format!("Question:\n{question}\n\nCoT:\n{}", r.cot_text()),
                target: compact(&Value::from(r.trace.statements())),
            }),
            SftSubtask::Cv => {
                let conditions = prompts::numbered(&r.question_parsing);
                for step in &r.trace.steps {
                    rows.push(SftRow {
                        instruction: prompts::CV_VERIFY_INSTRUCTION.to_string(),
                        input: format!(
                            "Question:\n{question}\n\nConditions:\n{conditions}\n\nStatement:\n{}\n\nEvidence:\n{}",
                            step.statement, step.evidence
                        ),
                        target: verification_label(step.verification).to_string(),
                    });
                }
            }
        }
    }
    rows
}

/// Write the SFT file for a subtask and return the number of rows written.
/// The first line is a `#sft-v1` header comment; every other line is a row.
pub fn export_sft(records: &[SeedExample], subtask: SftSubtask, path: &Path) -> Result<usize, CorpusError> {
    let rows: Vec<Value> = sft_rows(records, subtask)
        .iter()
        .map(|r| serde_json::to_value(r).expect("row serialization is infallible"))
        .collect();
    write_jsonl(path, Some(&format!("{SFT_HEADER} subtask={subtask}")), &rows)?;
    Ok(rows.len())
}

/// Read back an SFT file (header lines skipped).
pub fn read_sft(path: &Path) -> Result<Vec<SftRow>, CorpusError> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| CorpusError::Record {
            path: path.to_path_buf(),
            line: n + 1,
            index: out.len(),
            field: "$".into(),
            message: e.to_string(),
        })?;
        out.push(row);
    }
    Ok(out)
}
