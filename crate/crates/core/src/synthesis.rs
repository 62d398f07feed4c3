//! Retrieval-augmented annotation of pool questions: prompt assembly, model
//! output parsing, and resumable batch synthesis.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backends::{Backend, ChatMessage, GenParams};
use crate::corpus::{self, CorpusError, FieldError, QuestionInstance, ReasoningTrace, SeedExample};
use crate::filtering::RewardRecord;
use crate::jsonscan::{self, Located};
use crate::prompts::{self, PromptKind};
use crate::retrieval::{EmbeddingIndex, RetrievalHit};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demonstration {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub subtask: PromptKind,
    pub system_instruction: String,
    /// Rendered in retrieval rank order.
    pub demonstrations: Vec<Demonstration>,
    pub query: String,
}

impl PromptBundle {
    pub fn examples_block(&self) -> String {
        self.demonstrations
            .iter()
            .map(|d| prompts::render_demo(&d.input, &d.output))
            .collect::<Vec<_>>()
            .join("\n\n")
    }

    fn contract(&self) -> &'static str {
        match self.subtask {
            PromptKind::Qp => prompts::QP_CONTRACT,
            PromptKind::UCot => prompts::UCOT_CONTRACT,
            PromptKind::Cp => prompts::CP_CONTRACT,
            // Verifier stages build their own counted contracts in the cascade.
            PromptKind::CvEvidence | PromptKind::CvVerify => "",
        }
    }

    /// System message (instruction + examples) and user query.
    pub fn to_messages(&self) -> Vec<ChatMessage> {
        vec![
            prompts::system(prompts::render_system(self.subtask, &self.system_instruction, &self.examples_block())),
            prompts::user(prompts::render_sections(&[("Input", &self.query)], self.contract())),
        ]
    }

    /// Every text the model sees, concatenated.
    pub fn text(&self) -> String {
        self.to_messages().iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

pub fn qp_demo_output(example: &SeedExample) -> String {
    prompts::pretty(&Value::from(example.question_parsing.clone()))
}

pub fn ucot_demo_output(trace: &ReasoningTrace) -> String {
    prompts::pretty(&trace.to_cot_steps_json())
}

pub fn build_qp_prompt(x: &QuestionInstance, demos: &[&SeedExample], instruction: &str) -> PromptBundle {
    PromptBundle {
        subtask: PromptKind::Qp,
        system_instruction: instruction.to_string(),
        demonstrations: demos
            .iter()
            .map(|d| Demonstration { input: prompts::render_question(&d.instance), output: qp_demo_output(d) })
            .collect(),
        query: prompts::render_question(x),
    }
}

pub fn build_ucot_prompt(x: &QuestionInstance, demos: &[&SeedExample], instruction: &str) -> PromptBundle {
    PromptBundle {
        subtask: PromptKind::UCot,
        system_instruction: instruction.to_string(),
        demonstrations: demos
            .iter()
            .map(|d| Demonstration { input: prompts::render_question(&d.instance), output: ucot_demo_output(&d.trace) })
            .collect(),
        query: prompts::render_question(x),
    }
}

/// Where and why model output could not be parsed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseFailure {
    /// Byte offset into the raw text.
    pub offset: usize,
    pub message: String,
}

impl std::fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "at byte {}: {}", self.offset, self.message)
    }
}

/// Locate and parse the outermost JSON value of free-form model output.
pub fn extract_json(raw: &str) -> Result<(usize, Value), ParseFailure> {
    match jsonscan::locate_outermost(raw) {
        Located::NotFound => Err(ParseFailure { offset: raw.len(), message: "no JSON value found".into() }),
        Located::Truncated(at) => Err(ParseFailure {
            offset: raw.len(),
            message: format!("JSON value opened at byte {at} is never closed"),
        }),
        Located::Found(span) => {
            let text = &raw[span.clone()];
            serde_json::from_str(text).map(|v| (span.start, v)).map_err(|e| ParseFailure {
                offset: span.start + jsonscan::offset_of(text, e.line(), e.column()),
                message: e.to_string(),
            })
        }
    }
}

fn field_failure(offset: usize, e: FieldError) -> ParseFailure {
    ParseFailure { offset, message: e.to_string() }
}

fn lookup_key<'a>(obj: &'a Map<String, Value>, wanted: &[&str]) -> Option<&'a Value> {
    obj.iter()
        .find(|(k, _)| {
            let k: String = k.chars().filter(|c| *c != '_' && *c != ' ').flat_map(char::to_lowercase).collect();
            wanted.contains(&k.as_str())
        })
        .map(|(_, v)| v)
}

/// Parse unified-reasoning output: an object with a `cot_steps` array (or a
/// bare step array), each step carrying statement, evidence and a
/// verification label.
pub fn parse_ucot(raw: &str) -> Result<ReasoningTrace, ParseFailure> {
    let (offset, value) = extract_json(raw)?;
    let steps = match &value {
        Value::Array(items) => items,
        Value::Object(obj) => match lookup_key(obj, &["cotsteps", "cotparsing"]) {
            Some(Value::Array(items)) => items,
            Some(_) => return Err(ParseFailure { offset, message: "cot_steps: expected an array".into() }),
            None => return Err(ParseFailure { offset, message: "missing cot_steps array".into() }),
        },
        _ => return Err(ParseFailure { offset, message: "expected an object or array".into() }),
    };
    let steps = steps
        .iter()
        .enumerate()
        .map(|(i, v)| corpus::decode_step(v, &format!("cot_steps[{i}]")))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| field_failure(offset, e))?;
    Ok(ReasoningTrace { steps })
}

/// Parse question-parsing output: a JSON array of strings or an object with
/// a `question_parsing` array.
pub fn parse_qp(raw: &str) -> Result<Vec<String>, ParseFailure> {
    let (offset, value) = extract_json(raw)?;
    let list = match &value {
        Value::Array(_) => &value,
        Value::Object(obj) => lookup_key(obj, &["questionparsing"])
            .ok_or_else(|| ParseFailure { offset, message: "missing question_parsing array".into() })?,
        _ => return Err(ParseFailure { offset, message: "expected an array".into() }),
    };
    corpus::decode_string_list(list, "question_parsing").map_err(|e| field_failure(offset, e))
}

/// Parse a JSON array of strings (statements, evidence).
pub fn parse_string_array(raw: &str) -> Result<Vec<String>, ParseFailure> {
    let (offset, value) = extract_json(raw)?;
    corpus::decode_string_list(&value, "$").map_err(|e| field_failure(offset, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    QpMalformed,
    UcotMalformed,
    TooFewSteps,
    /// A backend call failed; raws hold whatever was produced.
    GenerationFailed,
}

/// Minimum number of reasoning steps in an accepted trace.
pub const MIN_STEPS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedRecord {
    pub instance: QuestionInstance,
    pub qp_raw: String,
    pub ucot_raw: String,
    pub qp: Option<Vec<String>>,
    pub trace: Option<ReasoningTrace>,
    pub parse_status: ParseStatus,
    pub error: Option<String>,
    /// Ids of the retrieved demonstrations, in rank order.
    pub demo_ids: Vec<String>,
    pub rewards: Option<RewardRecord>,
}

impl SynthesizedRecord {
    /// Build from raw outputs; parse status follows from the parses.
    pub fn from_raw(instance: QuestionInstance, qp_raw: String, ucot_raw: String, demo_ids: Vec<String>) -> Self {
        let qp = parse_qp(&qp_raw);
        let trace = parse_ucot(&ucot_raw);
        let (parse_status, error) = match (&qp, &trace) {
            (Err(e), _) => (ParseStatus::QpMalformed, Some(format!("question parsing {e}"))),
            (Ok(_), Err(e)) => (ParseStatus::UcotMalformed, Some(format!("reasoning {e}"))),
            (Ok(_), Ok(t)) if t.steps.len() < MIN_STEPS => (ParseStatus::TooFewSteps, None),
            (Ok(_), Ok(_)) => (ParseStatus::Ok, None),
        };
        SynthesizedRecord {
            instance,
            qp_raw,
            ucot_raw,
            qp: qp.ok(),
            trace: trace.ok(),
            parse_status,
            error,
            demo_ids,
            rewards: None,
        }
    }

    pub fn failed(instance: QuestionInstance, qp_raw: String, ucot_raw: String, demo_ids: Vec<String>, error: String) -> Self {
        SynthesizedRecord {
            instance,
            qp_raw,
            ucot_raw,
            qp: None,
            trace: None,
            parse_status: ParseStatus::GenerationFailed,
            error: Some(error),
            demo_ids,
            rewards: None,
        }
    }

    pub fn id(&self) -> &str {
        &self.instance.id
    }

    /// The annotated example, when parsing succeeded.
    pub fn to_example(&self) -> Option<SeedExample> {
        match (&self.qp, &self.trace) {
            (Some(qp), Some(trace)) if self.parse_status == ParseStatus::Ok => Some(SeedExample {
                instance: self.instance.clone(),
                question_parsing: qp.clone(),
                trace: trace.clone(),
            }),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Value {
        let mut v = self.instance.to_json();
        let map = v.as_object_mut().expect("instance is an object");
        map.insert("qp_raw".into(), Value::from(self.qp_raw.clone()));
        map.insert("ucot_raw".into(), Value::from(self.ucot_raw.clone()));
        map.insert(
            "question_parsing".into(),
            self.qp.as_ref().map(|q| Value::from(q.clone())).unwrap_or(Value::Null),
        );
        map.insert("cot_parsing".into(), self.trace.as_ref().map(ReasoningTrace::to_json).unwrap_or(Value::Null));
        map.insert("parse_status".into(), serde_json::to_value(self.parse_status).expect("status serializes"));
        if let Some(e) = &self.error {
            map.insert("error".into(), Value::from(e.clone()));
        }
        map.insert("demo_ids".into(), Value::from(self.demo_ids.clone()));
        if let Some(r) = &self.rewards {
            map.insert("rewards".into(), serde_json::to_value(r).expect("rewards serialize"));
        }
        v
    }
}

/// Decode a persisted record. Raw texts are re-parsed so the parsed fields
/// and status always agree with them; a stored generation failure is kept.
pub fn decode_record(value: &Value) -> Result<SynthesizedRecord, FieldError> {
    let instance = corpus::decode_instance(value)?;
    let obj = value.as_object().expect("decode_instance checked the object");
    let text = |k: &str| -> Result<String, FieldError> {
        match obj.get(k) {
            Some(Value::String(s)) => Ok(s.clone()),
            None | Some(Value::Null) => Ok(String::new()),
            Some(_) => Err(FieldError::new(k, "expected a string")),
        }
    };
    let qp_raw = text("qp_raw")?;
    let ucot_raw = text("ucot_raw")?;
    let demo_ids = match obj.get("demo_ids") {
        Some(v) => corpus::decode_string_list(v, "demo_ids")?,
        None => Vec::new(),
    };
    let status: Option<ParseStatus> = match obj.get("parse_status") {
        Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| FieldError::new("parse_status", e.to_string()))?),
        None => None,
    };
    let mut record = if status == Some(ParseStatus::GenerationFailed) {
        let error = text("error")?;
        SynthesizedRecord::failed(instance, qp_raw, ucot_raw, demo_ids, error)
    } else {
        SynthesizedRecord::from_raw(instance, qp_raw, ucot_raw, demo_ids)
    };
    if let Some(v) = obj.get("rewards") {
        record.rewards = Some(serde_json::from_value(v.clone()).map_err(|e| FieldError::new("rewards", e.to_string()))?);
    }
    Ok(record)
}

pub fn load_records(path: &Path) -> Result<Vec<SynthesizedRecord>, CorpusError> {
    corpus::load_with(path, decode_record)
}

pub fn write_records(path: &Path, records: &[SynthesizedRecord]) -> Result<(), CorpusError> {
    let rows: Vec<Value> = records.iter().map(SynthesizedRecord::to_json).collect();
    corpus::write_jsonl(path, None, &rows)
}

/// Demonstration pool: annotated examples plus their question index.
pub struct DemoPool {
    pub index: EmbeddingIndex,
    by_id: HashMap<String, SeedExample>,
}

impl DemoPool {
    pub fn new(index: EmbeddingIndex, examples: Vec<SeedExample>) -> Self {
        let by_id = examples.into_iter().map(|e| (e.instance.id.clone(), e)).collect();
        DemoPool { index, by_id }
    }

    pub fn get(&self, id: &str) -> Option<&SeedExample> {
        self.by_id.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Top-k demonstrations for a question, leaving the question itself out
    /// when `leave_one_out` is set and it is a pool member.
    pub fn retrieve(
        &self,
        embedder: &dyn Backend,
        x: &QuestionInstance,
        k: usize,
        leave_one_out: bool,
    ) -> Result<(Vec<RetrievalHit>, Vec<&SeedExample>), crate::retrieval::RetrievalError> {
        let mut exclude = HashSet::new();
        if leave_one_out && self.contains(&x.id) {
            exclude.insert(x.id.clone());
        }
        let hits = self.index.top_k(embedder, &x.question, k, &exclude)?;
        let demos = hits.iter().filter_map(|h| self.get(&h.id)).collect();
        Ok((hits, demos))
    }
}

/// Everything needed to annotate one question.
pub struct Synthesizer {
    pub generator: Arc<dyn Backend>,
    pub embedder: Arc<dyn Backend>,
    pub pool: Arc<DemoPool>,
    pub qp_instruction: String,
    pub ucot_instruction: String,
    pub k: usize,
    pub params: GenParams,
    pub leave_one_out: bool,
}

impl Synthesizer {
    /// Retrieve once, then generate question parsing and unified reasoning
    /// with the shared demonstrations. Backend errors become a
    /// `GenerationFailed` record.
    pub fn synthesize(&self, x: &QuestionInstance) -> SynthesizedRecord {
        let (hits, demos) = match self.pool.retrieve(self.embedder.as_ref(), x, self.k, self.leave_one_out) {
            Ok(r) => r,
            Err(e) => return SynthesizedRecord::failed(x.clone(), String::new(), String::new(), vec![], e.to_string()),
        };
        let demo_ids: Vec<String> = hits.iter().map(|h| h.id.clone()).collect();
        let qp_bundle = build_qp_prompt(x, &demos, &self.qp_instruction);
        let qp_raw = match self.generator.generate(&qp_bundle.to_messages(), &self.params) {
            Ok(t) => t,
            Err(e) => return SynthesizedRecord::failed(x.clone(), String::new(), String::new(), demo_ids, e.to_string()),
        };
        let ucot_bundle = build_ucot_prompt(x, &demos, &self.ucot_instruction);
        let ucot_raw = match self.generator.generate(&ucot_bundle.to_messages(), &self.params) {
            Ok(t) => t,
            Err(e) => return SynthesizedRecord::failed(x.clone(), qp_raw, String::new(), demo_ids, e.to_string()),
        };
        SynthesizedRecord::from_raw(x.clone(), qp_raw, ucot_raw, demo_ids)
    }

    /// Annotate concurrently; output sorted by instance id.
    pub fn synthesize_batch(&self, questions: &[QuestionInstance]) -> Vec<SynthesizedRecord> {
        let mut out: Vec<SynthesizedRecord> = questions.par_iter().map(|x| self.synthesize(x)).collect();
        out.sort_by(|a, b| a.instance.id.cmp(&b.instance.id));
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SynthesisSummary {
    pub resumed: usize,
    pub generated: usize,
    pub total: usize,
}

/// Resumable batch: questions already present in `out` are skipped; the
/// merged set is rewritten sorted by id.
pub fn run_synthesis(
    synthesizer: &Synthesizer,
    questions: &[QuestionInstance],
    out: &Path,
) -> Result<(Vec<SynthesizedRecord>, SynthesisSummary), CorpusError> {
    let mut existing: BTreeMap<String, SynthesizedRecord> = BTreeMap::new();
    if out.exists() {
        match load_records(out) {
            Ok(records) => existing.extend(records.into_iter().map(|r| (r.instance.id.clone(), r))),
            Err(CorpusError::EmptyFile { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let resumed = existing.len();
    let todo: Vec<QuestionInstance> = questions.iter().filter(|q| !existing.contains_key(&q.id)).cloned().collect();
    let fresh = synthesizer.synthesize_batch(&todo);
    let generated = fresh.len();
    existing.extend(fresh.into_iter().map(|r| (r.instance.id.clone(), r)));
    let records: Vec<SynthesizedRecord> = existing.into_values().collect();
    write_records(out, &records)?;
    let total = records.len();
    Ok((records, SynthesisSummary { resumed, generated, total }))
}
