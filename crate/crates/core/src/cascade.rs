//! Inference cascade: Parser (question parsing), Decomposer (CoT parsing)
//! and Verifier (evidence, then verdicts). Demonstrations are retrieved once
//! per instance and the same rendered block is shared by every stage.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::backends::{Backend, ChatMessage, GenParams, Role};
use crate::corpus::{self, CoTStep, CorpusError, QuestionInstance, SeedExample};
use crate::prompts::{self, PromptKind};
use crate::synthesis::{self, DemoPool, ParseFailure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Agent {
    Parser,
    Decomposer,
    Verifier,
}

/// A backend plus the instruction text an agent runs with.
#[derive(Clone)]
pub struct AgentBinding {
    pub agent: Agent,
    pub backend: Arc<dyn Backend>,
    pub template: PromptKind,
    pub instruction: String,
}

impl AgentBinding {
    /// Binding with the default instruction for `template`.
    pub fn new(agent: Agent, backend: Arc<dyn Backend>, template: PromptKind) -> Self {
        AgentBinding { agent, backend, template, instruction: template.default_instruction().to_string() }
    }
}

/// All agent bindings. The Verifier may use one backend for both of its
/// stages or a separate one for each.
#[derive(Clone)]
pub struct Agents {
    pub parser: AgentBinding,
    pub decomposer: AgentBinding,
    pub evidence: AgentBinding,
    pub verify: AgentBinding,
}

impl Agents {
    pub fn new(parser: Arc<dyn Backend>, decomposer: Arc<dyn Backend>, verifier: Arc<dyn Backend>) -> Self {
        Self::with_split_verifier(parser, decomposer, verifier.clone(), verifier)
    }

    pub fn with_split_verifier(
        parser: Arc<dyn Backend>,
        decomposer: Arc<dyn Backend>,
        evidence: Arc<dyn Backend>,
        verify: Arc<dyn Backend>,
    ) -> Self {
        Agents {
            parser: AgentBinding::new(Agent::Parser, parser, PromptKind::Qp),
            decomposer: AgentBinding::new(Agent::Decomposer, decomposer, PromptKind::Cp),
            evidence: AgentBinding::new(Agent::Verifier, evidence, PromptKind::CvEvidence),
            verify: AgentBinding::new(Agent::Verifier, verify, PromptKind::CvVerify),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Parse,
    Decompose,
    Evidence,
    Verify,
}

/// What happened inside one stage. `seq_start`/`seq_end` come from a
/// counter shared by the whole cascade, so they order stages globally.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTrace {
    pub stage: Stage,
    pub raw: Vec<String>,
    pub seq_start: u64,
    pub seq_end: u64,
    pub elapsed_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CascadeOutput {
    pub id: String,
    pub qp: Vec<String>,
    pub statements: Vec<String>,
    pub evidence: Vec<String>,
    pub verdicts: Vec<bool>,
    /// Stage failures and defaulted slots, e.g. `evidence_missing:3`.
    pub flags: Vec<String>,
    pub demo_ids: Vec<String>,
    pub stages: Vec<StageTrace>,
}

impl CascadeOutput {
    pub fn is_aligned(&self) -> bool {
        self.statements.len() == self.evidence.len() && self.evidence.len() == self.verdicts.len()
    }

    pub fn steps(&self) -> Vec<CoTStep> {
        self.statements
            .iter()
            .zip(&self.evidence)
            .zip(&self.verdicts)
            .map(|((s, e), v)| CoTStep { statement: s.clone(), evidence: e.clone(), verification: *v })
            .collect()
    }

    /// Submission record: question parsing plus step objects. Timings are
    /// left out so predictions are reproducible byte for byte.
    pub fn to_prediction_json(&self) -> Value {
        let mut v = json!({
            "id": self.id,
            "question_parsing": self.qp,
            "cot_parsing": self.steps().iter().map(CoTStep::to_json).collect::<Vec<_>>(),
        });
        if !self.flags.is_empty() {
            v["flags"] = json!(self.flags);
        }
        v
    }
}

/// Outcome of one stage call: parsed value (possibly defaulted) plus raw
/// replies and flags.
#[derive(Debug, Clone, PartialEq)]
pub struct StageResult<T> {
    pub value: T,
    pub raw: Vec<String>,
    pub flags: Vec<String>,
}

/// Shared demonstration block for an instance.
pub fn demo_block(demos: &[&SeedExample]) -> String {
    demos.iter().map(|d| prompts::render_full_exemplar(d)).collect::<Vec<_>>().join("\n\n")
}

fn messages(binding: &AgentBinding, demos: &str, user: String) -> Vec<ChatMessage> {
    vec![
        prompts::system(prompts::render_system(binding.template, &binding.instruction, demos)),
        prompts::user(user),
    ]
}

pub fn parse_question_messages(binding: &AgentBinding, x: &QuestionInstance, demos: &str) -> Vec<ChatMessage> {
    let q = prompts::render_question(x);
    messages(binding, demos, prompts::render_sections(&[("Input", &q)], prompts::QP_CONTRACT))
}

pub fn decompose_messages(binding: &AgentBinding, x: &QuestionInstance, cot: &str, demos: &str) -> Vec<ChatMessage> {
    let q = prompts::render_question(x);
    messages(binding, demos, prompts::render_sections(&[("Question", &q), ("CoT", cot)], prompts::CP_CONTRACT))
}

pub fn evidence_messages(
    binding: &AgentBinding,
    x: &QuestionInstance,
    qp: &[String],
    statements: &[String],
    demos: &str,
) -> Vec<ChatMessage> {
    let q = prompts::render_question(x);
    let (c, s) = (prompts::numbered(qp), prompts::numbered(statements));
    let contract = prompts::evidence_contract(statements.len());
    messages(binding, demos, prompts::render_sections(&[("Question", &q), ("Conditions", &c), ("Statements", &s)], &contract))
}

pub fn verify_messages(
    binding: &AgentBinding,
    x: &QuestionInstance,
    qp: &[String],
    statements: &[String],
    evidence: &[String],
    demos: &str,
) -> Vec<ChatMessage> {
    let q = prompts::render_question(x);
    let c = prompts::numbered(qp);
    let steps = statements
        .iter()
        .zip(evidence)
        .enumerate()
        .map(|(i, (s, e))| format!("{}. Statement: {s}\n   Evidence: {e}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    let contract = prompts::verify_contract(statements.len());
    messages(binding, demos, prompts::render_sections(&[("Question", &q), ("Conditions", &c), ("Steps", &steps)], &contract))
}

fn contract_of(msgs: &[ChatMessage]) -> &str {
    let user = &msgs.last().expect("non-empty").content;
    user.rsplit("\n\n").next().unwrap_or(user)
}

/// Append the failed reply and a correction request restating the contract.
fn reprompt(msgs: &[ChatMessage], reply: &str, problem: &str) -> Vec<ChatMessage> {
    let mut out = msgs.to_vec();
    out.push(ChatMessage::new(Role::Assistant, reply));
    out.push(prompts::user(format!("Your previous answer could not be used: {problem}.\n\n{}", contract_of(msgs))));
    out
}

/// Generate and parse; on failure (or an unusable value) re-prompt once.
/// Returns the final reply list and the last parse result.
fn with_reprompt<T>(
    backend: &dyn Backend,
    msgs: Vec<ChatMessage>,
    params: &GenParams,
    parse: impl Fn(&str) -> Result<T, String>,
) -> (Vec<String>, Result<T, String>) {
    let mut raw = Vec::new();
    let mut msgs = msgs;
    let mut last = Err(String::new());
    for attempt in 0..2 {
        match backend.generate(&msgs, params) {
            Ok(reply) => {
                last = parse(&reply);
                let problem = match &last {
                    Ok(_) => None,
                    Err(p) => Some(p.clone()),
                };
                raw.push(reply);
                match problem {
                    None => break,
                    Some(p) if attempt == 0 => msgs = reprompt(&msgs, raw.last().expect("pushed"), &p),
                    Some(_) => {}
                }
            }
            Err(e) => {
                last = Err(format!("backend error: {e}"));
                break;
            }
        }
    }
    (raw, last)
}

fn failure(e: ParseFailure) -> String {
    e.to_string()
}

/// Parser stage. An unusable reply after one re-prompt yields an empty,
/// flagged list.
pub fn parse_question(binding: &AgentBinding, x: &QuestionInstance, demos: &str, params: &GenParams) -> StageResult<Vec<String>> {
    let msgs = parse_question_messages(binding, x, demos);
    let (raw, res) = with_reprompt(binding.backend.as_ref(), msgs, params, |r| {
        let qp = synthesis::parse_qp(r).map_err(failure)?;
        if qp.is_empty() {
            return Err("the condition list is empty".into());
        }
        Ok(qp)
    });
    match res {
        Ok(value) => StageResult { value, raw, flags: vec![] },
        Err(e) => {
            log::warn!("{}: question parsing failed: {e}", x.id);
            StageResult { value: vec![], raw, flags: vec!["qp_failed".into()] }
        }
    }
}

/// Decomposer stage. A missing chain of thought is a precondition failure
/// and makes no backend call.
pub fn decompose_cot(binding: &AgentBinding, x: &QuestionInstance, demos: &str, params: &GenParams) -> StageResult<Vec<String>> {
    let cot = match x.cot.as_deref().map(str::trim) {
        Some(c) if !c.is_empty() => c,
        _ => return StageResult { value: vec![], raw: vec![], flags: vec!["missing_cot".into()] },
    };
    let msgs = decompose_messages(binding, x, cot, demos);
    let (raw, res) = with_reprompt(binding.backend.as_ref(), msgs, params, |r| {
        let s = synthesis::parse_string_array(r).map_err(failure)?;
        if s.is_empty() {
            return Err("the statement list is empty".into());
        }
        Ok(s)
    });
    match res {
        Ok(value) => StageResult { value, raw, flags: vec![] },
        Err(e) => {
            log::warn!("{}: CoT parsing failed: {e}", x.id);
            StageResult { value: vec![], raw, flags: vec!["cp_failed".into()] }
        }
    }
}

/// Verifier evidence stage: exactly one string per statement. A wrong
/// count is re-prompted once; remaining gaps become empty, flagged slots.
pub fn extract_evidence(
    binding: &AgentBinding,
    x: &QuestionInstance,
    qp: &[String],
    statements: &[String],
    demos: &str,
    params: &GenParams,
) -> StageResult<Vec<String>> {
    let n = statements.len();
    if n == 0 {
        return StageResult { value: vec![], raw: vec![], flags: vec![] };
    }
    let msgs = evidence_messages(binding, x, qp, statements, demos);
    let (raw, res) = with_reprompt(binding.backend.as_ref(), msgs, params, |r| {
        let ev = synthesis::parse_string_array(r).map_err(failure)?;
        if ev.len() != n {
            return Err(format!("expected exactly {n} evidence strings, got {}", ev.len()));
        }
        Ok(ev)
    });
    match res {
        Ok(value) => StageResult { value, raw, flags: vec![] },
        Err(e) => {
            log::warn!("{}: evidence extraction: {e}", x.id);
            let partial = raw.last().and_then(|r| synthesis::parse_string_array(r).ok()).unwrap_or_default();
            let mut flags = Vec::new();
            if partial.is_empty() {
                flags.push("evidence_failed".into());
            }
            let value = (0..n)
                .map(|i| match partial.get(i) {
                    Some(e) => e.clone(),
                    None => {
                        flags.push(format!("evidence_missing:{}", i + 1));
                        String::new()
                    }
                })
                .collect();
            if partial.len() > n {
                flags.push(format!("evidence_extra:{}", partial.len() - n));
            }
            StageResult { value, raw, flags }
        }
    }
}

/// Verifier verdict stage: one boolean per step. Missing or unreadable
/// verdicts default to false and are flagged.
pub fn verify_steps(
    binding: &AgentBinding,
    x: &QuestionInstance,
    qp: &[String],
    statements: &[String],
    evidence: &[String],
    demos: &str,
    params: &GenParams,
) -> StageResult<Vec<bool>> {
    let n = statements.len();
    if n == 0 {
        return StageResult { value: vec![], raw: vec![], flags: vec![] };
    }
    let msgs = verify_messages(binding, x, qp, statements, evidence, demos);
    let reply = match binding.backend.generate(&msgs, params) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("{}: verification failed: {e}", x.id);
            return StageResult {
                value: vec![false; n],
                raw: vec![],
                flags: (1..=n).map(|i| format!("verdict_defaulted:{i}")).collect(),
            };
        }
    };
    let items: Vec<Value> = match synthesis::extract_json(&reply) {
        Ok((_, Value::Array(items))) => items,
        _ => vec![],
    };
    let mut flags = Vec::new();
    let value = (0..n)
        .map(|i| match items.get(i).map(corpus::canonicalize_verification) {
            Some(Ok(v)) => v,
            _ => {
                flags.push(format!("verdict_defaulted:{}", i + 1));
                false
            }
        })
        .collect();
    StageResult { value, raw: vec![reply], flags }
}

pub struct Cascade {
    pub agents: Agents,
    pub embedder: Arc<dyn Backend>,
    pub pool: Arc<DemoPool>,
    pub k: usize,
    pub params: GenParams,
    clock: AtomicU64,
}

impl Cascade {
    pub fn new(agents: Agents, embedder: Arc<dyn Backend>, pool: Arc<DemoPool>, k: usize, params: GenParams) -> Self {
        Cascade { agents, embedder, pool, k, params, clock: AtomicU64::new(0) }
    }

    fn stamp(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::SeqCst)
    }

    fn timed<T>(&self, stage: Stage, f: impl FnOnce() -> StageResult<T>) -> (StageResult<T>, StageTrace) {
        let seq_start = self.stamp();
        let t0 = Instant::now();
        let r = f();
        let trace = StageTrace {
            stage,
            raw: r.raw.clone(),
            seq_start,
            seq_end: self.stamp(),
            elapsed_ms: t0.elapsed().as_millis(),
        };
        (r, trace)
    }

    /// Run the four stages in order for one instance.
    pub fn run_pipeline(&self, x: &QuestionInstance) -> CascadeOutput {
        let mut flags = Vec::new();
        let (demo_ids, block) = match self.pool.retrieve(self.embedder.as_ref(), x, self.k, false) {
            Ok((hits, demos)) => (hits.into_iter().map(|h| h.id).collect(), demo_block(&demos)),
            Err(e) => {
                log::warn!("{}: retrieval failed: {e}", x.id);
                flags.push("retrieval_failed".to_string());
                (vec![], String::new())
            }
        };
        let a = &self.agents;
        let p = &self.params;
        let (qp, t1) = self.timed(Stage::Parse, || parse_question(&a.parser, x, &block, p));
        let (cp, t2) = self.timed(Stage::Decompose, || decompose_cot(&a.decomposer, x, &block, p));
        let (ev, t3) = self.timed(Stage::Evidence, || extract_evidence(&a.evidence, x, &qp.value, &cp.value, &block, p));
        let (vr, t4) = self.timed(Stage::Verify, || verify_steps(&a.verify, x, &qp.value, &cp.value, &ev.value, &block, p));
        flags.extend(qp.flags);
        flags.extend(cp.flags);
        flags.extend(ev.flags);
        flags.extend(vr.flags);
        let out = CascadeOutput {
            id: x.id.clone(),
            qp: qp.value,
            statements: cp.value,
            evidence: ev.value,
            verdicts: vr.value,
            flags,
            demo_ids,
            stages: vec![t1, t2, t3, t4],
        };
        debug_assert!(out.is_aligned());
        out
    }

    /// Instances run concurrently; output sorted by id.
    pub fn run_batch(&self, instances: &[QuestionInstance]) -> Vec<CascadeOutput> {
        let mut out: Vec<CascadeOutput> = instances.par_iter().map(|x| self.run_pipeline(x)).collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }
}

pub fn write_predictions(path: &Path, outputs: &[CascadeOutput]) -> Result<(), CorpusError> {
    let rows: Vec<Value> = outputs.iter().map(CascadeOutput::to_prediction_json).collect();
    corpus::write_jsonl(path, None, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedBackend;

    fn x() -> QuestionInstance {
        QuestionInstance { id: "q".into(), question: "A is red. B is blue.".into(), options: vec![], gold_answer: None, cot: Some("A is red.".into()) }
    }

    fn binding(kind: PromptKind, reply: &'static [&'static str]) -> (AgentBinding, Arc<ScriptedBackend>) {
        let n = AtomicU64::new(0);
        let b = ScriptedBackend::new("t")
            .on_generate(move |_, _| {
                let i = n.fetch_add(1, Ordering::SeqCst) as usize;
                Ok(reply[i.min(reply.len() - 1)].to_string())
            })
            .into_arc();
        (AgentBinding::new(Agent::Parser, b.clone(), kind), b)
    }

    #[test]
    fn prose_only_flags_after_one_reprompt() {
        let (b, backend) = binding(PromptKind::Qp, &["no idea", "still no idea"]);
        let r = parse_question(&b, &x(), "", &GenParams::default());
        assert!(r.value.is_empty());
        assert_eq!(r.flags, vec!["qp_failed"]);
        assert_eq!(backend.calls(), 2);
        let second = &backend.requests()[1];
        assert_eq!(second.len(), 4);
        assert!(second[3].content.ends_with(prompts::QP_CONTRACT));
    }

    #[test]
    fn reprompt_recovers() {
        let (b, backend) = binding(PromptKind::Qp, &["nothing", "[\"A is red\"]"]);
        let r = parse_question(&b, &x(), "", &GenParams::default());
        assert_eq!(r.value, vec!["A is red"]);
        assert!(r.flags.is_empty());
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn short_evidence_flags_missing_slot() {
        let (b, backend) = binding(PromptKind::CvEvidence, &["[\"e1\", \"e2\", \"e3\"]"]);
        let s: Vec<String> = (1..=4).map(|i| format!("s{i}")).collect();
        let r = extract_evidence(&b, &x(), &[], &s, "", &GenParams::default());
        assert_eq!(r.value, vec!["e1", "e2", "e3", ""]);
        assert_eq!(r.flags, vec!["evidence_missing:4"]);
        assert_eq!(backend.calls(), 2);
        assert!(backend.requests()[1][3].content.contains("exactly 4"));
    }

    #[test]
    fn unreadable_verdicts_default_false() {
        let (b, _) = binding(PromptKind::CvVerify, &["[\"True\", \"maybe\"]"]);
        let s = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let r = verify_steps(&b, &x(), &[], &s, &s, "", &GenParams::default());
        assert_eq!(r.value, vec![true, false, false]);
        assert_eq!(r.flags, vec!["verdict_defaulted:2", "verdict_defaulted:3"]);
        let r = verify_steps(&b, &x(), &[], &[], &[], "", &GenParams::default());
        assert!(r.value.is_empty());
    }

    #[test]
    fn missing_cot_skips_backend() {
        let (b, backend) = binding(PromptKind::Cp, &["[]"]);
        let mut q = x();
        q.cot = Some("  ".into());
        let r = decompose_cot(&b, &q, "", &GenParams::default());
        assert_eq!(r.flags, vec!["missing_cot"]);
        assert_eq!(backend.calls(), 0);
    }
}
