//! Deterministic offline backend.
//!
//! Hash scheme (all digests are SHA-256 over parts joined by 0x1f, see
//! [`crate::util::digest_parts`]):
//!
//! * `generate`: a ChaCha8 stream seeded with
//!   `H("mock-v1", model, "generate", messages_json, seed)` where `seed` is
//!   the decimal `GenParams::seed` or `-`. The task is recognised from the
//!   contract line of the last user message and the stream picks a canned
//!   structure of the right shape (condition lists, `cot_steps` objects,
//!   statement/evidence/verdict arrays, induced instructions, judge
//!   verdicts). Unified-reasoning and question-parsing outputs are corrupted
//!   with the configured malformation rates.
//! * `score_completion`: additive over whitespace tokens of the completion:
//!   `cost_i = 0.05 + 0.95 * U(H("mock-v1", model, "score", prompt_json, i, token_i))`,
//!   score `= max(-100, -sum cost_i)`. Extending a completion never raises
//!   its score.
//! * `embed`: signed feature hashing of lowercase word unigrams (weight 1)
//!   and bigrams (weight 0.5) into `dimension` buckets, L2-normalized.
//! * `reward`: `4 * U(H("mock-v1", model, "reward", context_json, response)) - 1.5`.
//!
//! `U` maps the first eight digest bytes to [0, 1).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{check_messages, check_text, l2_normalize, Backend, BackendError, ChatMessage, GenParams, Role};
use crate::prompts::{self, PromptTask};
use crate::util::{digest_parts, unit_from_digest};

const SCHEME: &[u8] = b"mock-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSettings {
    pub dimension: usize,
    /// Probability that a unified-reasoning output is corrupted.
    pub ucot_malformation_rate: f64,
    /// Probability that a question-parsing output is corrupted.
    pub qp_malformation_rate: f64,
    pub min_steps: usize,
    pub max_steps: usize,
    /// Artificial per-call latency, for concurrency tests.
    pub latency_ms: u64,
}

impl Default for MockSettings {
    fn default() -> Self {
        MockSettings {
            dimension: 64,
            ucot_malformation_rate: 0.0,
            qp_malformation_rate: 0.0,
            min_steps: 1,
            max_steps: 6,
            latency_ms: 0,
        }
    }
}

pub struct MockBackend {
    model: String,
    settings: MockSettings,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(model: &str, settings: MockSettings) -> Self {
        MockBackend { model: model.to_string(), settings, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn tick(&self) {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.settings.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.settings.latency_ms));
        }
    }

    /// Seed of the generation stream for these inputs.
    pub fn generation_digest(&self, messages: &[ChatMessage], params: &GenParams) -> [u8; 32] {
        let seed = params.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
        let msgs = serde_json::to_string(messages).expect("messages serialize");
        digest_parts(&[SCHEME, self.model.as_bytes(), b"generate", msgs.as_bytes(), seed.as_bytes()])
    }

    fn ucot(&self, rng: &mut ChaCha8Rng, user: &str) -> String {
        let question = query_question(user);
        let facts = declaratives(question);
        let labels = option_labels(question);
        let lo = self.settings.min_steps.min(self.settings.max_steps);
        let n = rng.gen_range(lo..=self.settings.max_steps.max(lo));
        let capitalized = rng.gen_bool(0.2);
        let key = |k: &str| if capitalized { capitalize(k) } else { k.to_string() };
        let steps: Vec<Value> = (0..n)
            .map(|i| {
                let statement = if !labels.is_empty() && rng.gen_bool(0.5) {
                    let l = labels[rng.gen_range(0..labels.len())];
                    format!("Option {l} is consistent with the stated conditions.")
                } else {
                    format!("It follows that {}", lower_first(&facts[i % facts.len()]))
                };
                let evidence = format!("The problem states: {}", facts[(i + 1) % facts.len()]);
                let verdict = rng.gen_bool(0.6);
                let verification = match rng.gen_range(0..3) {
                    0 => Value::Bool(verdict),
                    1 => Value::from(if verdict { "True" } else { "False" }),
                    _ => Value::from(if verdict { "true" } else { "false" }),
                };
                let mut m = serde_json::Map::new();
                m.insert(key("statement"), Value::from(statement));
                m.insert(key("evidence"), Value::from(evidence));
                m.insert(key("verification"), verification);
                Value::Object(m)
            })
            .collect();
        let body = if rng.gen_bool(0.15) { Value::Array(steps) } else { json!({ "cot_steps": steps }) };
        let json_text = prompts::pretty(&body);
        let json_text = if rng.gen_bool(self.settings.ucot_malformation_rate.clamp(0.0, 1.0)) {
            malform(rng, &json_text)
        } else {
            json_text
        };
        wrap(rng, &json_text, "Here is the structured reasoning:")
    }

    fn qp(&self, rng: &mut ChaCha8Rng, user: &str) -> String {
        let facts = declaratives(query_question(user));
        let count = rng.gen_range(1..=facts.len().min(6));
        let conditions: Vec<Value> = facts.iter().take(count).cloned().map(Value::from).collect();
        let body = if rng.gen_bool(0.2) {
            json!({ "question_parsing": conditions })
        } else {
            Value::Array(conditions)
        };
        let text = prompts::pretty(&body);
        if rng.gen_bool(self.settings.qp_malformation_rate.clamp(0.0, 1.0)) {
            return text.replace('"', "'");
        }
        wrap(rng, &text, "The extracted conditions are:")
    }
}

impl Backend for MockBackend {
    fn identity(&self) -> String {
        format!("mock/{}", self.model)
    }

    fn generate(&self, messages: &[ChatMessage], params: &GenParams) -> Result<String, BackendError> {
        check_messages(messages)?;
        params.validate()?;
        self.tick();
        let mut rng = ChaCha8Rng::from_seed(self.generation_digest(messages, params));
        let user = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let out = match PromptTask::detect(messages) {
            Some(PromptTask::QuestionParsing) => self.qp(&mut rng, user),
            Some(PromptTask::UnifiedCot) => self.ucot(&mut rng, user),
            Some(PromptTask::CotParsing) => {
                let cot = prompts::section(user, "CoT").unwrap_or(user);
                let statements: Vec<Value> = cot
                    .lines()
                    .map(strip_numbering)
                    .filter(|l| !l.ends_with(':'))
                    .flat_map(sentences)
                    .map(Value::from)
                    .collect();
                wrap(&mut rng, &prompts::pretty(&Value::Array(statements)), "Statements:")
            }
            Some(PromptTask::Evidence { expected }) => {
                let facts = declaratives(query_question(user));
                let ev: Vec<Value> = (0..expected)
                    .map(|i| Value::from(format!("The problem states: {}", facts[(i + rng.gen_range(0..2)) % facts.len()])))
                    .collect();
                prompts::pretty(&Value::Array(ev))
            }
            Some(PromptTask::Verify { expected }) => {
                let v: Vec<Value> = (0..expected).map(|_| Value::from(if rng.gen_bool(0.6) { "True" } else { "False" })).collect();
                serde_json::to_string(&v).expect("serialize")
            }
            Some(PromptTask::Induction) => {
                let base = if user.contains("cot_steps") { prompts::UCOT_INSTRUCTION } else { prompts::QP_INSTRUCTION };
                let variant = INDUCTION_VARIANTS.choose(&mut rng).expect("non-empty");
                format!("{base}\n\n{variant}")
            }
            Some(PromptTask::Judge) => {
                let u: f64 = rng.gen();
                (if u < 0.45 { "A" } else if u < 0.9 { "B" } else { "TIE" }).to_string()
            }
            None => "I am not sure how to respond to this request.".to_string(),
        };
        Ok(out)
    }

    fn score_completion(&self, prompt: &[ChatMessage], completion: &str) -> Result<f64, BackendError> {
        check_messages(prompt)?;
        check_text("completion", completion)?;
        self.tick();
        Ok(additive_score(&self.model, prompt, completion))
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        check_text("text", text)?;
        self.tick();
        let dim = self.settings.dimension.max(1);
        let mut v = vec![0f32; dim];
        let words = words(text);
        let mut add = |feature: &str, weight: f32| {
            let d = digest_parts(&[SCHEME, self.model.as_bytes(), b"embed", feature.as_bytes()]);
            let mut idx = [0u8; 8];
            idx.copy_from_slice(&d[8..16]);
            let bucket = (u64::from_le_bytes(idx) % dim as u64) as usize;
            let sign = if d[16] & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign * weight;
        };
        for w in &words {
            add(w, 1.0);
        }
        for pair in words.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]), 0.5);
        }
        if words.is_empty() {
            add(text, 1.0);
        }
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        l2_normalize(v)
    }

    fn reward(&self, context: &[ChatMessage], response: &str) -> Result<f64, BackendError> {
        check_messages(context)?;
        check_text("response", response)?;
        self.tick();
        let ctx = serde_json::to_string(context).expect("messages serialize");
        let d = digest_parts(&[SCHEME, self.model.as_bytes(), b"reward", ctx.as_bytes(), response.as_bytes()]);
        Ok(4.0 * unit_from_digest(&d) - 1.5)
    }
}

/// The mock's log-probability: see the module docs.
pub fn additive_score(model: &str, prompt: &[ChatMessage], completion: &str) -> f64 {
    let p = serde_json::to_string(prompt).expect("messages serialize");
    let total: f64 = completion
        .split_whitespace()
        .enumerate()
        .map(|(i, tok)| {
            let d = digest_parts(&[SCHEME, model.as_bytes(), b"score", p.as_bytes(), i.to_string().as_bytes(), tok.as_bytes()]);
            0.05 + 0.95 * unit_from_digest(&d)
        })
        .sum();
    (-total).max(-100.0)
}

const INDUCTION_VARIANTS: &[&str] = &[
    "Keep every item short and faithful to the wording of the problem.",
    "Preserve the order in which the information appears in the input.",
    "Do not add facts that are not stated or directly implied by the input.",
    "Use complete sentences and avoid abbreviations.",
    "Return only the structured output without any commentary.",
    "Check each item against the problem text before writing it down.",
];

fn malform(rng: &mut ChaCha8Rng, text: &str) -> String {
    match rng.gen_range(0..4) {
        0 => {
            let cut = rng.gen_range(1..text.len() - 1);
            let mut cut = cut;
            while !text.is_char_boundary(cut) {
                cut -= 1;
            }
            text[..cut].to_string()
        }
        1 => text.replace('"', "'"),
        2 => text.replacen("\"evidence\"", "\"evidense\"", 1).replacen("\"Evidence\"", "\"Evidense\"", 1),
        // trailing comma after the last step object
        _ => match text.rfind(']').and_then(|i| text[..i].rfind('}')) {
            Some(j) => format!("{},{}", &text[..j + 1], &text[j + 1..]),
            None => text.replace('"', "'"),
        },
    }
}

fn wrap(rng: &mut ChaCha8Rng, json_text: &str, preface: &str) -> String {
    match rng.gen_range(0..4) {
        0 => format!("```json\n{json_text}\n```"),
        1 => format!("{preface}\n{json_text}\nLet me know if anything needs adjusting."),
        _ => json_text.to_string(),
    }
}

fn query_question(user: &str) -> &str {
    prompts::section(user, "Input")
        .or_else(|| prompts::section(user, "Question"))
        .unwrap_or(user)
}

fn is_option_line(line: &str) -> bool {
    let b = line.trim().as_bytes();
    b.len() >= 3 && b[0].is_ascii_uppercase() && b[1] == b'.' && b[2] == b' '
}

fn option_labels(text: &str) -> Vec<char> {
    text.lines().filter(|l| is_option_line(l)).filter_map(|l| l.trim().chars().next()).collect()
}

fn strip_numbering(line: &str) -> &str {
    let t = line.trim();
    let digits = t.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 && t[digits..].starts_with(". ") {
        t[digits + 2..].trim()
    } else {
        t
    }
}

fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        cur.push(c);
        let boundary = matches!(c, '.' | '!' | '?') && chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if boundary {
            let s = cur.trim().to_string();
            if s.len() > 2 {
                out.push(s);
            }
            cur.clear();
        }
    }
    let s = cur.trim().to_string();
    if s.len() > 2 {
        out.push(s);
    }
    out
}

/// Declarative sentences of a question, option lines excluded. Never empty.
fn declaratives(question: &str) -> Vec<String> {
    let body: Vec<&str> = question.lines().filter(|l| !is_option_line(l)).collect();
    let facts: Vec<String> = sentences(&body.join(" ")).into_iter().filter(|s| !s.ends_with('?')).collect();
    if facts.is_empty() {
        vec![question.trim().chars().take(200).collect::<String>().trim().to_string()]
            .into_iter()
            .map(|s| if s.is_empty() { "The problem gives no explicit conditions.".into() } else { s })
            .collect()
    } else {
        facts
    }
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Fails the first `failures` calls with a transient error, then delegates.
pub struct FlakyBackend {
    inner: Arc<dyn Backend>,
    failures: u64,
    attempts: AtomicU64,
}

impl FlakyBackend {
    pub fn new(inner: Arc<dyn Backend>, failures: u64) -> Self {
        FlakyBackend { inner, failures, attempts: AtomicU64::new(0) }
    }

    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::SeqCst)
    }

    fn gate(&self) -> Result<(), BackendError> {
        let n = self.attempts.fetch_add(1, Ordering::SeqCst);
        if n < self.failures {
            Err(BackendError::Transient(format!("injected failure {}", n + 1)))
        } else {
            Ok(())
        }
    }
}

impl Backend for FlakyBackend {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn generate(&self, messages: &[ChatMessage], params: &GenParams) -> Result<String, BackendError> {
        self.gate()?;
        self.inner.generate(messages, params)
    }

    fn score_completion(&self, prompt: &[ChatMessage], completion: &str) -> Result<f64, BackendError> {
        self.gate()?;
        self.inner.score_completion(prompt, completion)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        self.gate()?;
        self.inner.embed(text)
    }

    fn reward(&self, context: &[ChatMessage], response: &str) -> Result<f64, BackendError> {
        self.gate()?;
        self.inner.reward(context, response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{system, user};

    fn qp_msgs(q: &str) -> Vec<ChatMessage> {
        vec![system("s"), user(format!("Input:\n{q}\n\n{}", prompts::QP_CONTRACT))]
    }

    #[test]
    fn same_input_same_output() {
        let m = MockBackend::new("m", MockSettings::default());
        let p = GenParams::default();
        let q = qp_msgs("One group has 8 people. Who knows whom?");
        assert_eq!(m.generate(&q, &p).unwrap(), m.generate(&q, &p).unwrap());
    }

    #[test]
    fn seed_changes_output_via_hash_scheme() {
        let m = MockBackend::new("m", MockSettings::default());
        let msgs = vec![system("s"), user(format!("Input:\nsome pairs\n\n{}", prompts::INDUCTION_CONTRACT))];
        let p1 = GenParams::default().with_seed(1);
        let p2 = GenParams::default().with_seed(2);
        // Independent recomputation of the documented stream seed.
        let enc = serde_json::to_string(&msgs).unwrap();
        let d1 = digest_parts(&[b"mock-v1", b"m", b"generate", enc.as_bytes(), b"1"]);
        let d2 = digest_parts(&[b"mock-v1", b"m", b"generate", enc.as_bytes(), b"2"]);
        assert_eq!(m.generation_digest(&msgs, &p1), d1);
        assert_eq!(m.generation_digest(&msgs, &p2), d2);
        // The first variant draw differs for these two streams, so the texts differ.
        let pick = |d: [u8; 32]| {
            let mut r = ChaCha8Rng::from_seed(d);
            *INDUCTION_VARIANTS.choose(&mut r).unwrap()
        };
        assert_ne!(pick(d1), pick(d2));
        assert_ne!(m.generate(&msgs, &p1).unwrap(), m.generate(&msgs, &p2).unwrap());
    }

    #[test]
    fn score_is_nonpositive_and_repeatable() {
        let m = MockBackend::new("m", MockSettings::default());
        let p = qp_msgs("x");
        let s = m.score_completion(&p, "a b c").unwrap();
        assert!((-100.0..=0.0).contains(&s));
        assert_eq!(s, m.score_completion(&p, "a b c").unwrap());
    }

    #[test]
    fn score_matches_hand_computation() {
        let p = qp_msgs("x");
        let enc = serde_json::to_string(&p).unwrap();
        let cost = |i: usize, t: &str| {
            let d = digest_parts(&[b"mock-v1", b"m", b"score", enc.as_bytes(), i.to_string().as_bytes(), t.as_bytes()]);
            0.05 + 0.95 * unit_from_digest(&d)
        };
        let expected = -(cost(0, "alpha") + cost(1, "beta"));
        let m = MockBackend::new("m", MockSettings::default());
        assert_eq!(m.score_completion(&p, "alpha beta").unwrap(), expected);
        assert!(m.score_completion(&p, "alpha beta gamma").unwrap() <= expected);
    }

    #[test]
    fn score_floor() {
        let m = MockBackend::new("m", MockSettings::default());
        let long = "w ".repeat(500);
        assert_eq!(m.score_completion(&qp_msgs("x"), &long).unwrap(), -100.0);
    }

    #[test]
    fn embedding_is_unit_and_sized() {
        let m = MockBackend::new("m", MockSettings::default());
        let v = m.embed("The group has 8 people.").unwrap();
        assert_eq!(v.len(), 64);
        let n: f64 = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert_eq!(v, m.embed("The group has 8 people.").unwrap());
        let punct = m.embed("?!").unwrap();
        assert_eq!(punct.len(), 64);
    }

    #[test]
    fn reward_repeatable_and_rejects_empty() {
        let m = MockBackend::new("m", MockSettings::default());
        let c = qp_msgs("x");
        assert_eq!(m.reward(&c, "y").unwrap(), m.reward(&c, "y").unwrap());
        assert!(matches!(m.reward(&c, ""), Err(BackendError::Precondition(_))));
    }

    #[test]
    fn sentence_helpers() {
        let q = "One group has 8 people. Who knows whom?\nA. first\nB. second";
        assert_eq!(declaratives(q), vec!["One group has 8 people.".to_string()]);
        assert_eq!(option_labels(q), vec!['A', 'B']);
        assert_eq!(strip_numbering("12. Step text"), "Step text");
    }
}
