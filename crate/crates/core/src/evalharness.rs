//! Question F1, Statement F1, Evidence F1 and Reasoning F1 over prediction
//! and gold files, macro-averaged over instances.
//!
//! A predicted item matches a gold item through a one-to-one assignment.
//! For CoT steps the match predicate grows with the level: statements
//! match; statements and evidence match; statements, evidence and
//! verification labels match. Each level's edge set is contained in the
//! previous one, so the scores are ordered `reason <= evid <= stmt`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{self, CoTStep, CorpusError, FieldError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Io(#[from] CorpusError),
    #[error("prediction and gold ids differ: missing predictions {missing_predictions:?}, unknown predictions {unknown_predictions:?}")]
    IdMismatch { missing_predictions: Vec<String>, unknown_predictions: Vec<String> },
    #[error("invalid match policy: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    pub lowercase: bool,
    pub strip_punctuation: bool,
    pub collapse_whitespace: bool,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { lowercase: true, strip_punctuation: true, collapse_whitespace: true }
    }
}

impl Normalization {
    pub fn apply(&self, s: &str) -> String {
        let mut out: String = s
            .chars()
            .filter(|c| !(self.strip_punctuation && c.is_ascii_punctuation()))
            .collect();
        if self.lowercase {
            out = out.to_lowercase();
        }
        if self.collapse_whitespace {
            out = out.split_whitespace().collect::<Vec<_>>().join(" ");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Exact,
    TokenF1Threshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPolicy {
    pub normalization: Normalization,
    pub mode: MatchMode,
    /// Minimum token F1 for a match; used only in token mode.
    pub threshold: f64,
}

impl Default for MatchPolicy {
    fn default() -> Self {
        MatchPolicy { normalization: Normalization::default(), mode: MatchMode::Exact, threshold: 1.0 }
    }
}

impl MatchPolicy {
    pub fn token(threshold: f64) -> Self {
        MatchPolicy { mode: MatchMode::TokenF1Threshold, threshold, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.mode == MatchMode::TokenF1Threshold && !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(EvalError::Policy(format!("threshold {} outside (0, 1]", self.threshold)));
        }
        Ok(())
    }

    /// Whether two already-normalized strings match.
    fn matches(&self, a: &str, b: &str) -> bool {
        match self.mode {
            MatchMode::Exact => a == b,
            MatchMode::TokenF1Threshold => token_f1(a, b) >= self.threshold,
        }
    }
}

/// Whitespace-token multiset F1 between two strings.
pub fn token_f1(a: &str, b: &str) -> f64 {
    let (ta, tb): (Vec<&str>, Vec<&str>) = (a.split_whitespace().collect(), b.split_whitespace().collect());
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &tb {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &ta {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let (p, r) = (overlap as f64 / ta.len() as f64, overlap as f64 / tb.len() as f64);
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    fn from_matched(tp: usize, n_pred: usize, n_gold: usize) -> Self {
        Counts { tp, fp: n_pred - tp, fn_: n_gold - tp }
    }

    /// F1; two empty lists score 1.
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            return 1.0;
        }
        2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
    }
}

/// First-fit one-to-one matching. Optimal whenever `edge` is an
/// equivalence relation, which holds for every exact-mode predicate.
fn greedy_matching(n_pred: usize, n_gold: usize, edge: impl Fn(usize, usize) -> bool) -> usize {
    let mut used = vec![false; n_gold];
    let mut tp = 0;
    for p in 0..n_pred {
        if let Some(g) = (0..n_gold).find(|&g| !used[g] && edge(p, g)) {
            used[g] = true;
            tp += 1;
        }
    }
    tp
}

/// Maximum bipartite matching by augmenting paths.
fn maximum_matching(n_pred: usize, n_gold: usize, edge: impl Fn(usize, usize) -> bool) -> usize {
    let adj: Vec<Vec<usize>> = (0..n_pred).map(|p| (0..n_gold).filter(|&g| edge(p, g)).collect()).collect();
    let mut owner: Vec<Option<usize>> = vec![None; n_gold];

    fn augment(p: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &g in &adj[p] {
            if seen[g] {
                continue;
            }
            seen[g] = true;
            if owner[g].is_none_or(|q| augment(q, adj, seen, owner)) {
                owner[g] = Some(p);
                return true;
            }
        }
        false
    }

    (0..n_pred)
        .filter(|&p| {
            let mut seen = vec![false; n_gold];
            augment(p, &adj, &mut seen, &mut owner)
        })
        .count()
}

fn matched(policy: &MatchPolicy, n_pred: usize, n_gold: usize, edge: impl Fn(usize, usize) -> bool) -> usize {
    match policy.mode {
        MatchMode::Exact => greedy_matching(n_pred, n_gold, edge),
        MatchMode::TokenF1Threshold => maximum_matching(n_pred, n_gold, edge),
    }
}

pub fn match_sets(pred: &[String], gold: &[String], policy: &MatchPolicy) -> Counts {
    let n = |xs: &[String]| xs.iter().map(|s| policy.normalization.apply(s)).collect::<Vec<_>>();
    let (p, g) = (n(pred), n(gold));
    let tp = matched(policy, p.len(), g.len(), |i, j| policy.matches(&p[i], &g[j]));
    Counts::from_matched(tp, p.len(), g.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotLevel {
    Statement,
    Evidence,
    Reasoning,
}

pub fn match_steps(pred: &[CoTStep], gold: &[CoTStep], policy: &MatchPolicy, level: CotLevel) -> Counts {
    let norm = |xs: &[CoTStep]| {
        xs.iter()
            .map(|s| (policy.normalization.apply(&s.statement), policy.normalization.apply(&s.evidence), s.verification))
            .collect::<Vec<_>>()
    };
    let (p, g) = (norm(pred), norm(gold));
    let edge = |i: usize, j: usize| {
        let (a, b) = (&p[i], &g[j]);
        policy.matches(&a.0, &b.0)
            && (level == CotLevel::Statement || policy.matches(&a.1, &b.1))
            && (level != CotLevel::Reasoning || a.2 == b.2)
    };
    let tp = matched(policy, p.len(), g.len(), edge);
    Counts::from_matched(tp, p.len(), g.len())
}

/// One instance as read from a prediction or gold file. Empty lists are
/// allowed (failed predictions).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredInstance {
    pub id: String,
    pub question_parsing: Vec<String>,
    pub steps: Vec<CoTStep>,
}

fn lookup<'a>(obj: &'a serde_json::Map<String, Value>, wanted: &[&str]) -> Option<&'a Value> {
    obj.iter()
        .find(|(k, _)| {
            let k: String = k.chars().filter(|c| !matches!(c, '_' | ' ' | '-')).flat_map(char::to_lowercase).collect();
            wanted.contains(&k.as_str())
        })
        .map(|(_, v)| v)
}

pub fn decode_scored(value: &Value) -> Result<ScoredInstance, FieldError> {
    let obj = value.as_object().ok_or_else(|| FieldError::new("$", "expected an object"))?;
    let id = match obj.get("id") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => return Err(FieldError::new("id", "missing or empty")),
    };
    let question_parsing = match lookup(obj, &["questionparsing"]) {
        Some(Value::Null) | None => Vec::new(),
        Some(v) => corpus::decode_string_list(v, "question_parsing")?,
    };
    let steps = match lookup(obj, &["cotparsing", "cotsteps", "steps"]) {
        Some(Value::Null) | None => Vec::new(),
        Some(v) => corpus::decode_steps(v, "cot_parsing")?.steps,
    };
    Ok(ScoredInstance { id, question_parsing, steps })
}

pub fn load_scored(path: &Path) -> Result<Vec<ScoredInstance>, CorpusError> {
    corpus::load_with(path, decode_scored)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InstanceScores {
    pub ques_f1: f64,
    pub stmt_f1: f64,
    pub evid_f1: f64,
    pub reason_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub ques_f1: f64,
    pub stmt_f1: f64,
    pub evid_f1: f64,
    pub reason_f1: f64,
    pub instances: usize,
    pub policy: MatchPolicy,
    pub per_instance: BTreeMap<String, InstanceScores>,
}

impl EvalReport {
    /// Plain-text table, columns Ques / Stmt / Evid / Reason.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| {:>8} | {:>8} | {:>8} | {:>10} |", "Ques. F1", "Stmt. F1", "Evid. F1", "Reason. F1");
        let _ = writeln!(out, "|{:-<10}|{:-<10}|{:-<10}|{:-<12}|", "", "", "", "");
        let _ = writeln!(
            out,
            "| {:>8.4} | {:>8.4} | {:>8.4} | {:>10.4} |",
            self.ques_f1, self.stmt_f1, self.evid_f1, self.reason_f1
        );
        out
    }
}

fn pair_up<'a>(
    pred: &'a [ScoredInstance],
    gold: &'a [ScoredInstance],
) -> Result<Vec<(&'a ScoredInstance, &'a ScoredInstance)>, EvalError> {
    let by_id: HashMap<&str, &ScoredInstance> = pred.iter().map(|p| (p.id.as_str(), p)).collect();
    let gold_ids: BTreeSet<&str> = gold.iter().map(|g| g.id.as_str()).collect();
    let missing: Vec<String> = gold.iter().filter(|g| !by_id.contains_key(g.id.as_str())).map(|g| g.id.clone()).collect();
    let unknown: Vec<String> = pred.iter().filter(|p| !gold_ids.contains(p.id.as_str())).map(|p| p.id.clone()).collect();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(EvalError::IdMismatch { missing_predictions: missing, unknown_predictions: unknown });
    }
    Ok(gold.iter().map(|g| (by_id[g.id.as_str()], g)).collect())
}

fn macro_avg(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn question_f1(pred: &[ScoredInstance], gold: &[ScoredInstance], policy: &MatchPolicy) -> Result<f64, EvalError> {
    policy.validate()?;
    let pairs = pair_up(pred, gold)?;
    Ok(macro_avg(pairs.iter().map(|(p, g)| match_sets(&p.question_parsing, &g.question_parsing, policy).f1())))
}

pub fn cot_f1(
    pred: &[ScoredInstance],
    gold: &[ScoredInstance],
    policy: &MatchPolicy,
    level: CotLevel,
) -> Result<f64, EvalError> {
    policy.validate()?;
    let pairs = pair_up(pred, gold)?;
    Ok(macro_avg(pairs.iter().map(|(p, g)| match_steps(&p.steps, &g.steps, policy, level).f1())))
}

pub fn score_instance(pred: &ScoredInstance, gold: &ScoredInstance, policy: &MatchPolicy) -> InstanceScores {
    InstanceScores {
        ques_f1: match_sets(&pred.question_parsing, &gold.question_parsing, policy).f1(),
        stmt_f1: match_steps(&pred.steps, &gold.steps, policy, CotLevel::Statement).f1(),
        evid_f1: match_steps(&pred.steps, &gold.steps, policy, CotLevel::Evidence).f1(),
        reason_f1: match_steps(&pred.steps, &gold.steps, policy, CotLevel::Reasoning).f1(),
    }
}

pub fn evaluate(pred: &[ScoredInstance], gold: &[ScoredInstance], policy: &MatchPolicy) -> Result<EvalReport, EvalError> {
    policy.validate()?;
    let pairs = pair_up(pred, gold)?;
    let scores: Vec<(String, InstanceScores)> =
        pairs.par_iter().map(|(p, g)| (g.id.clone(), score_instance(p, g, policy))).collect();
    let avg = |f: fn(&InstanceScores) -> f64| macro_avg(scores.iter().map(|(_, s)| f(s)));
    Ok(EvalReport {
        ques_f1: avg(|s| s.ques_f1),
        stmt_f1: avg(|s| s.stmt_f1),
        evid_f1: avg(|s| s.evid_f1),
        reason_f1: avg(|s| s.reason_f1),
        instances: scores.len(),
        policy: *policy,
        per_instance: scores.into_iter().collect(),
    })
}

pub fn evaluate_files(pred: &Path, gold: &Path, policy: &MatchPolicy) -> Result<EvalReport, EvalError> {
    evaluate(&load_scored(pred)?, &load_scored(gold)?, policy)
}
