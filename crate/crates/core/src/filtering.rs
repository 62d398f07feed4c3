//! Two-stage quality filter: structural pruning, then reward thresholding
//! under one of several score strategies. Also expands kept traces into
//! step-level verification rows.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::{Backend, BackendError, ChatMessage};
use crate::corpus::{self, CorpusError, SeedExample};
use crate::prompts;
use crate::synthesis::{self, DemoPool, ParseStatus, SynthesizedRecord};

pub const DEFAULT_THRESHOLD: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub s_few: f64,
    pub s_zero: f64,
    pub s_avg: f64,
}

impl RewardRecord {
    pub fn new(s_few: f64, s_zero: f64) -> Self {
        RewardRecord { s_few, s_zero, s_avg: (s_few + s_zero) / 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FilterStrategy {
    #[serde(rename = "structure")]
    StructureOnly,
    #[serde(rename = "zero")]
    ZeroShot,
    #[serde(rename = "few")]
    FewShot,
    #[serde(rename = "average")]
    Average,
}

impl FilterStrategy {
    pub const ALL: [FilterStrategy; 4] =
        [FilterStrategy::StructureOnly, FilterStrategy::ZeroShot, FilterStrategy::FewShot, FilterStrategy::Average];

    /// Short name used on the command line and in file names.
    pub fn name(self) -> &'static str {
        match self {
            FilterStrategy::StructureOnly => "structure",
            FilterStrategy::ZeroShot => "zero",
            FilterStrategy::FewShot => "few",
            FilterStrategy::Average => "average",
        }
    }

    /// The score this strategy thresholds; `None` for structure-only.
    pub fn score(self, r: &RewardRecord) -> Option<f64> {
        match self {
            FilterStrategy::StructureOnly => None,
            FilterStrategy::ZeroShot => Some(r.s_zero),
            FilterStrategy::FewShot => Some(r.s_few),
            FilterStrategy::Average => Some(r.s_avg),
        }
    }
}

impl fmt::Display for FilterStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FilterStrategy::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown strategy {s:?} (expected structure, zero, few or average)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Structural,
    Reward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Keep,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Passed,
    QpMalformed,
    UcotMalformed,
    TooFewSteps,
    GenerationFailed,
    EmptyQp,
    AboveThreshold,
    AtOrBelowThreshold,
    Unscored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub id: String,
    pub stage: Stage,
    /// Set on reward-stage outcomes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<FilterStrategy>,
    pub decision: Decision,
    pub reason: Reason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<RewardRecord>,
}

impl FilterOutcome {
    pub fn kept(&self) -> bool {
        self.decision == Decision::Keep
    }
}

pub fn structural_filter(record: &SynthesizedRecord) -> FilterOutcome {
    let reason = match record.parse_status {
        ParseStatus::QpMalformed => Reason::QpMalformed,
        ParseStatus::UcotMalformed => Reason::UcotMalformed,
        ParseStatus::TooFewSteps => Reason::TooFewSteps,
        ParseStatus::GenerationFailed => Reason::GenerationFailed,
        ParseStatus::Ok if record.qp.as_ref().is_none_or(Vec::is_empty) => Reason::EmptyQp,
        ParseStatus::Ok => Reason::Passed,
    };
    FilterOutcome {
        id: record.id().to_string(),
        stage: Stage::Structural,
        strategy: None,
        decision: if reason == Reason::Passed { Decision::Keep } else { Decision::Drop },
        reason,
        scores: None,
    }
}

/// The response being scored: the canonical reasoning object.
pub fn reward_response(example: &SeedExample) -> String {
    synthesis::ucot_demo_output(&example.trace)
}

/// Few-shot and zero-shot scoring contexts. Both share the instruction; the
/// zero-shot one carries no demonstrations.
pub fn build_reward_prompts(
    example: &SeedExample,
    demos: &[&SeedExample],
    instruction: &str,
) -> (Vec<ChatMessage>, Vec<ChatMessage>) {
    let few = synthesis::build_ucot_prompt(&example.instance, demos, instruction).to_messages();
    let zero = synthesis::build_ucot_prompt(&example.instance, &[], instruction).to_messages();
    (few, zero)
}

pub fn score_record(
    example: &SeedExample,
    demos: &[&SeedExample],
    reward: &dyn Backend,
    instruction: &str,
) -> Result<RewardRecord, BackendError> {
    let (few, zero) = build_reward_prompts(example, demos, instruction);
    let response = reward_response(example);
    let s_few = reward.reward(&few, &response)?;
    let s_zero = reward.reward(&zero, &response)?;
    Ok(RewardRecord::new(s_few, s_zero))
}

/// Keep items whose strategy score is strictly above `threshold`; input
/// order is preserved. Unscored items are dropped by every reward strategy.
pub fn apply_strategy<T>(
    items: &[(T, Option<RewardRecord>)],
    strategy: FilterStrategy,
    threshold: f64,
) -> Vec<&T> {
    items
        .iter()
        .filter(|(_, s)| match strategy {
            FilterStrategy::StructureOnly => true,
            _ => s.as_ref().and_then(|r| strategy.score(r)).is_some_and(|v| v > threshold),
        })
        .map(|(t, _)| t)
        .collect()
}

/// One verification training row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvRow {
    pub id: String,
    pub step: usize,
    pub question: String,
    pub question_parsing: Vec<String>,
    pub statement: String,
    pub evidence: String,
    pub verification: bool,
}

pub fn expand_cv(kept: &[SeedExample]) -> Vec<CvRow> {
    kept.iter()
        .flat_map(|e| {
            e.trace.steps.iter().enumerate().map(move |(i, s)| CvRow {
                id: e.instance.id.clone(),
                step: i,
                question: prompts::render_question(&e.instance),
                question_parsing: e.question_parsing.clone(),
                statement: s.statement.clone(),
                evidence: s.evidence.clone(),
                verification: s.verification,
            })
        })
        .collect()
}

pub fn strategy_path(dir: &Path, strategy: FilterStrategy) -> PathBuf {
    dir.join(format!("filtered_{}.jsonl", strategy.name()))
}

pub fn audit_path(dir: &Path) -> PathBuf {
    dir.join("filter_audit.jsonl")
}

/// Load a filtered dataset; a file with no records is an empty set.
pub fn load_filtered(path: &Path) -> Result<Vec<SeedExample>, CorpusError> {
    match corpus::load_seed(path) {
        Err(CorpusError::EmptyFile { .. }) => Ok(Vec::new()),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub input: usize,
    pub structural_kept: usize,
    pub unscored: usize,
    pub kept: BTreeMap<String, usize>,
    pub outcomes: Vec<FilterOutcome>,
    /// Structural survivors with their scores, sorted by id.
    #[serde(skip)]
    pub scored: Vec<(SeedExample, Option<RewardRecord>)>,
}

impl FilterReport {
    pub fn kept_examples(&self, strategy: FilterStrategy, threshold: f64) -> Vec<SeedExample> {
        apply_strategy(&self.scored, strategy, threshold).into_iter().cloned().collect()
    }
}

/// Inputs for a reward-stage run.
pub struct RewardStage<'a> {
    pub backend: &'a dyn Backend,
    pub pool: &'a DemoPool,
    pub instruction: &'a str,
    pub threshold: f64,
}

/// Run both stages over id-sorted records. `reward` may be `None` only for a
/// structure-only run; every reward strategy is then reported as unscored.
pub fn run_filter(records: &[SynthesizedRecord], reward: Option<&RewardStage<'_>>) -> FilterReport {
    let mut sorted: Vec<&SynthesizedRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id().cmp(b.id()));

    let mut outcomes = Vec::new();
    let mut survivors = Vec::new();
    for r in sorted {
        let o = structural_filter(r);
        if o.kept() {
            survivors.push(r.to_example().expect("structural survivors parse"));
        }
        outcomes.push(o);
    }

    let scores: Vec<Option<RewardRecord>> = match reward {
        None => vec![None; survivors.len()],
        Some(stage) => survivors
            .par_iter()
            .zip(records_demo_ids(records, &survivors).par_iter())
            .map(|(ex, ids)| {
                let demos: Vec<&SeedExample> = ids.iter().filter_map(|id| stage.pool.get(id)).collect();
                match score_record(ex, &demos, stage.backend, stage.instruction) {
                    Ok(s) => Some(s),
                    Err(e) => {
                        log::warn!("record {}: reward scoring failed: {e}", ex.id());
                        None
                    }
                }
            })
            .collect(),
    };
    let scored: Vec<(SeedExample, Option<RewardRecord>)> = survivors.into_iter().zip(scores).collect();

    let threshold = reward.map_or(DEFAULT_THRESHOLD, |s| s.threshold);
    let mut kept = BTreeMap::new();
    for strategy in FilterStrategy::ALL {
        kept.insert(strategy.name().to_string(), apply_strategy(&scored, strategy, threshold).len());
        if strategy == FilterStrategy::StructureOnly {
            continue;
        }
        for (ex, s) in &scored {
            let (decision, reason) = match s.as_ref().and_then(|r| strategy.score(r)) {
                None => (Decision::Drop, Reason::Unscored),
                Some(v) if v > threshold => (Decision::Keep, Reason::AboveThreshold),
                Some(_) => (Decision::Drop, Reason::AtOrBelowThreshold),
            };
            outcomes.push(FilterOutcome {
                id: ex.id().to_string(),
                stage: Stage::Reward,
                strategy: Some(strategy),
                decision,
                reason,
                scores: *s,
            });
        }
    }
    FilterReport {
        input: records.len(),
        structural_kept: scored.len(),
        unscored: scored.iter().filter(|(_, s)| s.is_none()).count(),
        kept,
        outcomes,
        scored,
    }
}

fn records_demo_ids(records: &[SynthesizedRecord], survivors: &[SeedExample]) -> Vec<Vec<String>> {
    let by_id: BTreeMap<&str, &SynthesizedRecord> = records.iter().map(|r| (r.id(), r)).collect();
    survivors.iter().map(|e| by_id.get(e.id()).map(|r| r.demo_ids.clone()).unwrap_or_default()).collect()
}

/// Write the audit file and one dataset file per strategy.
pub fn write_filter_outputs(report: &FilterReport, dir: &Path, threshold: f64) -> Result<Vec<PathBuf>, CorpusError> {
    let audit: Vec<Value> = report
        .outcomes
        .iter()
        .map(|o| serde_json::to_value(o).expect("outcome serializes"))
        .collect();
    corpus::write_jsonl(&audit_path(dir), None, &audit)?;
    let mut written = vec![audit_path(dir)];
    for strategy in FilterStrategy::ALL {
        let path = strategy_path(dir, strategy);
        corpus::write_seed(&path, &report.kept_examples(strategy, threshold))?;
        written.push(path);
    }
    Ok(written)
}
