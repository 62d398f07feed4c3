//! Reverse prompt induction: ask a model for the instruction behind seed
//! input/output pairs, then pick among candidates by generation fit plus a
//! pairwise judge tournament.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backends::{Backend, BackendError, ChatMessage, GenParams};
use crate::corpus::{self, CorpusError, SeedExample};
use crate::prompts::{self, PromptKind};
use crate::synthesis;

pub const DEFAULT_HELD_OUT_FRACTION: f64 = 0.25;
const DEDUP_ROUNDS: usize = 3;

#[derive(Debug, Error)]
pub enum InductionError {
    #[error("invalid induction config: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    #[default]
    Zscore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionConfig {
    pub subtask: PromptKind,
    pub n_candidates: usize,
    pub reverse_prompt: String,
    pub held_out_fraction: f64,
    pub normalization: Normalization,
    pub seed: u64,
    pub params: GenParams,
}

impl InductionConfig {
    pub fn new(subtask: PromptKind, n_candidates: usize) -> Self {
        InductionConfig {
            subtask,
            n_candidates,
            reverse_prompt: prompts::DEFAULT_REVERSE_PROMPT.to_string(),
            held_out_fraction: DEFAULT_HELD_OUT_FRACTION,
            normalization: Normalization::default(),
            seed: 0,
            params: GenParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), InductionError> {
        if !matches!(self.subtask, PromptKind::Qp | PromptKind::UCot) {
            return Err(InductionError::Config(format!("subtask must be QP or UCoT, got {:?}", self.subtask)));
        }
        if self.n_candidates < 2 {
            return Err(InductionError::Config("n_candidates must be at least 2".into()));
        }
        if !(self.held_out_fraction > 0.0 && self.held_out_fraction < 1.0) {
            return Err(InductionError::Config("held_out_fraction must lie in (0, 1)".into()));
        }
        self.params.validate().map_err(|e| InductionError::Config(e.to_string()))
    }

    pub fn held_out_len(&self, seed_len: usize) -> usize {
        ((self.held_out_fraction * seed_len as f64).round() as usize).clamp(1, seed_len.max(1))
    }
}

/// A candidate prompt and its raw component scores. The combined score
/// depends on the whole candidate set, see [`combined_scores`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePrompt {
    pub text: String,
    pub s_gen: f64,
    pub s_pref: usize,
}

/// How the generation score was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorePath {
    LogProb,
    RewardProxy,
}

fn target(subtask: PromptKind, example: &SeedExample) -> String {
    match subtask {
        PromptKind::UCot => synthesis::ucot_demo_output(&example.trace),
        _ => synthesis::qp_demo_output(example),
    }
}

fn task_messages(subtask: PromptKind, instruction: &str, example: &SeedExample) -> Vec<ChatMessage> {
    let bundle = match subtask {
        PromptKind::UCot => synthesis::build_ucot_prompt(&example.instance, &[], instruction),
        _ => synthesis::build_qp_prompt(&example.instance, &[], instruction),
    };
    bundle.to_messages()
}

/// The reverse-thinking request for one ordering of the seed.
pub fn induction_messages(config: &InductionConfig, seed: &[&SeedExample]) -> Vec<ChatMessage> {
    let pairs: Vec<String> = seed
        .iter()
        .map(|e| prompts::render_demo(&prompts::render_question(&e.instance), &target(config.subtask, e)))
        .collect();
    vec![
        prompts::system(config.reverse_prompt.clone()),
        prompts::user(prompts::render_sections(&[("Examples", &pairs.join("\n\n"))], prompts::INDUCTION_CONTRACT)),
    ]
}

fn shuffled(seed: &[SeedExample], rng_seed: u64) -> Vec<&SeedExample> {
    let mut order: Vec<&SeedExample> = seed.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    order
}

/// Ask for `n_candidates` distinct prompt texts. Each request sees its own
/// seed ordering; duplicates are re-requested with fresh orderings for up
/// to three rounds, after which fewer candidates are returned.
pub fn generate_candidates(
    config: &InductionConfig,
    seed: &[SeedExample],
    backend: &dyn Backend,
) -> Result<Vec<String>, InductionError> {
    config.validate()?;
    if seed.is_empty() {
        return Err(InductionError::Config("seed set is empty".into()));
    }
    let mut out: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for round in 0..=DEDUP_ROUNDS {
        let missing = config.n_candidates - out.len();
        if missing == 0 {
            break;
        }
        let base = config.seed.wrapping_add((round * config.n_candidates) as u64);
        let texts = (0..missing)
            .into_par_iter()
            .map(|i| {
                let s = base.wrapping_add(i as u64);
                let msgs = induction_messages(config, &shuffled(seed, s));
                backend.generate(&msgs, &config.params.with_seed(s)).map(|t| t.trim().to_string())
            })
            .collect::<Result<Vec<_>, _>>()?;
        for t in texts {
            if !t.is_empty() && seen.insert(t.clone()) && out.len() < config.n_candidates {
                out.push(t);
            }
        }
    }
    if out.len() < config.n_candidates {
        log::warn!("only {} distinct candidate prompts after {DEDUP_ROUNDS} retry rounds", out.len());
    }
    Ok(out)
}

/// Mean fit of the gold outputs under a prompt: token log-probability when
/// `scorer` can score, else the reward `rewarder` assigns to a fresh
/// generation from `generator`.
pub fn score_gen(
    subtask: PromptKind,
    prompt: &str,
    seed: &[SeedExample],
    backends: &InductionBackends<'_>,
    params: &GenParams,
) -> Result<(f64, ScorePath), InductionError> {
    let InductionBackends { generator, scorer, rewarder, .. } = *backends;
    if seed.is_empty() {
        return Err(InductionError::Config("seed set is empty".into()));
    }
    let logprob = |e: &SeedExample| scorer.score_completion(&task_messages(subtask, prompt, e), &target(subtask, e));
    let first = logprob(&seed[0]);
    let (scores, path) = match first {
        Err(e) if e.is_unsupported() => {
            let proxy = |e: &SeedExample| {
                let msgs = task_messages(subtask, prompt, e);
                let y = generator.generate(&msgs, params)?;
                rewarder.reward(&msgs, &y)
            };
            (seed.par_iter().map(proxy).collect::<Result<Vec<_>, _>>()?, ScorePath::RewardProxy)
        }
        first => {
            let mut v = vec![first?];
            v.extend(seed[1..].par_iter().map(logprob).collect::<Result<Vec<_>, _>>()?);
            (v, ScorePath::LogProb)
        }
    };
    Ok((scores.iter().sum::<f64>() / scores.len() as f64, path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    A,
    B,
    Tie,
}

/// Read a judge reply; anything other than a lone A, B or TIE is `None`.
pub fn parse_verdict(reply: &str) -> Option<Verdict> {
    let token: String = reply.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_uppercase();
    match token.as_str() {
        "A" => Some(Verdict::A),
        "B" => Some(Verdict::B),
        "TIE" => Some(Verdict::Tie),
        _ => None,
    }
}

pub fn judge_messages(references: &[String], a: &[String], b: &[String]) -> Vec<ChatMessage> {
    let block = |outs: &[String]| {
        outs.iter().enumerate().map(|(i, o)| format!("[{}]\n{o}", i + 1)).collect::<Vec<_>>().join("\n\n")
    };
    let (r, a, b) = (block(references), block(a), block(b));
    vec![
        prompts::system(prompts::JUDGE_INSTRUCTION),
        prompts::user(prompts::render_sections(
            &[("Reference outputs", &r), ("Output set A", &a), ("Output set B", &b)],
            prompts::JUDGE_CONTRACT,
        )),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tournament {
    pub wins: Vec<usize>,
    pub ties: usize,
}

/// Round-robin over all unordered pairs: each candidate's outputs on the
/// held-out slice are compared by the judge, the winner gets one point.
pub fn score_pref(
    subtask: PromptKind,
    candidates: &[String],
    held_out: &[SeedExample],
    generator: &dyn Backend,
    judge: &dyn Backend,
    params: &GenParams,
) -> Result<Tournament, InductionError> {
    if candidates.len() < 2 {
        return Err(InductionError::Config("preference scoring needs at least 2 candidates".into()));
    }
    let references: Vec<String> = held_out.iter().map(|e| target(subtask, e)).collect();
    let outputs: Vec<Vec<String>> = candidates
        .par_iter()
        .map(|p| {
            held_out
                .iter()
                .map(|e| generator.generate(&task_messages(subtask, p, e), params))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let pairs: Vec<(usize, usize)> =
        (0..candidates.len()).flat_map(|i| (i + 1..candidates.len()).map(move |j| (i, j))).collect();
    let verdicts = pairs
        .par_iter()
        .map(|&(i, j)| {
            let reply = judge.generate(&judge_messages(&references, &outputs[i], &outputs[j]), params)?;
            Ok(parse_verdict(&reply).unwrap_or_else(|| {
                log::warn!("unparseable judge reply for pair ({i}, {j}): {reply:?}; counted as a tie");
                Verdict::Tie
            }))
        })
        .collect::<Result<Vec<_>, BackendError>>()?;
    let mut t = Tournament { wins: vec![0; candidates.len()], ties: 0 };
    for (&(i, j), v) in pairs.iter().zip(verdicts) {
        match v {
            Verdict::A => t.wins[i] += 1,
            Verdict::B => t.wins[j] += 1,
            Verdict::Tie => t.ties += 1,
        }
    }
    Ok(t)
}

fn zscores(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / std).collect()
}

pub fn combined_scores(candidates: &[CandidatePrompt], normalization: Normalization) -> Vec<f64> {
    let gen: Vec<f64> = candidates.iter().map(|c| c.s_gen).collect();
    let pref: Vec<f64> = candidates.iter().map(|c| c.s_pref as f64).collect();
    let (gen, pref) = match normalization {
        Normalization::None => (gen, pref),
        Normalization::Zscore => (zscores(&gen), zscores(&pref)),
    };
    gen.iter().zip(&pref).map(|(g, p)| g + p).collect()
}

/// Index of the best candidate; the lowest index wins ties.
pub fn select_prompt(candidates: &[CandidatePrompt], normalization: Normalization) -> Option<usize> {
    let combined = combined_scores(candidates, normalization);
    let mut best: Option<usize> = None;
    for (i, c) in combined.iter().enumerate() {
        if best.is_none_or(|b| *c > combined[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InductionResult {
    pub subtask: PromptKind,
    pub candidates: Vec<CandidatePrompt>,
    pub combined: Vec<f64>,
    pub selected: usize,
    pub score_path: ScorePath,
    pub ties: usize,
}

impl InductionResult {
    pub fn prompt(&self) -> &str {
        &self.candidates[self.selected].text
    }
}

/// Roles used during induction.
#[derive(Clone, Copy)]
pub struct InductionBackends<'a> {
    pub generator: &'a dyn Backend,
    /// Token log-probabilities of gold outputs.
    pub scorer: &'a dyn Backend,
    /// Fallback when `scorer` cannot score.
    pub rewarder: &'a dyn Backend,
    pub judge: &'a dyn Backend,
}

/// Generate, score and select. The held-out judge slice is the last
/// `held_out_len` seed examples.
pub fn induce(
    config: &InductionConfig,
    seed: &[SeedExample],
    backends: &InductionBackends<'_>,
) -> Result<InductionResult, InductionError> {
    let texts = generate_candidates(config, seed, backends.generator)?;
    if texts.len() < 2 {
        return Err(InductionError::Config(format!("only {} distinct candidate prompts were produced", texts.len())));
    }
    let held_out = &seed[seed.len() - config.held_out_len(seed.len())..];
    let gens = texts
        .iter()
        .map(|t| score_gen(config.subtask, t, seed, backends, &config.params))
        .collect::<Result<Vec<_>, _>>()?;
    let tournament = score_pref(config.subtask, &texts, held_out, backends.generator, backends.judge, &config.params)?;
    let score_path = gens[0].1;
    let candidates: Vec<CandidatePrompt> = texts
        .into_iter()
        .zip(gens)
        .zip(&tournament.wins)
        .map(|((text, (s_gen, _)), &s_pref)| CandidatePrompt { text, s_gen, s_pref })
        .collect();
    let combined = combined_scores(&candidates, config.normalization);
    let selected = select_prompt(&candidates, config.normalization).expect("at least two candidates");
    Ok(InductionResult { subtask: config.subtask, candidates, combined, selected, score_path, ties: tournament.ties })
}

/// Write `<stem>.txt` with the selected prompt and `<stem>.json` with the
/// scores, config and backend identities.
pub fn persist(
    result: &InductionResult,
    config: &InductionConfig,
    identities: &[(&str, String)],
    dir: &Path,
    stem: &str,
) -> Result<(), InductionError> {
    corpus::write_atomic(&dir.join(format!("{stem}.txt")), result.prompt().as_bytes())?;
    let backends: serde_json::Map<String, serde_json::Value> =
        identities.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    let sidecar = json!({
        "result": result,
        "config": config,
        "backends": backends,
    });
    let mut bytes = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    bytes.push(b'\n');
    corpus::write_atomic(&dir.join(format!("{stem}.json")), &bytes)?;
    Ok(())
}

/// Read a persisted prompt back.
pub fn load_prompt(dir: &Path, stem: &str) -> std::io::Result<String> {
    std::fs::read_to_string(dir.join(format!("{stem}.txt")))
}
