//! One PASS/FAIL line per acceptance criterion; exits non-zero on any failure.

mod common;

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use distill_core::backends::{Backend, GenParams, MockBackend, MockSettings, ScriptedBackend};
use distill_core::cascade::{Agents, Cascade};
use distill_core::corpus::{self, CoTStep, QuestionInstance, ReasoningTrace, SeedExample, SftSubtask};
use distill_core::evalharness::{self, match_sets, match_steps, CotLevel, MatchPolicy, ScoredInstance};
use distill_core::filtering::{self, structural_filter, FilterStrategy, RewardRecord, RewardStage};
use distill_core::prompts::{self, PromptTask};
use distill_core::retrieval::{build_index, EmbeddingIndex, IndexItem};
use distill_core::synthesis::{DemoPool, SynthesizedRecord};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn small_seed() -> Vec<SeedExample> {
    corpus::load_seed(&common::fixture("seed_small.jsonl")).unwrap()
}

fn seed_pool(embedder: &dyn Backend) -> DemoPool {
    let seed = small_seed();
    let items: Vec<IndexItem> = seed.iter().map(|e| IndexItem::from_seed(e, &[])).collect();
    DemoPool::new(build_index(&items, embedder).unwrap(), seed)
}

fn reward_exactness() -> Check {
    let r = RewardRecord::new(common::FEW, common::ZERO);
    ensure(r.s_avg == 2.0771484375, || format!("in-memory average {}", r.s_avg))?;
    let p = common::puzzle_reward_project();
    p.ok(&["filter", "--strategy", "average"]);
    let row = common::audit_row(&p.work(), "average");
    let got = row["scores"]["s_avg"].as_f64();
    ensure(got == Some(2.0771484375), || format!("audit s_avg {got:?}"))?;
    ensure(row["decision"] == "keep", || format!("decision {}", row["decision"]))?;
    Ok("s_avg = 2.0771484375 in memory and through the HTTP reward cassette".into())
}

fn random_record(i: usize, rng: &mut ChaCha8Rng) -> SynthesizedRecord {
    let steps = rng.gen_range(0..5);
    let body: Vec<String> = (0..steps)
        .map(|j| format!(r#"{{"statement":"s{i}.{j}","evidence":"e{j}","verification":{}}}"#, rng.gen_bool(0.5)))
        .collect();
    let ucot = if rng.gen_ratio(1, 10) { "no json here".to_string() } else { format!(r#"{{"cot_steps":[{}]}}"#, body.join(",")) };
    let qp = match rng.gen_range(0..10) {
        0 => "[]".to_string(),
        1 => "[\"unterminated".to_string(),
        _ => r#"["c1","c2"]"#.to_string(),
    };
    let x = QuestionInstance { id: format!("r{i:04}"), question: format!("question {i}"), options: vec![], gold_answer: None, cot: None };
    SynthesizedRecord::from_raw(x, qp, ucot, vec![])
}

fn filtering_laws() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let records: Vec<SynthesizedRecord> = (0..1000).map(|i| random_record(i, &mut rng)).collect();
    let mock = MockBackend::new("emb", MockSettings::default());
    let pool = seed_pool(&mock);
    let asked = Arc::new(Mutex::new(Vec::<String>::new()));
    let log = asked.clone();
    // Scores on a coarse lattice so zero scores and zero sums occur.
    let table: HashMap<String, (f64, f64)> = records
        .iter()
        .map(|r| (r.instance.question.clone(), (rng.gen_range(-3..=3) as f64 * 0.5, rng.gen_range(-3..=3) as f64 * 0.5)))
        .collect();
    let reward = ScriptedBackend::new("rm").on_reward(move |ctx, _| {
        let q = prompts::section(&ctx[1].content, "Input").unwrap().trim().to_string();
        log.lock().unwrap().push(q.clone());
        let (f, z) = table[&q];
        Ok(if ctx[0].content.contains("###Examples###") { f } else { z })
    });
    let stage = RewardStage { backend: &reward, pool: &pool, instruction: "I", threshold: 0.0 };
    let report = filtering::run_filter(&records, Some(&stage));

    let survivors: HashSet<String> =
        records.iter().filter(|r| structural_filter(r).kept()).map(|r| r.instance.question.clone()).collect();
    let asked = asked.lock().unwrap().clone();
    ensure(asked.len() == 2 * survivors.len(), || format!("{} reward calls for {} survivors", asked.len(), survivors.len()))?;
    ensure(asked.iter().all(|q| survivors.contains(q)), || "reward call for a structurally rejected record".into())?;

    let ids = |s| report.kept_examples(s, 0.0).iter().map(|e| e.id().to_string()).collect::<HashSet<_>>();
    let structural = ids(FilterStrategy::StructureOnly);
    for s in [FilterStrategy::ZeroShot, FilterStrategy::FewShot, FilterStrategy::Average] {
        ensure(ids(s).is_subset(&structural), || format!("{s} keeps a record outside the structural set"))?;
    }
    let avg = ids(FilterStrategy::Average);
    let few = ids(FilterStrategy::FewShot);
    let (mut zero_avg, mut zero_few) = (0, 0);
    for (e, s) in &report.scored {
        let s = s.ok_or("unscored record")?;
        ensure(avg.contains(e.id()) == (s.s_few + s.s_zero > 0.0), || format!("membership law broken for {}", e.id()))?;
        if s.s_avg == 0.0 {
            zero_avg += 1;
            ensure(!avg.contains(e.id()), || "zero average kept".into())?;
        }
        if s.s_few == 0.0 {
            zero_few += 1;
            ensure(!few.contains(e.id()), || "zero few-shot score kept".into())?;
        }
    }
    ensure(zero_avg > 0 && zero_few > 0, || "no boundary cases generated".into())?;
    Ok(format!(
        "{} survivors, {} reward calls, average keeps {}, {} zero-average records dropped",
        survivors.len(),
        asked.len(),
        avg.len(),
        zero_avg
    ))
}

fn text(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 10] = ["Ann", " is ", "{left}", " of ", "[Bob]", "\"quoted\"", ", so", " not", " 3", ": yes"];
    (0..rng.gen_range(1..5)).map(|_| *PIECES.choose(rng).unwrap()).collect()
}

fn random_trace(rng: &mut ChaCha8Rng, steps: usize) -> ReasoningTrace {
    ReasoningTrace {
        steps: (0..steps).map(|_| CoTStep { statement: text(rng), evidence: text(rng), verification: rng.gen() }).collect(),
    }
}

/// Schema-valid serialization with random surface variation.
fn valid_variant(trace: &ReasoningTrace, rng: &mut ChaCha8Rng) -> String {
    let capital = rng.gen_bool(0.3);
    let items: Vec<Value> = trace
        .steps
        .iter()
        .map(|s| {
            let v = if rng.gen() { json!(s.verification) } else { json!(corpus::verification_label(s.verification)) };
            if capital {
                json!({"Statement": s.statement, "Evidence": s.evidence, "Verification": v})
            } else {
                json!({"statement": s.statement, "evidence": s.evidence, "verification": v})
            }
        })
        .collect();
    let value = match rng.gen_range(0..3) {
        0 => Value::Array(items),
        1 => json!({ "cot_steps": items }),
        _ => json!({ "CoT Parsing": items }),
    };
    let body = if rng.gen() { prompts::pretty(&value) } else { value.to_string() };
    match rng.gen_range(0..3) {
        0 => body,
        1 => format!("Here is the analysis:\n```json\n{body}\n```\nDone."),
        _ => format!("Result: {body} (end)"),
    }
}

/// A serialization that must be rejected, with its mutation class.
fn invalid_variant(trace: &ReasoningTrace, rng: &mut ChaCha8Rng) -> (&'static str, String, String) {
    let good_qp = r#"["c1"]"#.to_string();
    let canonical = prompts::pretty(&trace.to_cot_steps_json());
    match rng.gen_range(0..8) {
        0 => {
            // Cut anywhere before the closing brace of the outer object.
            let cut = rng.gen_range(1..canonical.len() - 1);
            ("truncated", good_qp, canonical[..cut].to_string())
        }
        1 => {
            let mut v = trace.to_cot_steps_json();
            let steps = v["cot_steps"].as_array_mut().unwrap();
            let i = rng.gen_range(0..steps.len());
            let key = *["statement", "evidence", "verification"].choose(rng).unwrap();
            steps[i].as_object_mut().unwrap().remove(key);
            ("missing_field", good_qp, v.to_string())
        }
        2 => {
            let mut v = trace.to_cot_steps_json();
            let i = rng.gen_range(0..trace.steps.len());
            v["cot_steps"][i]["verification"] = [json!("maybe"), json!(1), json!(null), json!("yes")].choose(rng).unwrap().clone();
            ("bad_verification", good_qp, v.to_string())
        }
        3 => {
            let mut v = trace.to_cot_steps_json();
            let i = rng.gen_range(0..trace.steps.len());
            v["cot_steps"][i]["statement"] = json!("  ");
            ("blank_statement", good_qp, v.to_string())
        }
        4 => {
            let keep = rng.gen_range(0..2);
            let short = ReasoningTrace { steps: trace.steps[..keep].to_vec() };
            ("too_few_steps", good_qp, prompts::pretty(&short.to_cot_steps_json()))
        }
        5 => {
            let body = canonical.replacen("[", "[,", 1);
            ("syntax_error", good_qp, body)
        }
        6 => ("no_json", good_qp, "I could not produce the steps for this question.".into()),
        _ => {
            let qp = ["[]", "", "[\"c1\", 3]", "[\"open"].choose(rng).unwrap().to_string();
            ("bad_qp", qp, canonical)
        }
    }
}

fn structural_fuzz() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let x = QuestionInstance { id: "f".into(), question: "q".into(), options: vec![], gold_answer: None, cot: None };
    let mut per_class: HashMap<&str, usize> = HashMap::new();
    let (mut invalid, mut valid) = (0, 0);
    for _ in 0..12_000 {
        let steps = rng.gen_range(2..6);
        let trace = random_trace(&mut rng, steps);
        let (class, qp, ucot) = invalid_variant(&trace, &mut rng);
        let r = SynthesizedRecord::from_raw(x.clone(), qp, ucot.clone(), vec![]);
        ensure(!structural_filter(&r).kept(), || format!("{class} mutation kept: {ucot}"))?;
        *per_class.entry(class).or_default() += 1;
        invalid += 1;

        let ucot = valid_variant(&trace, &mut rng);
        let r = SynthesizedRecord::from_raw(x.clone(), r#"["c1","c2"]"#.into(), ucot.clone(), vec![]);
        ensure(structural_filter(&r).kept(), || format!("valid trace rejected ({:?}): {ucot}", r.error))?;
        let parsed = r.trace.as_ref().unwrap();
        ensure(*parsed == trace, || format!("valid trace parsed differently: {ucot}"))?;
        valid += 1;
    }
    ensure(per_class.len() == 8, || format!("classes exercised: {per_class:?}"))?;
    Ok(format!("{invalid} mutated traces rejected across {} classes, {valid} valid variants kept", per_class.len()))
}

fn unit(v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn retrieval_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let vectors: Vec<Vec<f32>> = (0..200).map(|_| unit((0..32).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
    let table: HashMap<String, Vec<f32>> = vectors.iter().enumerate().map(|(i, v)| (format!("v{i}"), v.clone())).collect();
    let embedder = ScriptedBackend::new("table").on_embed(move |t| Ok(table[t].clone()));
    let items: Vec<IndexItem> = (0..200).map(|i| IndexItem { id: format!("id{i}"), text: format!("v{i}"), tags: vec![] }).collect();
    let index = build_index(&items, &embedder).map_err(|e| e.to_string())?;
    let scan = |index: &EmbeddingIndex, q: &[f32], k: usize| -> Vec<String> {
        let mut all: Vec<(usize, f64)> = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i, v.iter().zip(q).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>()))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.iter().take(k).map(|(i, _)| index.ids()[*i].clone()).collect()
    };
    let mut queries = 0;
    for _ in 0..100 {
        let q = unit((0..32).map(|_| rng.gen_range(-1.0..1.0)).collect());
        for k in [1, 5, 10] {
            let got: Vec<String> = index.top_k_vector(&q, k, &HashSet::new()).into_iter().map(|h| h.id).collect();
            ensure(got == scan(&index, &q, k), || format!("top-{k} differs from full scan"))?;
            queries += 1;
        }
    }
    let mut worst = 0.0f64;
    for i in 0..200 {
        let hits = index.top_k(&embedder, &format!("v{i}"), 1, &HashSet::new()).map_err(|e| e.to_string())?;
        ensure(hits[0].id == format!("id{i}"), || format!("self-retrieval of id{i} returned {}", hits[0].id))?;
        worst = worst.max((hits[0].score - 1.0).abs());
    }
    ensure(worst <= 1e-6, || format!("self-retrieval score off by {worst}"))?;
    Ok(format!("{queries} top-k queries match the full scan; max |self score - 1| = {worst:.1e}"))
}

fn counting() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5000);
    for n in [0usize, 1, 250, 5000] {
        let records: Vec<SeedExample> = (0..n)
            .map(|i| {
                let steps = rng.gen_range(1..9);
                SeedExample {
                    instance: QuestionInstance { id: format!("t{i}"), question: format!("q{i}"), options: vec![], gold_answer: None, cot: None },
                    question_parsing: vec![format!("c{i}")],
                    trace: random_trace(&mut rng, steps),
                }
            })
            .collect();
        let total: usize = records.iter().map(|r| r.trace.steps.len()).sum();
        let path = dir.path().join(format!("filtered_{n}.jsonl"));
        corpus::write_seed(&path, &records).map_err(|e| e.to_string())?;
        let loaded = filtering::load_filtered(&path).map_err(|e| e.to_string())?;
        let stats = corpus::compute_stats(loaded.iter().map(|r| &r.trace));
        ensure((stats.qp_count, stats.cp_count, stats.cv_count) == (n, n, total), || format!("stats {stats:?} for {n} traces"))?;
        for (sub, want) in [(SftSubtask::Qp, n), (SftSubtask::Cp, n), (SftSubtask::Cv, total)] {
            let out = dir.path().join(format!("{n}_{sub}.jsonl"));
            corpus::export_sft(&loaded, sub, &out).map_err(|e| e.to_string())?;
            let lines = std::fs::read_to_string(&out).unwrap().lines().filter(|l| !l.starts_with('#')).count();
            ensure(lines == want, || format!("{sub}: {lines} lines for {n} traces, expected {want}"))?;
        }
    }
    Ok("QP = CP = traces and CV = total steps for sets of 0, 1, 250 and 5000 traces".into())
}

fn puzzle_end_to_end() -> Check {
    let gold = common::puzzle();
    let g = gold.clone();
    let agent: Arc<dyn Backend> = Arc::new(ScriptedBackend::new("oracle").on_generate(move |msgs, _| {
        let steps = &g.trace.steps;
        Ok(match PromptTask::detect(msgs) {
            Some(PromptTask::QuestionParsing) => serde_json::to_string(&g.question_parsing).unwrap(),
            Some(PromptTask::CotParsing) => serde_json::to_string(&g.trace.statements()).unwrap(),
            Some(PromptTask::Evidence { .. }) => serde_json::to_string(&steps.iter().map(|s| &s.evidence).collect::<Vec<_>>()).unwrap(),
            Some(PromptTask::Verify { .. }) => {
                serde_json::to_string(&steps.iter().map(|s| corpus::verification_label(s.verification)).collect::<Vec<_>>()).unwrap()
            }
            other => return Err(distill_core::backends::BackendError::Protocol(format!("unexpected {other:?}"))),
        })
    }));
    let embedder: Arc<dyn Backend> = Arc::new(MockBackend::new("emb", MockSettings::default()));
    let pool = Arc::new(seed_pool(embedder.as_ref()));
    let cascade = Cascade::new(Agents::new(agent.clone(), agent.clone(), agent), embedder, pool, 3, GenParams::default());
    let out = cascade.run_pipeline(&gold.instance);
    ensure(out.flags.is_empty(), || format!("flags {:?}", out.flags))?;
    ensure(out.qp.len() == 4 && out.qp == gold.question_parsing, || format!("conditions {:?}", out.qp))?;
    ensure(out.statements.len() == 4 && out.steps() == gold.trace.steps, || "steps differ from gold".into())?;
    ensure(out.verdicts == [true, true, false, false], || format!("verdicts {:?}", out.verdicts))?;
    let pred = evalharness::decode_scored(&out.to_prediction_json()).map_err(|e| e.to_string())?;
    let gold_scored = ScoredInstance { id: gold.id().into(), question_parsing: gold.question_parsing.clone(), steps: gold.trace.steps.clone() };
    let r = evalharness::evaluate(&[pred], &[gold_scored], &MatchPolicy::default()).map_err(|e| e.to_string())?;
    let scores = (r.ques_f1, r.stmt_f1, r.evid_f1, r.reason_f1);
    ensure(scores == (1.0, 1.0, 1.0, 1.0), || format!("scores {scores:?}"))?;
    Ok("4 conditions, 4 statements, verdicts [True, True, False, False]; all four F1 = 1.0".into())
}

/// Largest matching over all injective assignments.
fn exhaustive(n_pred: usize, n_gold: usize, edge: &dyn Fn(usize, usize) -> bool) -> usize {
    fn go(p: usize, n: usize, used: &mut [bool], edge: &dyn Fn(usize, usize) -> bool) -> usize {
        if p == n {
            return 0;
        }
        let mut best = go(p + 1, n, used, edge);
        for g in 0..used.len() {
            if !used[g] && edge(p, g) {
                used[g] = true;
                best = best.max(1 + go(p + 1, n, used, edge));
                used[g] = false;
            }
        }
        best
    }
    go(0, n_pred, &mut vec![false; n_gold], edge)
}

fn metric_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let words = ["a", "b", "c", "A.", "b  c", "a b"];
    let policy = MatchPolicy::default();
    let norm = |s: &str| policy.normalization.apply(s);
    let step = |rng: &mut ChaCha8Rng| CoTStep {
        statement: words.choose(rng).unwrap().to_string(),
        evidence: words.choose(rng).unwrap().to_string(),
        verification: rng.gen(),
    };
    let cases = 600;
    for case in 0..cases {
        let pred: Vec<CoTStep> = (0..rng.gen_range(0..=6)).map(|_| step(&mut rng)).collect();
        let gold: Vec<CoTStep> = (0..rng.gen_range(0..=6)).map(|_| step(&mut rng)).collect();
        for level in [CotLevel::Statement, CotLevel::Evidence, CotLevel::Reasoning] {
            let edge = |i: usize, j: usize| {
                let (p, g) = (&pred[i], &gold[j]);
                norm(&p.statement) == norm(&g.statement)
                    && (level == CotLevel::Statement || norm(&p.evidence) == norm(&g.evidence))
                    && (level != CotLevel::Reasoning || p.verification == g.verification)
            };
            let tp = match_steps(&pred, &gold, &policy, level).tp;
            ensure(tp == exhaustive(pred.len(), gold.len(), &edge), || format!("case {case}: {level:?} matching differs from oracle"))?;
        }
        let qp_pred: Vec<String> = (0..rng.gen_range(0..=6)).map(|_| words.choose(&mut rng).unwrap().to_string()).collect();
        let qp_gold: Vec<String> = (0..rng.gen_range(0..=6)).map(|_| words.choose(&mut rng).unwrap().to_string()).collect();
        let tp = match_sets(&qp_pred, &qp_gold, &policy).tp;
        ensure(tp == exhaustive(qp_pred.len(), qp_gold.len(), &|i, j| norm(&qp_pred[i]) == norm(&qp_gold[j])), || {
            format!("case {case}: set matching differs from oracle")
        })?;

        let p = [ScoredInstance { id: "x".into(), question_parsing: qp_pred, steps: pred }];
        let g = [ScoredInstance { id: "x".into(), question_parsing: qp_gold, steps: gold }];
        let r = evalharness::evaluate(&p, &g, &policy).map_err(|e| e.to_string())?;
        ensure(r.reason_f1 <= r.evid_f1 && r.evid_f1 <= r.stmt_f1, || format!("case {case}: level order broken"))?;
        for x in [&p, &g] {
            let s = evalharness::evaluate(x, x, &policy).map_err(|e| e.to_string())?;
            ensure((s.ques_f1, s.stmt_f1, s.evid_f1, s.reason_f1) == (1.0, 1.0, 1.0, 1.0), || format!("case {case}: self score below 1"))?;
        }
    }
    Ok(format!("{cases} randomized cases: level order, self score 1.0, matching equals the exhaustive oracle"))
}

fn determinism() -> Check {
    let p = common::Project::new(None);
    for args in common::PIPELINE {
        let out = p.run(args);
        ensure(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))?;
    }
    let first = common::artifacts(&p.work());
    common::clear_artifacts(&p.work());
    for args in common::PIPELINE {
        let out = p.run(args);
        ensure(out.status.success(), || format!("rerun {args:?}: {}", String::from_utf8_lossy(&out.stderr)))?;
    }
    let second = common::artifacts(&p.work());
    ensure(first == second, || "artifacts differ between runs".into())?;
    let mut roles = 0;
    for c in ["induce", "synthesize", "filter", "export", "infer", "eval", "stats"] {
        for (role, s) in p.manifest(c)["backend_calls"].as_object().unwrap() {
            ensure(s["calls"] == 0, || format!("{c}: {role} made {} calls on the rerun", s["calls"]))?;
            roles += 1;
        }
    }
    Ok(format!("{} artifacts byte-identical; 0 backend calls across {roles} role uses on the rerun", first.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("reward averaging exactness", reward_exactness, Duration::from_secs(5)),
        ("filtering laws on 1000 records", filtering_laws, Duration::from_secs(5)),
        ("structural filter fuzz", structural_fuzz, Duration::from_secs(30)),
        ("retrieval oracle equivalence", retrieval_oracle, Duration::from_secs(5)),
        ("counting semantics", counting, Duration::from_secs(10)),
        ("worked puzzle end-to-end", puzzle_end_to_end, Duration::from_secs(10)),
        ("metric properties", metric_properties, Duration::from_secs(60)),
        ("determinism", determinism, Duration::from_secs(120)),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let elapsed = t0.elapsed();
        let result = match result {
            Ok(detail) if elapsed > *budget => Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS [{}] {name} ({elapsed:.2?}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name} ({elapsed:.2?}): {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
