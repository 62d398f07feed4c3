//! One function per subcommand. Each returns a JSON summary for stdout and
//! writes its manifest.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};

use distill_core::cascade::{self, Agents, Cascade};
use distill_core::corpus::{self, SftSubtask};
use distill_core::evalharness;
use distill_core::filtering::{self, FilterStrategy, RewardStage};
use distill_core::induction::{self, InductionBackends, InductionConfig};
use distill_core::prompts::PromptKind;
use distill_core::synthesis::{self, Synthesizer};

use crate::config::Role;
use crate::error::CliError;
use crate::workspace::Workspace;

/// Induce task prompts for QP and UCoT (or just `only`).
pub fn induce(ws: &Workspace, only: Option<PromptKind>) -> Result<Value, CliError> {
    let seed = ws.load_seed()?;
    let cfg = &ws.config;
    let gen = ws.backend(Role::Generation)?;
    let judge = ws.backend(Role::Judge)?;
    // Without a reward profile the generation backend answers reward calls.
    let rewarder = match cfg.profile(Role::Reward) {
        Some(_) => ws.backend(Role::Reward)?,
        None => gen.clone(),
    };
    let backends = InductionBackends {
        generator: gen.as_ref(),
        scorer: gen.as_ref(),
        rewarder: rewarder.as_ref(),
        judge: judge.as_ref(),
    };
    let kinds = match only {
        Some(k) => vec![k],
        None => vec![PromptKind::Qp, PromptKind::UCot],
    };
    let mut outputs = Vec::new();
    let mut summary = serde_json::Map::new();
    for kind in kinds {
        let mut ic = InductionConfig::new(kind, cfg.n_candidates);
        ic.normalization = cfg.normalization;
        ic.seed = cfg.seed;
        ic.params = cfg.params()?;
        let result = induction::induce(&ic, &seed, &backends)?;
        let stem = Workspace::prompt_stem(kind);
        let ids = [
            ("generation", gen.identity()),
            ("judge", judge.identity()),
            ("reward", rewarder.identity()),
        ];
        induction::persist(&result, &ic, &ids, &ws.prompts_dir(), stem)?;
        outputs.push(ws.prompts_dir().join(format!("{stem}.txt")));
        outputs.push(ws.prompts_dir().join(format!("{stem}.json")));
        summary.insert(
            stem.into(),
            json!({
                "selected": result.selected,
                "candidates": result.candidates.len(),
                "score_path": result.score_path,
            }),
        );
    }
    ws.write_manifest("induce", json!({ "subtask": only }), &outputs)?;
    Ok(Value::Object(summary))
}

fn induced_prompt(ws: &Workspace, kind: PromptKind) -> Result<String, CliError> {
    let stem = Workspace::prompt_stem(kind);
    let path = ws.prompts_dir().join(format!("{stem}.txt"));
    ws.require(&path, "induce")?;
    ws.note_input(&path)?;
    Ok(induction::load_prompt(&ws.prompts_dir(), stem)?)
}

pub fn synthesize(ws: &Workspace, k: Option<usize>) -> Result<Value, CliError> {
    let qp_instruction = induced_prompt(ws, PromptKind::Qp)?;
    let ucot_instruction = induced_prompt(ws, PromptKind::UCot)?;
    let cfg = &ws.config;
    let k = k.unwrap_or(cfg.k);
    let seed = ws.load_seed()?;
    ws.note_input(&cfg.paths.pool)?;
    let pool_questions = corpus::load_questions(&cfg.paths.pool)?;
    let pool = Arc::new(ws.seed_pool(seed)?);
    let synthesizer = Synthesizer {
        generator: ws.backend(Role::Generation)?,
        embedder: ws.backend(Role::Embedding)?,
        pool,
        qp_instruction,
        ucot_instruction,
        k,
        params: cfg.params()?,
        leave_one_out: true,
    };
    let out = ws.synthesized_path();
    let (records, summary) = synthesis::run_synthesis(&synthesizer, &pool_questions, &out)?;
    let ok = records.iter().filter(|r| r.parse_status == synthesis::ParseStatus::Ok).count();
    ws.write_manifest("synthesize", json!({ "k": k }), &[out, ws.index_path()])?;
    Ok(json!({ "summary": summary, "parsed_ok": ok }))
}

pub fn filter(ws: &Workspace, strategy: Option<FilterStrategy>) -> Result<Value, CliError> {
    let cfg = &ws.config;
    let strategy = match strategy {
        Some(s) => s,
        None => cfg.strategy()?,
    };
    let input = ws.synthesized_path();
    ws.require(&input, "synthesize")?;
    ws.note_input(&input)?;
    let records = synthesis::load_records(&input)?;
    let report = if strategy == FilterStrategy::StructureOnly {
        filtering::run_filter(&records, None)
    } else {
        let instruction = induced_prompt(ws, PromptKind::UCot)?;
        let reward = ws.backend(Role::Reward)?;
        let pool = ws.seed_pool(ws.load_seed()?)?;
        let stage = RewardStage { backend: reward.as_ref(), pool: &pool, instruction: &instruction, threshold: cfg.threshold };
        filtering::run_filter(&records, Some(&stage))
    };
    let mut outputs = filtering::write_filter_outputs(&report, &ws.root, cfg.threshold)?;
    let report_path = ws.root.join("filter_report.json");
    let summary = json!({
        "strategy": strategy.name(),
        "threshold": cfg.threshold,
        "input": report.input,
        "structural_kept": report.structural_kept,
        "unscored": report.unscored,
        "kept": report.kept,
        "selected_kept": report.kept[strategy.name()],
    });
    let mut bytes = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    bytes.push(b'\n');
    corpus::write_atomic(&report_path, &bytes)?;
    outputs.push(report_path);
    ws.write_manifest("filter", json!({ "strategy": strategy.name() }), &outputs)?;
    Ok(summary)
}

pub fn export(
    ws: &Workspace,
    strategy: Option<FilterStrategy>,
    subtask: Option<SftSubtask>,
    out: Option<PathBuf>,
) -> Result<Value, CliError> {
    let strategy = match strategy {
        Some(s) => s,
        None => ws.config.strategy()?,
    };
    let input = ws.filtered_path(strategy);
    ws.require(&input, "filter")?;
    ws.note_input(&input)?;
    let records = filtering::load_filtered(&input)?;
    let dir = out.unwrap_or_else(|| ws.root.join("sft"));
    let subtasks = match subtask {
        Some(s) => vec![s],
        None => vec![SftSubtask::Qp, SftSubtask::Cp, SftSubtask::Cv],
    };
    let mut outputs = Vec::new();
    let mut counts = serde_json::Map::new();
    for s in subtasks {
        let path = dir.join(format!("{}_{}.jsonl", strategy.name(), s.to_string().to_lowercase()));
        let n = corpus::export_sft(&records, s, &path)?;
        counts.insert(s.to_string(), json!(n));
        outputs.push(path);
    }
    ws.write_manifest("export", json!({ "strategy": strategy.name(), "subtask": subtask.map(|s| s.to_string()) }), &outputs)?;
    Ok(json!({ "strategy": strategy.name(), "rows": counts }))
}

fn test_path(ws: &Workspace) -> Result<PathBuf, CliError> {
    ws.config.paths.test.clone().ok_or_else(|| CliError::config("paths.test is required for infer and eval"))
}

pub fn infer(ws: &Workspace, k: Option<usize>, out: Option<PathBuf>) -> Result<Value, CliError> {
    let cfg = &ws.config;
    let k = k.unwrap_or(cfg.k);
    let test = test_path(ws)?;
    ws.note_input(&test)?;
    let questions = corpus::load_questions(&test)?;
    let pool = Arc::new(ws.seed_pool(ws.load_seed()?)?);
    let agents = Agents::with_split_verifier(
        ws.backend(Role::Parser)?,
        ws.backend(Role::Decomposer)?,
        ws.backend(Role::Verifier)?,
        ws.backend(Role::VerifierVerify)?,
    );
    let cascade = Cascade::new(agents, ws.backend(Role::Embedding)?, pool, k, cfg.params()?);
    let outputs = cascade.run_batch(&questions);
    let path = out.unwrap_or_else(|| ws.predictions_path());
    cascade::write_predictions(&path, &outputs)?;
    let flagged = outputs.iter().filter(|o| !o.flags.is_empty()).count();
    ws.write_manifest("infer", json!({ "k": k }), std::slice::from_ref(&path))?;
    Ok(json!({ "instances": outputs.len(), "flagged": flagged, "predictions": ws.display(&path) }))
}

pub fn eval(ws: &Workspace, predictions: Option<PathBuf>, out: Option<PathBuf>) -> Result<(Value, String), CliError> {
    let pred = predictions.unwrap_or_else(|| ws.predictions_path());
    ws.require(&pred, "infer")?;
    let gold = test_path(ws)?;
    ws.note_input(&pred)?;
    ws.note_input(&gold)?;
    let report = evalharness::evaluate_files(&pred, &gold, &ws.config.policy)?;
    let path = out.unwrap_or_else(|| ws.root.join("eval_report.json"));
    let value = serde_json::to_value(&report).expect("report serializes");
    let mut bytes = serde_json::to_vec_pretty(&value).expect("report serializes");
    bytes.push(b'\n');
    corpus::write_atomic(&path, &bytes)?;
    ws.write_manifest("eval", json!({}), &[path])?;
    let summary = json!({
        "ques_f1": report.ques_f1,
        "stmt_f1": report.stmt_f1,
        "evid_f1": report.evid_f1,
        "reason_f1": report.reason_f1,
        "instances": report.instances,
    });
    Ok((summary, report.table()))
}

/// Counts for a dataset file: one row per trace for QP and CP, one per
/// step for CV.
pub fn stats_of(path: &Path) -> Result<Value, CliError> {
    let records = filtering::load_filtered(path)?;
    let s = corpus::compute_stats(records.iter().map(|r| &r.trace));
    Ok(json!({ "traces": s.total_traces, "QP": s.qp_count, "CP": s.cp_count, "CV": s.cv_count }))
}

pub fn stats(ws: &Workspace, strategy: Option<FilterStrategy>, file: Option<PathBuf>) -> Result<Value, CliError> {
    let path = match (file, strategy) {
        (Some(f), _) => f,
        (None, s) => {
            let s = match s {
                Some(s) => s,
                None => ws.config.strategy()?,
            };
            let p = ws.filtered_path(s);
            ws.require(&p, "filter")?;
            p
        }
    };
    ws.note_input(&path)?;
    let v = stats_of(&path)?;
    ws.write_manifest("stats", json!({ "file": ws.display(&path) }), &[])?;
    Ok(v)
}
