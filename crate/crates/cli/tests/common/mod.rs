#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Output;

use serde_json::{json, Value};

use distill_core::backends::http::{write_cassette, CassetteEntry, CassetteTransport, HttpBackend, HttpReply};
use distill_core::backends::BackendProfile;
use distill_core::corpus::{self, SeedExample};
use distill_core::filtering;
use distill_core::prompts;
use distill_core::synthesis::{self, SynthesizedRecord};

pub const FEW: f64 = 1.873046875;
pub const ZERO: f64 = 2.28125;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

pub fn puzzle() -> SeedExample {
    corpus::load_seed(&fixture("group_puzzle.json")).unwrap().remove(0)
}

/// A temporary project: `distill.json` plus a `work` directory.
pub struct Project {
    pub dir: tempfile::TempDir,
}

impl Project {
    /// Mock backends for every role; `reward` replaces the reward profile.
    pub fn new(reward: Option<Value>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let reward = reward.unwrap_or_else(|| json!({"kind": "mock", "model": "rm"}));
        let config = json!({
            "schema_version": 1,
            "backends": {
                "generation": {"kind": "mock", "model": "gen", "mock": {"min_steps": 2, "ucot_malformation_rate": 0.1}},
                "embedding": {"kind": "mock", "model": "emb"},
                "reward": reward,
            },
            "paths": {
                "seed": fixture("seed_small.jsonl"),
                "pool": fixture("pool_small.jsonl"),
                "test": fixture("test_small.jsonl"),
                "workdir": "work",
            },
            "k": 3,
        });
        std::fs::write(dir.path().join("distill.json"), serde_json::to_vec_pretty(&config).unwrap()).unwrap();
        Project { dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn work(&self) -> PathBuf {
        self.path("work")
    }

    pub fn run(&self, args: &[&str]) -> Output {
        std::process::Command::new(env!("CARGO_BIN_EXE_distill"))
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }

    /// Run and require success; returns stdout.
    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    pub fn manifest(&self, command: &str) -> Value {
        serde_json::from_slice(&std::fs::read(self.work().join("manifests").join(format!("{command}.json"))).unwrap()).unwrap()
    }
}

pub const PIPELINE: [&[&str]; 7] = [
    &["induce"],
    &["synthesize"],
    &["filter", "--strategy", "average"],
    &["export", "--strategy", "average"],
    &["infer"],
    &["eval"],
    &["stats", "--strategy", "average"],
];

/// Every artifact under `work` except caches, manifests and the lock.
pub fn artifacts(work: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().to_string();
            if rel.starts_with("cache") || rel.starts_with("manifests") || rel == ".lock" {
                continue;
            }
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(work, work, &mut out);
    out.sort();
    out
}

/// Remove every artifact but keep the backend caches.
pub fn clear_artifacts(work: &Path) {
    for e in std::fs::read_dir(work).unwrap() {
        let p = e.unwrap().path();
        if p.file_name().unwrap() == "cache" {
            continue;
        }
        if p.is_dir() {
            std::fs::remove_dir_all(&p).unwrap();
        } else {
            std::fs::remove_file(&p).unwrap();
        }
    }
}

/// Project whose synthesized set is the worked puzzle record and whose reward
/// backend replays a cassette answering the few-shot and zero-shot
/// requests with the two fixed scores.
pub fn puzzle_reward_project() -> Project {
    let endpoint = "http://reward.invalid/v1";
    let project = Project::new(Some(json!({
        "kind": "http", "endpoint": endpoint, "model": "rm", "cassette": "reward_cassette.jsonl",
    })));
    let a = puzzle();
    let seed = corpus::load_seed(&fixture("seed_small.jsonl")).unwrap();
    let demo_ids: Vec<String> = seed[..3].iter().map(|e| e.id().to_string()).collect();
    let record = SynthesizedRecord::from_raw(
        a.instance.clone(),
        serde_json::to_string(&a.question_parsing).unwrap(),
        prompts::pretty(&a.trace.to_cot_steps_json()),
        demo_ids,
    );
    let work = project.work();
    synthesis::write_records(&work.join("synthesized.jsonl"), &[record]).unwrap();
    corpus::write_atomic(&work.join("prompts").join("ucot.txt"), prompts::UCOT_INSTRUCTION.as_bytes()).unwrap();

    let demos: Vec<&SeedExample> = seed[..3].iter().collect();
    let (few, zero) = filtering::build_reward_prompts(&a, &demos, prompts::UCOT_INSTRUCTION);
    let response = filtering::reward_response(&a);
    let mut profile = BackendProfile::mock("rm");
    profile.kind = distill_core::backends::BackendKind::Http;
    profile.endpoint = Some(endpoint.into());
    let http = HttpBackend::with_transport(&profile, Box::new(CassetteTransport::from_entries(vec![]))).unwrap();
    let entry = |ctx: &[distill_core::backends::ChatMessage], score: f64| CassetteEntry {
        path: "/reward".into(),
        request: http.reward_request(ctx, &response),
        response: HttpReply { status: 200, body: json!({ "score": score }) },
    };
    write_cassette(&project.path("reward_cassette.jsonl"), &[entry(&few, FEW), entry(&zero, ZERO)]).unwrap();
    project
}

/// The reward-stage audit row for a strategy.
pub fn audit_row(work: &Path, strategy: &str) -> Value {
    let audit = std::fs::read_to_string(filtering::audit_path(work)).unwrap();
    audit
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .find(|v| v["stage"] == "reward" && v["strategy"] == strategy)
        .unwrap()
}
