//! Working-directory layout, the run lock, lazily built backends and the
//! per-run manifest.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

use distill_core::backends::{self, Backend, BackendStack};
use distill_core::corpus::{self, SeedExample};
use distill_core::filtering::{self, FilterStrategy};
use distill_core::prompts::PromptKind;
use distill_core::retrieval::{self, EmbeddingIndex, IndexItem};
use distill_core::synthesis::DemoPool;
use distill_core::util;

use crate::config::{Role, RunConfig};
use crate::error::{CliError, ErrorKind};

/// Exclusive claim on a workdir, released on drop.
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(workdir)?;
        let path = workdir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkdirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = fs::read_to_string(&path).unwrap_or_default();
                Err(CliError::new(
                    ErrorKind::Locked,
                    format!(
                        "{} is in use by process {}; remove {} if that run is gone",
                        workdir.display(),
                        owner.trim(),
                        path.display()
                    ),
                ))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct Workspace {
    pub config: RunConfig,
    pub config_hash: String,
    pub root: PathBuf,
    stacks: Mutex<BTreeMap<Role, BackendStack>>,
    inputs: Mutex<BTreeMap<String, String>>,
    _lock: WorkdirLock,
}

impl Workspace {
    pub fn open(config: RunConfig, config_hash: String) -> Result<Self, CliError> {
        let root = config.paths.workdir.clone();
        let lock = WorkdirLock::acquire(&root)?;
        Ok(Workspace {
            config,
            config_hash,
            root,
            stacks: Mutex::new(BTreeMap::new()),
            inputs: Mutex::new(BTreeMap::new()),
            _lock: lock,
        })
    }

    pub fn prompt_stem(kind: PromptKind) -> &'static str {
        match kind {
            PromptKind::UCot => "ucot",
            _ => "qp",
        }
    }

    pub fn prompts_dir(&self) -> PathBuf {
        self.root.join("prompts")
    }

    pub fn index_path(&self) -> PathBuf {
        self.root.join("index").join("seed.idx")
    }

    pub fn synthesized_path(&self) -> PathBuf {
        self.root.join("synthesized.jsonl")
    }

    pub fn filtered_path(&self, s: FilterStrategy) -> PathBuf {
        filtering::strategy_path(&self.root, s)
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.root.join("predictions.jsonl")
    }

    pub fn manifest_path(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }

    /// Layered backend for a role, built on first use. Profiles without a
    /// cache directory cache under `<workdir>/cache/<role>`.
    pub fn backend(&self, role: Role) -> Result<Arc<dyn Backend>, CliError> {
        let mut stacks = self.stacks.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(s) = stacks.get(&role) {
            return Ok(s.backend.clone());
        }
        let mut profile = self
            .config
            .profile(role)
            .cloned()
            .ok_or_else(|| CliError::config(format!("backends.{} is required for this command", role.name())))?;
        if profile.cache_dir.is_none() {
            profile.cache_dir = Some(self.root.join("cache").join(role.name()));
        }
        let stack = backends::build_stack(&profile)
            .map_err(|e| CliError::config(format!("backends.{}: {e}", role.name())))?;
        let b = stack.backend.clone();
        stacks.insert(role, stack);
        Ok(b)
    }

    /// Record an input file's hash for the manifest.
    pub fn note_input(&self, path: &Path) -> Result<(), CliError> {
        let h = util::sha256_hex(&fs::read(path)?);
        self.inputs.lock().unwrap_or_else(|p| p.into_inner()).insert(self.display(path), h);
        Ok(())
    }

    /// Path relative to the workdir when inside it.
    pub fn display(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }

    pub fn require(&self, path: &Path, producer: &'static str) -> Result<(), CliError> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::missing(path, producer))
        }
    }

    pub fn load_seed(&self) -> Result<Vec<SeedExample>, CliError> {
        self.note_input(&self.config.paths.seed)?;
        Ok(corpus::load_seed(&self.config.paths.seed)?)
    }

    /// Demonstration pool over the seed set. A saved index is reused when
    /// its encoder and ids match; otherwise it is rebuilt and saved.
    pub fn seed_pool(&self, seed: Vec<SeedExample>) -> Result<DemoPool, CliError> {
        let embedder = self.backend(Role::Embedding)?;
        let path = self.index_path();
        let ids: Vec<&str> = seed.iter().map(|e| e.id()).collect();
        let reusable = EmbeddingIndex::load(&path, Some(&embedder.identity()))
            .ok()
            .filter(|idx| idx.ids().iter().map(String::as_str).eq(ids.iter().copied()));
        let index = match reusable {
            Some(idx) => idx,
            None => {
                let items: Vec<IndexItem> = seed.iter().map(|e| IndexItem::from_seed(e, &["seed"])).collect();
                let idx = retrieval::build_index(&items, embedder.as_ref())?;
                idx.save(&path)?;
                idx
            }
        };
        Ok(DemoPool::new(index, seed))
    }

    /// Write `manifests/<command>.json`.
    pub fn write_manifest(&self, command: &str, args: Value, outputs: &[PathBuf]) -> Result<PathBuf, CliError> {
        let mut out = BTreeMap::new();
        for p in outputs {
            out.insert(self.display(p), util::sha256_hex(&fs::read(p)?));
        }
        let calls: serde_json::Map<String, Value> = self
            .stacks
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .iter()
            .map(|(role, s)| {
                (
                    role.name().to_string(),
                    json!({
                        "backend": s.backend.identity(),
                        "calls": s.meter.calls(),
                        "cache_hits": s.cache.hits(),
                        "cache_misses": s.cache.misses(),
                    }),
                )
            })
            .collect();
        let inputs = self.inputs.lock().unwrap_or_else(|p| p.into_inner()).clone();
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "config_sha256": self.config_hash,
            "args": args,
            "inputs": inputs,
            "outputs": out,
            "backend_calls": calls,
        });
        let path = self.manifest_path(command);
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        corpus::write_atomic(&path, &bytes)?;
        Ok(path)
    }
}
