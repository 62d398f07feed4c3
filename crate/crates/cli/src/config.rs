//! Run configuration: one versioned JSON file per pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use distill_core::backends::{BackendProfile, GenParams};
use distill_core::evalharness::MatchPolicy;
use distill_core::filtering::FilterStrategy;
use distill_core::induction::Normalization;
use distill_core::util;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

fn default_k() -> usize {
    5
}

fn default_candidates() -> usize {
    4
}

fn default_strategy() -> String {
    "average".into()
}

fn default_temperature() -> f64 {
    0.1
}

fn default_max_tokens() -> u32 {
    2048
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Backends {
    pub generation: BackendProfile,
    pub embedding: BackendProfile,
    /// Needed by reward strategies and the induction fallback score.
    #[serde(default)]
    pub reward: Option<BackendProfile>,
    /// Defaults to the generation profile.
    #[serde(default)]
    pub judge: Option<BackendProfile>,
    /// Inference agents; each defaults to the generation profile.
    #[serde(default)]
    pub parser: Option<BackendProfile>,
    #[serde(default)]
    pub decomposer: Option<BackendProfile>,
    #[serde(default)]
    pub verifier: Option<BackendProfile>,
    /// Separate backend for the verdict stage; defaults to `verifier`.
    #[serde(default)]
    pub verifier_verify: Option<BackendProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub seed: PathBuf,
    pub pool: PathBuf,
    /// Test questions with CoT text; also the gold file for `eval`.
    #[serde(default)]
    pub test: Option<PathBuf>,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub backends: Backends,
    pub paths: Paths,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_candidates")]
    pub n_candidates: usize,
    #[serde(default = "default_strategy")]
    pub strategy: String,
    #[serde(default)]
    pub threshold: f64,
    #[serde(default)]
    pub policy: MatchPolicy,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: u64,
}

/// Backend roles, in manifest order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Generation,
    Embedding,
    Reward,
    Judge,
    Parser,
    Decomposer,
    Verifier,
    VerifierVerify,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Generation => "generation",
            Role::Embedding => "embedding",
            Role::Reward => "reward",
            Role::Judge => "judge",
            Role::Parser => "parser",
            Role::Decomposer => "decomposer",
            Role::Verifier => "verifier",
            Role::VerifierVerify => "verifier_verify",
        }
    }
}

impl RunConfig {
    /// Read, resolve relative paths against the config's directory and
    /// validate.
    pub fn load(path: &Path) -> Result<(RunConfig, String), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_slice(&bytes).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let hash = cfg.hash();
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve(&base);
        cfg.validate()?;
        Ok((cfg, hash))
    }

    /// SHA-256 of the canonical serialization, taken before path resolution
    /// so it does not depend on where the config lives.
    pub fn hash(&self) -> String {
        util::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.seed);
        fix(&mut self.paths.pool);
        fix(&mut self.paths.workdir);
        if let Some(t) = &mut self.paths.test {
            fix(t);
        }
        for p in self.profiles_mut() {
            if let Some(c) = &mut p.cache_dir {
                fix(c);
            }
            if let Some(c) = &mut p.cassette {
                fix(c);
            }
        }
    }

    fn profiles_mut(&mut self) -> Vec<&mut BackendProfile> {
        let b = &mut self.backends;
        let mut out = vec![&mut b.generation, &mut b.embedding];
        for p in [&mut b.reward, &mut b.judge, &mut b.parser, &mut b.decomposer, &mut b.verifier, &mut b.verifier_verify] {
            if let Some(p) = p.as_mut() {
                out.push(p);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for (name, p) in [("seed", &self.paths.seed), ("pool", &self.paths.pool)] {
            if !p.exists() {
                return Err(CliError::config(format!("paths.{name}: {} does not exist", p.display())));
            }
        }
        if let Some(t) = &self.paths.test {
            if !t.exists() {
                return Err(CliError::config(format!("paths.test: {} does not exist", t.display())));
            }
        }
        self.strategy()?;
        self.params()?;
        self.policy.validate()?;
        if self.n_candidates < 2 {
            return Err(CliError::config("n_candidates must be at least 2"));
        }
        for role in [Role::Generation, Role::Embedding, Role::Reward, Role::Judge] {
            if let Some(p) = self.profile(role) {
                p.validate().map_err(|e| CliError::config(format!("backends.{}: {e}", role.name())))?;
            }
        }
        Ok(())
    }

    pub fn strategy(&self) -> Result<FilterStrategy, CliError> {
        self.strategy.parse().map_err(CliError::config)
    }

    pub fn params(&self) -> Result<GenParams, CliError> {
        GenParams::new(self.temperature, self.max_tokens, Some(self.seed)).map_err(|e| CliError::config(e.to_string()))
    }

    /// Profile for a role after defaults; `None` only for an unset reward
    /// backend.
    pub fn profile(&self, role: Role) -> Option<&BackendProfile> {
        let b = &self.backends;
        match role {
            Role::Generation => Some(&b.generation),
            Role::Embedding => Some(&b.embedding),
            Role::Reward => b.reward.as_ref(),
            Role::Judge => b.judge.as_ref().or(Some(&b.generation)),
            Role::Parser => b.parser.as_ref().or(Some(&b.generation)),
            Role::Decomposer => b.decomposer.as_ref().or(Some(&b.generation)),
            Role::Verifier => b.verifier.as_ref().or(Some(&b.generation)),
            Role::VerifierVerify => b.verifier_verify.as_ref().or(b.verifier.as_ref()).or(Some(&b.generation)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> serde_json::Value {
        json!({
            "schema_version": 1,
            "backends": {"generation": {"kind": "mock", "model": "g"}, "embedding": {"kind": "mock", "model": "e"}},
            "paths": {"seed": "seed.jsonl", "pool": "pool.jsonl", "workdir": "work"},
        })
    }

    #[test]
    fn defaults_fill_in() {
        let cfg: RunConfig = serde_json::from_value(base()).unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.strategy().unwrap(), FilterStrategy::Average);
        assert_eq!(cfg.profile(Role::Judge).unwrap().model, "g");
        assert!(cfg.profile(Role::Reward).is_none());
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v = base();
        v["topk"] = json!(3);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn hash_ignores_location_but_not_content() {
        let a: RunConfig = serde_json::from_value(base()).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.k = 3;
        assert_ne!(a.hash(), b.hash());
    }
}
