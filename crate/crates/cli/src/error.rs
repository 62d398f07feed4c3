use std::fmt;

use serde_json::json;

use distill_core::backends::BackendError;
use distill_core::corpus::CorpusError;
use distill_core::evalharness::EvalError;
use distill_core::induction::InductionError;
use distill_core::retrieval::RetrievalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    MissingArtifact,
    Locked,
    Data,
    Backend,
    Io,
}

impl ErrorKind {
    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::MissingArtifact => "missing_artifact",
            ErrorKind::Locked => "workdir_locked",
            ErrorKind::Data => "data",
            ErrorKind::Backend => "backend",
            ErrorKind::Io => "io",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::MissingArtifact => 3,
            ErrorKind::Locked => 4,
            ErrorKind::Data => 5,
            ErrorKind::Backend => 6,
            ErrorKind::Io => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    /// Subcommand that produces the missing input.
    pub requires: Option<&'static str>,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError { kind, message: message.into(), requires: None }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn missing(path: &std::path::Path, requires: &'static str) -> Self {
        CliError {
            kind: ErrorKind::MissingArtifact,
            message: format!("{} not found; run `distill {requires}` first", path.display()),
            requires: Some(requires),
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut e = json!({ "kind": self.kind.name(), "message": self.message });
        if let Some(r) = self.requires {
            e["requires"] = json!(r);
        }
        json!({ "error": e })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let kind = match e {
            CorpusError::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Data,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        let kind = match e {
            BackendError::Config(_) => ErrorKind::Config,
            _ => ErrorKind::Backend,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        CliError::new(ErrorKind::Data, e.to_string())
    }
}

impl From<InductionError> for CliError {
    fn from(e: InductionError) -> Self {
        match e {
            InductionError::Config(m) => CliError::config(m),
            InductionError::Backend(b) => b.into(),
            InductionError::Io(c) => c.into(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(c) => c.into(),
            EvalError::Policy(m) => CliError::config(m),
            other => CliError::new(ErrorKind::Data, other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(ErrorKind::Io, e.to_string())
    }
}
