//! Closure-driven backend for tests and fixtures.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::{Backend, BackendError, ChatMessage, GenParams};

type GenerateFn = dyn Fn(&[ChatMessage], &GenParams) -> Result<String, BackendError> + Send + Sync;
type ScoreFn = dyn Fn(&[ChatMessage], &str) -> Result<f64, BackendError> + Send + Sync;
type EmbedFn = dyn Fn(&str) -> Result<Vec<f32>, BackendError> + Send + Sync;

/// Every capability is an optional closure; missing ones report
/// `Unsupported`. All generate requests are recorded in call order.
pub struct ScriptedBackend {
    name: String,
    generate: Option<Box<GenerateFn>>,
    score: Option<Box<ScoreFn>>,
    embed: Option<Box<EmbedFn>>,
    reward: Option<Box<ScoreFn>>,
    log: Mutex<Vec<Vec<ChatMessage>>>,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(name: &str) -> Self {
        ScriptedBackend {
            name: name.to_string(),
            generate: None,
            score: None,
            embed: None,
            reward: None,
            log: Mutex::new(Vec::new()),
            calls: AtomicU64::new(0),
        }
    }

    pub fn on_generate(
        mut self,
        f: impl Fn(&[ChatMessage], &GenParams) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        self.generate = Some(Box::new(f));
        self
    }

    pub fn on_score(mut self, f: impl Fn(&[ChatMessage], &str) -> Result<f64, BackendError> + Send + Sync + 'static) -> Self {
        self.score = Some(Box::new(f));
        self
    }

    pub fn on_embed(mut self, f: impl Fn(&str) -> Result<Vec<f32>, BackendError> + Send + Sync + 'static) -> Self {
        self.embed = Some(Box::new(f));
        self
    }

    pub fn on_reward(mut self, f: impl Fn(&[ChatMessage], &str) -> Result<f64, BackendError> + Send + Sync + 'static) -> Self {
        self.reward = Some(Box::new(f));
        self
    }

    pub fn into_arc(self) -> Arc<Self> {
        Arc::new(self)
    }

    /// Requests seen by `generate`, in call order.
    pub fn requests(&self) -> Vec<Vec<ChatMessage>> {
        self.log.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn unsupported(&self, capability: &'static str) -> BackendError {
        BackendError::Unsupported { capability, backend: self.identity() }
    }
}

impl Backend for ScriptedBackend {
    fn identity(&self) -> String {
        format!("scripted/{}", self.name)
    }

    fn generate(&self, messages: &[ChatMessage], params: &GenParams) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap_or_else(|p| p.into_inner()).push(messages.to_vec());
        match &self.generate {
            Some(f) => f(messages, params),
            None => Err(self.unsupported("generate")),
        }
    }

    fn score_completion(&self, prompt: &[ChatMessage], completion: &str) -> Result<f64, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match &self.score {
            Some(f) => f(prompt, completion),
            None => Err(self.unsupported("score_completion")),
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match &self.embed {
            Some(f) => f(text),
            None => Err(self.unsupported("embed")),
        }
    }

    fn reward(&self, context: &[ChatMessage], response: &str) -> Result<f64, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match &self.reward {
            Some(f) => f(context, response),
            None => Err(self.unsupported("reward")),
        }
    }
}
