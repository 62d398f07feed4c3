//! Wrappers composed around a concrete backend:
//! cache -> retry -> in-flight limit -> meter -> backend.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::{check_messages, check_text, Backend, BackendError, BackendProfile, ChatMessage, GenParams};
use crate::util::sha256_hex;

/// Bumped whenever the cache entry layout or key derivation changes.
pub const CACHE_SCHEMA_VERSION: u32 = 1;

/// Counts calls that reach the wrapped backend and tracks concurrency.
pub struct Metered {
    inner: Arc<dyn Backend>,
    calls: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

struct InFlight<'a>(&'a Metered);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Metered {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        Metered { inner, calls: AtomicU64::new(0), in_flight: AtomicUsize::new(0), max_in_flight: AtomicUsize::new(0) }
    }

    /// Requests issued to the underlying backend so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneous requests observed.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn enter(&self) -> InFlight<'_> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlight(self)
    }
}

impl Backend for Metered {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn generate(&self, messages: &[ChatMessage], params: &GenParams) -> Result<String, BackendError> {
        let _g = self.enter();
        self.inner.generate(messages, params)
    }

    fn score_completion(&self, prompt: &[ChatMessage], completion: &str) -> Result<f64, BackendError> {
        let _g = self.enter();
        self.inner.score_completion(prompt, completion)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let _g = self.enter();
        self.inner.embed(text)
    }

    fn reward(&self, context: &[ChatMessage], response: &str) -> Result<f64, BackendError> {
        let _g = self.enter();
        self.inner.reward(context, response)
    }
}

/// Blocks callers so that at most `max` requests are outstanding.
pub struct ConcurrencyLimit {
    inner: Arc<dyn Backend>,
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a ConcurrencyLimit);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|p| p.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

impl ConcurrencyLimit {
    pub fn new(inner: Arc<dyn Backend>, max: usize) -> Self {
        assert!(max >= 1, "in-flight bound must be at least 1");
        ConcurrencyLimit { inner, max, active: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|p| p.into_inner());
        while *active >= self.max {
            active = self.freed.wait(active).unwrap_or_else(|p| p.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Backend for ConcurrencyLimit {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn generate(&self, messages: &[ChatMessage], params: &GenParams) -> Result<String, BackendError> {
        let _p = self.acquire();
        self.inner.generate(messages, params)
    }

    fn score_completion(&self, prompt: &[ChatMessage], completion: &str) -> Result<f64, BackendError> {
        let _p = self.acquire();
        self.inner.score_completion(prompt, completion)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let _p = self.acquire();
        self.inner.embed(text)
    }

    fn reward(&self, context: &[ChatMessage], response: &str) -> Result<f64, BackendError> {
        let _p = self.acquire();
        self.inner.reward(context, response)
    }
}

/// Retries transient failures up to `budget` extra attempts with
/// exponential backoff.
pub struct RetryingBackend {
    inner: Arc<dyn Backend>,
    budget: u32,
    backoff: Duration,
}

impl RetryingBackend {
    pub fn new(inner: Arc<dyn Backend>, budget: u32, backoff: Duration) -> Self {
        RetryingBackend { inner, budget, backoff }
    }

    fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 0u32;
        loop {
            match op() {
                Err(e) if e.is_transient() && attempt < self.budget => {
                    log::debug!("transient backend failure (attempt {}): {e}", attempt + 1);
                    if !self.backoff.is_zero() {
                        std::thread::sleep(self.backoff.saturating_mul(1 << attempt.min(6)));
                    }
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

impl Backend for RetryingBackend {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn generate(&self, messages: &[ChatMessage], params: &GenParams) -> Result<String, BackendError> {
        self.run(|| self.inner.generate(messages, params))
    }

    fn score_completion(&self, prompt: &[ChatMessage], completion: &str) -> Result<f64, BackendError> {
        self.run(|| self.inner.score_completion(prompt, completion))
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        self.run(|| self.inner.embed(text))
    }

    fn reward(&self, context: &[ChatMessage], response: &str) -> Result<f64, BackendError> {
        self.run(|| self.inner.reward(context, response))
    }
}

/// Memoizes successful results in memory and, when a directory is given, on
/// disk (one JSON file per key). Keys hash the schema version, the backend
/// identity, the operation and its full input.
pub struct CachedBackend {
    inner: Arc<dyn Backend>,
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, Value>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CachedBackend {
    pub fn new(inner: Arc<dyn Backend>, dir: Option<PathBuf>) -> Self {
        CachedBackend { inner, dir, memory: Mutex::new(HashMap::new()), hits: AtomicU64::new(0), misses: AtomicU64::new(0) }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn key(&self, op: &str, payload: &Value) -> String {
        let material = json!({
            "schema": CACHE_SCHEMA_VERSION,
            "model": self.inner.identity(),
            "op": op,
            "input": payload,
        });
        sha256_hex(material.to_string().as_bytes())
    }

    fn path_for(dir: &Path, key: &str) -> PathBuf {
        dir.join(&key[..2]).join(format!("{key}.json"))
    }

    fn lookup(&self, key: &str) -> Option<Value> {
        if let Some(v) = self.memory.lock().unwrap_or_else(|p| p.into_inner()).get(key) {
            return Some(v.clone());
        }
        let dir = self.dir.as_ref()?;
        let text = fs::read_to_string(Self::path_for(dir, key)).ok()?;
        let entry: Value = serde_json::from_str(&text).ok()?;
        let value = entry.get("value")?.clone();
        self.memory.lock().unwrap_or_else(|p| p.into_inner()).insert(key.to_string(), value.clone());
        Some(value)
    }

    fn store(&self, key: &str, op: &str, value: &Value) -> Result<(), BackendError> {
        self.memory.lock().unwrap_or_else(|p| p.into_inner()).insert(key.to_string(), value.clone());
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = Self::path_for(dir, key);
        let parent = path.parent().expect("cache path has a parent");
        let err = |e: std::io::Error| BackendError::Cache(format!("{}: {e}", path.display()));
        fs::create_dir_all(parent).map_err(err)?;
        let entry = json!({ "op": op, "model": self.inner.identity(), "value": value });
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(err)?;
        tmp.write_all(entry.to_string().as_bytes()).map_err(err)?;
        tmp.persist(&path).map_err(|e| err(e.error))?;
        Ok(())
    }

    fn cached<T>(
        &self,
        op: &str,
        payload: Value,
        decode: impl Fn(&Value) -> Option<T>,
        encode: impl Fn(&T) -> Value,
        call: impl FnOnce() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let key = self.key(op, &payload);
        if let Some(v) = self.lookup(&key).as_ref().and_then(&decode) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(v);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let result = call()?;
        self.store(&key, op, &encode(&result))?;
        Ok(result)
    }
}

impl Backend for CachedBackend {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn generate(&self, messages: &[ChatMessage], params: &GenParams) -> Result<String, BackendError> {
        check_messages(messages)?;
        params.validate()?;
        self.cached(
            "generate",
            json!({ "messages": messages, "params": params }),
            |v| v.as_str().map(str::to_string),
            |s| Value::from(s.as_str()),
            || self.inner.generate(messages, params),
        )
    }

    fn score_completion(&self, prompt: &[ChatMessage], completion: &str) -> Result<f64, BackendError> {
        check_messages(prompt)?;
        check_text("completion", completion)?;
        self.cached(
            "score_completion",
            json!({ "messages": prompt, "completion": completion }),
            Value::as_f64,
            |x| json!(x),
            || self.inner.score_completion(prompt, completion),
        )
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        check_text("text", text)?;
        self.cached(
            "embed",
            json!({ "text": text }),
            |v| v.as_array().map(|a| a.iter().filter_map(|x| x.as_f64().map(|f| f as f32)).collect()),
            |v: &Vec<f32>| json!(v),
            || self.inner.embed(text),
        )
    }

    fn reward(&self, context: &[ChatMessage], response: &str) -> Result<f64, BackendError> {
        check_messages(context)?;
        check_text("response", response)?;
        self.cached(
            "reward",
            json!({ "messages": context, "response": response }),
            Value::as_f64,
            |x| json!(x),
            || self.inner.reward(context, response),
        )
    }
}

/// A fully layered backend plus handles on its cache and request meter.
#[derive(Clone)]
pub struct BackendStack {
    pub backend: Arc<dyn Backend>,
    pub cache: Arc<CachedBackend>,
    pub meter: Arc<Metered>,
}

impl BackendStack {
    pub fn new(inner: Arc<dyn Backend>, profile: &BackendProfile) -> Self {
        let meter = Arc::new(Metered::new(inner));
        let limited: Arc<dyn Backend> = Arc::new(ConcurrencyLimit::new(meter.clone(), profile.max_in_flight.max(1)));
        let retrying: Arc<dyn Backend> = Arc::new(RetryingBackend::new(
            limited,
            profile.retry_budget,
            Duration::from_millis(profile.retry_backoff_ms),
        ));
        let cache = Arc::new(CachedBackend::new(retrying, profile.cache_dir.clone()));
        BackendStack { backend: cache.clone(), cache, meter }
    }
}

impl std::ops::Deref for BackendStack {
    type Target = dyn Backend;

    fn deref(&self) -> &Self::Target {
        self.backend.as_ref()
    }
}
