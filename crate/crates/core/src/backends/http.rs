//! OpenAI-compatible HTTP backend with record/replay cassettes.
//!
//! Endpoints, relative to the profile's base URL:
//!
//! | operation          | path                | request                                         | response                                  |
//! |--------------------|---------------------|-------------------------------------------------|-------------------------------------------|
//! | `generate`         | `/chat/completions` | `{model, messages, temperature, max_tokens, seed?}` | `choices[0].message.content`          |
//! | `score_completion` | `/completions`      | `{model, prompt, echo: true, logprobs: 0, max_tokens: 1, temperature: 0}` | `choices[0].logprobs.{token_logprobs,text_offset}` |
//! | `embed`            | `/embeddings`       | `{model, input}`                                | `data[0].embedding`                       |
//! | `reward`           | `/reward`           | `{model, messages}` (response as last assistant turn) | `score` (or `reward`, `data[0].score`) |

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    check_messages, check_text, l2_normalize, Backend, BackendError, BackendProfile, ChatMessage, GenParams, Role,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpReply {
    pub status: u16,
    pub body: Value,
}

pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpReply, BackendError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Config(format!("HTTP client: {e}")))?;
        Ok(ReqwestTransport { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpReply, BackendError> {
        let mut req = self.client.post(url).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| BackendError::Transient(format!("POST {url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| BackendError::Transient(format!("reading {url}: {e}")))?;
        let body = serde_json::from_str(&text).unwrap_or(Value::String(text));
        Ok(HttpReply { status, body })
    }
}

/// One recorded exchange. `path` is the URL path relative to the base URL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub path: String,
    pub request: Value,
    pub response: HttpReply,
}

/// Replays exchanges from a line-delimited JSON cassette. A request matches
/// an entry when the URL ends with the entry path and the bodies are equal
/// as JSON values.
pub struct CassetteTransport {
    entries: Vec<CassetteEntry>,
}

impl CassetteTransport {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path).map_err(|e| BackendError::Config(format!("cassette {}: {e}", path.display())))?;
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l)
                    .map_err(|e| BackendError::Config(format!("cassette {}:{}: {e}", path.display(), n + 1)))
            })
            .collect::<Result<_, _>>()?;
        Ok(CassetteTransport { entries })
    }

    pub fn from_entries(entries: Vec<CassetteEntry>) -> Self {
        CassetteTransport { entries }
    }
}

impl Transport for CassetteTransport {
    fn post_json(&self, url: &str, _bearer: Option<&str>, body: &Value) -> Result<HttpReply, BackendError> {
        self.entries
            .iter()
            .find(|e| url.ends_with(&e.path) && &e.request == body)
            .map(|e| e.response.clone())
            .ok_or_else(|| BackendError::Protocol(format!("no cassette entry for POST {url}")))
    }
}

/// Forwards to another transport and appends every exchange to a cassette.
pub struct RecordingTransport<T> {
    inner: T,
    base: String,
    out: Mutex<fs::File>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T, base_url: &str, cassette: &Path) -> Result<Self, BackendError> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(cassette)
            .map_err(|e| BackendError::Config(format!("cassette {}: {e}", cassette.display())))?;
        Ok(RecordingTransport { inner, base: base_url.trim_end_matches('/').to_string(), out: Mutex::new(file) })
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpReply, BackendError> {
        let reply = self.inner.post_json(url, bearer, body)?;
        let entry = CassetteEntry {
            path: url.strip_prefix(&self.base).unwrap_or(url).to_string(),
            request: body.clone(),
            response: reply.clone(),
        };
        let mut line = serde_json::to_string(&entry).expect("entry serializes");
        line.push('\n');
        self.out
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .write_all(line.as_bytes())
            .map_err(|e| BackendError::Cache(format!("cassette write: {e}")))?;
        Ok(reply)
    }
}

pub struct HttpBackend {
    base: String,
    model: String,
    token: Option<String>,
    dimension: Option<usize>,
    supports_scoring: bool,
    transport: Box<dyn Transport>,
    requests: AtomicU64,
}

impl HttpBackend {
    /// Build from a profile. Reads the bearer token from the environment
    /// variable named by `auth_env`; a named but unset variable is a
    /// configuration error. Uses the profile cassette when one is set.
    pub fn from_profile(profile: &BackendProfile) -> Result<Self, BackendError> {
        let transport: Box<dyn Transport> = match &profile.cassette {
            Some(path) => Box::new(CassetteTransport::load(path)?),
            None => Box::new(ReqwestTransport::new(Duration::from_secs(profile.timeout_secs))?),
        };
        Self::with_transport(profile, transport)
    }

    pub fn with_transport(profile: &BackendProfile, transport: Box<dyn Transport>) -> Result<Self, BackendError> {
        profile.validate()?;
        let base = profile
            .endpoint
            .clone()
            .ok_or_else(|| BackendError::Config("http backend needs an endpoint".into()))?;
        let token = match &profile.auth_env {
            Some(var) => match std::env::var(var) {
                Ok(t) if !t.is_empty() => Some(t),
                _ => return Err(BackendError::Config(format!("auth token variable {var} is not set"))),
            },
            None => None,
        };
        Ok(HttpBackend {
            base: base.trim_end_matches('/').to_string(),
            model: profile.model.clone(),
            token,
            dimension: profile.dimension,
            supports_scoring: profile.supports_scoring,
            transport,
            requests: AtomicU64::new(0),
        })
    }

    /// Number of requests handed to the transport.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn chat_request(&self, messages: &[ChatMessage], params: &GenParams) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    pub fn reward_request(&self, context: &[ChatMessage], response: &str) -> Value {
        let mut messages = context.to_vec();
        messages.push(ChatMessage::new(Role::Assistant, response));
        json!({ "model": self.model, "messages": messages })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let url = format!("{}{}", self.base, path);
        let reply = self.transport.post_json(&url, self.token.as_deref(), body)?;
        match reply.status {
            200..=299 => Ok(reply.body),
            401 | 403 => Err(BackendError::Auth(format!("{url} returned {}", reply.status))),
            408 | 425 | 429 | 500..=599 => Err(BackendError::Transient(format!("{url} returned {}", reply.status))),
            status => Err(BackendError::Http { status, body: reply.body.to_string() }),
        }
    }
}

/// Plain-text transcript used as the scoring prompt.
pub fn render_transcript(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str(&format!("{}: {}\n", m.role, m.content));
    }
    out.push_str("assistant: ");
    out
}

fn field<'a>(v: &'a Value, pointer: &str) -> Result<&'a Value, BackendError> {
    v.pointer(pointer).ok_or_else(|| BackendError::Protocol(format!("response lacks {pointer}")))
}

impl Backend for HttpBackend {
    fn identity(&self) -> String {
        self.model.clone()
    }

    fn generate(&self, messages: &[ChatMessage], params: &GenParams) -> Result<String, BackendError> {
        check_messages(messages)?;
        params.validate()?;
        let body = self.post("/chat/completions", &self.chat_request(messages, params))?;
        field(&body, "/choices/0/message/content")?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol("message content is not a string".into()))
    }

    fn score_completion(&self, prompt: &[ChatMessage], completion: &str) -> Result<f64, BackendError> {
        check_messages(prompt)?;
        check_text("completion", completion)?;
        if !self.supports_scoring {
            return Err(BackendError::Unsupported { capability: "score_completion", backend: self.identity() });
        }
        let prefix = render_transcript(prompt);
        let full = format!("{prefix}{completion}");
        let body = self.post(
            "/completions",
            &json!({
                "model": self.model,
                "prompt": full,
                "echo": true,
                "logprobs": 0,
                "max_tokens": 1,
                "temperature": 0,
            }),
        )?;
        let logprobs = field(&body, "/choices/0/logprobs/token_logprobs")?
            .as_array()
            .ok_or_else(|| BackendError::Protocol("token_logprobs is not an array".into()))?;
        let offsets = field(&body, "/choices/0/logprobs/text_offset")?
            .as_array()
            .ok_or_else(|| BackendError::Protocol("text_offset is not an array".into()))?;
        let start = prefix.chars().count() as u64;
        let end = full.chars().count() as u64;
        let total: f64 = logprobs
            .iter()
            .zip(offsets)
            .filter_map(|(lp, off)| Some((lp.as_f64()?, off.as_u64()?)))
            .filter(|(_, off)| *off >= start && *off < end)
            .map(|(lp, _)| lp)
            .sum();
        if !total.is_finite() {
            return Err(BackendError::Protocol("non-finite log-probability".into()));
        }
        Ok(total)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        check_text("text", text)?;
        let body = self.post("/embeddings", &json!({ "model": self.model, "input": text }))?;
        let raw = field(&body, "/data/0/embedding")?
            .as_array()
            .ok_or_else(|| BackendError::Protocol("embedding is not an array".into()))?;
        let v: Vec<f32> = raw
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32))
            .collect::<Option<_>>()
            .ok_or_else(|| BackendError::Protocol("embedding has non-numeric entries".into()))?;
        if let Some(d) = self.dimension {
            if v.len() != d {
                return Err(BackendError::Protocol(format!("expected dimension {d}, got {}", v.len())));
            }
        }
        l2_normalize(v)
    }

    fn reward(&self, context: &[ChatMessage], response: &str) -> Result<f64, BackendError> {
        check_messages(context)?;
        check_text("response", response)?;
        let body = self.post("/reward", &self.reward_request(context, response))?;
        let score = body
            .get("score")
            .or_else(|| body.get("reward"))
            .or_else(|| body.pointer("/data/0/score"))
            .and_then(Value::as_f64)
            .ok_or_else(|| BackendError::Protocol("reward response lacks a numeric score".into()))?;
        if !score.is_finite() {
            return Err(BackendError::Protocol("non-finite reward".into()));
        }
        Ok(score)
    }
}

/// Convenience for writing a cassette file from entries.
pub fn write_cassette(path: &Path, entries: &[CassetteEntry]) -> Result<(), BackendError> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("entry serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::BackendKind;
    use crate::prompts::{system, user};
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;

    fn profile(endpoint: &str) -> BackendProfile {
        let mut p = BackendProfile::mock("test-model");
        p.kind = BackendKind::Http;
        p.endpoint = Some(endpoint.to_string());
        p.timeout_secs = 5;
        p
    }

    fn canned(replies: Vec<(u16, Value)>) -> Box<dyn Transport> {
        Box::new(CannedBox((replies, Mutex::new(0))))
    }

    struct CannedBox((Vec<(u16, Value)>, Mutex<usize>));

    impl Transport for CannedBox {
        fn post_json(&self, _url: &str, _bearer: Option<&str>, _body: &Value) -> Result<HttpReply, BackendError> {
            let mut i = self.0 .1.lock().unwrap();
            let (status, body) = self.0 .0[(*i).min(self.0 .0.len() - 1)].clone();
            *i += 1;
            Ok(HttpReply { status, body })
        }
    }

    #[test]
    fn status_mapping() {
        let msgs = [user("hi")];
        let p = GenParams::default();
        let b = HttpBackend::with_transport(&profile("http://x"), canned(vec![(429, json!({}))])).unwrap();
        assert!(b.generate(&msgs, &p).unwrap_err().is_transient());
        let b = HttpBackend::with_transport(&profile("http://x"), canned(vec![(401, json!({}))])).unwrap();
        assert!(matches!(b.generate(&msgs, &p), Err(BackendError::Auth(_))));
        let b = HttpBackend::with_transport(&profile("http://x"), canned(vec![(400, json!({"error": "bad"}))])).unwrap();
        assert!(matches!(b.generate(&msgs, &p), Err(BackendError::Http { status: 400, .. })));
        let ok = json!({"choices": [{"message": {"role": "assistant", "content": "hello"}}]});
        let b = HttpBackend::with_transport(&profile("http://x"), canned(vec![(200, ok)])).unwrap();
        assert_eq!(b.generate(&msgs, &p).unwrap(), "hello");
    }

    #[test]
    fn missing_auth_env_is_config_error() {
        let mut p = profile("http://x");
        p.auth_env = Some("DISTILL_TEST_TOKEN_THAT_IS_NOT_SET".into());
        let err = HttpBackend::with_transport(&p, canned(vec![])).err().unwrap();
        assert!(matches!(err, BackendError::Config(_)));
    }

    #[test]
    fn scoring_requires_capability_and_sums_completion_tokens() {
        let prompt = [user("Q")];
        let b = HttpBackend::with_transport(&profile("http://x"), canned(vec![])).unwrap();
        assert!(b.score_completion(&prompt, "A").unwrap_err().is_unsupported());

        let prefix_len = render_transcript(&prompt).chars().count() as u64;
        let reply = json!({"choices": [{"logprobs": {
            "token_logprobs": [null, -0.5, -1.0, -0.25, -9.0],
            "text_offset": [0, 3, prefix_len, prefix_len + 2, prefix_len + 4],
        }}]});
        let mut p = profile("http://x");
        p.supports_scoring = true;
        let b = HttpBackend::with_transport(&p, canned(vec![(200, reply)])).unwrap();
        // completion "A bc" spans [prefix_len, prefix_len + 4); the token at +4 is generated.
        assert_eq!(b.score_completion(&prompt, "A bc").unwrap(), -1.25);
    }

    #[test]
    fn embeddings_are_normalized_and_dimension_checked() {
        let reply = json!({"data": [{"embedding": [3.0, 4.0]}]});
        let mut p = profile("http://x");
        p.dimension = Some(2);
        let b = HttpBackend::with_transport(&p, canned(vec![(200, reply.clone())])).unwrap();
        let v = b.embed("x").unwrap();
        assert!((v[0] - 0.6).abs() < 1e-7);
        p.dimension = Some(3);
        let b = HttpBackend::with_transport(&p, canned(vec![(200, reply)])).unwrap();
        assert!(matches!(b.embed("x"), Err(BackendError::Protocol(_))));
    }

    #[test]
    fn cassette_replay_matches_on_body() {
        let backend_profile = profile("http://reward.local/v1");
        let probe = HttpBackend::with_transport(&backend_profile, canned(vec![])).unwrap();
        let ctx = [system("judge"), user("question")];
        let entry = CassetteEntry {
            path: "/reward".into(),
            request: probe.reward_request(&ctx, "answer"),
            response: HttpReply { status: 200, body: json!({"score": 1.5}) },
        };
        let b = HttpBackend::with_transport(&backend_profile, Box::new(CassetteTransport::from_entries(vec![entry]))).unwrap();
        assert_eq!(b.reward(&ctx, "answer").unwrap(), 1.5);
        assert!(matches!(b.reward(&ctx, "other"), Err(BackendError::Protocol(_))));
    }

    /// Minimal one-shot HTTP server returning a fixed JSON body and
    /// capturing the request head.
    fn serve_once(body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut content_length = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap();
                }
                head.push_str(&line);
            }
            let mut req_body = vec![0u8; content_length];
            reader.read_exact(&mut req_body).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            )
            .unwrap();
            head + &String::from_utf8(req_body).unwrap()
        });
        (format!("http://{addr}/v1"), handle)
    }

    #[test]
    fn real_transport_sends_bearer_and_openai_body() {
        let (url, handle) = serve_once(r#"{"choices":[{"message":{"role":"assistant","content":"pong"}}]}"#);
        std::env::set_var("DISTILL_TEST_TOKEN_SET", "sekret");
        let mut p = profile(&url);
        p.auth_env = Some("DISTILL_TEST_TOKEN_SET".into());
        let b = HttpBackend::from_profile(&p).unwrap();
        let out = b.generate(&[user("ping")], &GenParams::default().with_seed(7)).unwrap();
        assert_eq!(out, "pong");
        let seen = handle.join().unwrap();
        assert!(seen.starts_with("POST /v1/chat/completions"));
        assert!(seen.to_ascii_lowercase().contains("authorization: bearer sekret"));
        assert!(seen.contains("\"seed\":7"));
        assert!(seen.contains("\"model\":\"test-model\""));
    }

    #[test]
    fn recording_then_replaying() {
        let dir = tempfile::tempdir().unwrap();
        let cassette = dir.path().join("c.jsonl");
        let reply = json!({"data": [{"embedding": [1.0, 0.0]}]});
        let recorder = RecordingTransport::new(CannedBox((vec![(200, reply)], Mutex::new(0))), "http://e/v1", &cassette).unwrap();
        let p = profile("http://e/v1");
        let live = HttpBackend::with_transport(&p, Box::new(recorder)).unwrap();
        let v = live.embed("hello").unwrap();
        let mut replay_profile = p.clone();
        replay_profile.cassette = Some(cassette);
        let replay = HttpBackend::from_profile(&replay_profile).unwrap();
        assert_eq!(replay.embed("hello").unwrap(), v);
    }
}
