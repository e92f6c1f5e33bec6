//! Text-generation backends.
//!
//! [`MockBackend`] answers from a scripted fixture keyed by a content hash of
//! the request, so golden tests break loudly when a prompt changes.
//! [`HttpBackend`] talks to any OpenAI-compatible `/chat/completions`
//! endpoint.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::text::word_count;

pub const API_BASE_ENV: &str = "SAVER_API_BASE";
pub const API_KEY_ENV: &str = "SAVER_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempts: {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("no fixture response for request {fingerprint}")]
    FixtureMiss { fingerprint: String },
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("fixture file error: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl GenRequest {
    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.system_prompt.trim().is_empty() || self.user_prompt.trim().is_empty() {
            return Err(BackendError::InvalidRequest("prompts must be nonempty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt: u64,
    pub completion: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenResponse {
    pub text: String,
    pub backend_id: String,
    pub latency_ms: u64,
    pub token_counts: TokenCounts,
}

/// Content hash of `(system_prompt, user_prompt, seed)`.
///
/// Sampling parameters are deliberately excluded so a temperature tweak does
/// not orphan a fixture, while any prompt edit does.
pub fn fingerprint(req: &GenRequest) -> String {
    let mut h = Sha256::new();
    h.update(req.system_prompt.as_bytes());
    h.update([0u8]);
    h.update(req.user_prompt.as_bytes());
    h.update([0u8]);
    match req.seed {
        Some(s) => h.update(s.to_le_bytes()),
        None => h.update(b"none"),
    }
    hex::encode(h.finalize())
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FallbackPolicy {
    #[default]
    Error,
    /// Reply with the user prompt verbatim.
    Echo,
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureLine {
    fingerprint: String,
    response: String,
}

/// Canned responses keyed by request fingerprint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScriptedFixture {
    responses: BTreeMap<String, String>,
    pub fallback: FallbackPolicy,
}

impl ScriptedFixture {
    pub fn new(fallback: FallbackPolicy) -> Self {
        Self {
            responses: BTreeMap::new(),
            fallback,
        }
    }

    pub fn insert(&mut self, req: &GenRequest, response: impl Into<String>) {
        self.responses.insert(fingerprint(req), response.into());
    }

    pub fn insert_fingerprint(&mut self, fp: impl Into<String>, response: impl Into<String>) {
        self.responses.insert(fp.into(), response.into());
    }

    pub fn get(&self, fp: &str) -> Option<&str> {
        self.responses.get(fp).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// Merge another fixture's entries; later entries win.
    pub fn extend(&mut self, other: ScriptedFixture) {
        self.responses.extend(other.responses);
    }

    pub fn load_jsonl(path: &Path, fallback: FallbackPolicy) -> Result<Self, BackendError> {
        let file = fs::File::open(path)
            .map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))?;
        let mut fixture = Self::new(fallback);
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::Fixture(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureLine = serde_json::from_str(&line).map_err(|e| {
                BackendError::Fixture(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            fixture.responses.insert(entry.fingerprint, entry.response);
        }
        Ok(fixture)
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for (fp, response) in &self.responses {
            let line = FixtureLine {
                fingerprint: fp.clone(),
                response: response.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Deterministic offline backend.
#[derive(Debug, Clone)]
pub struct MockBackend {
    fixture: ScriptedFixture,
    id: String,
}

impl MockBackend {
    pub fn new(fixture: ScriptedFixture) -> Self {
        Self {
            fixture,
            id: "mock".to_string(),
        }
    }

    pub fn fixture(&self) -> &ScriptedFixture {
        &self.fixture
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError> {
        req.validate()?;
        let fp = fingerprint(req);
        let text = match (self.fixture.get(&fp), self.fixture.fallback) {
            (Some(t), _) => t.to_string(),
            (None, FallbackPolicy::Echo) => req.user_prompt.clone(),
            (None, FallbackPolicy::Error) => return Err(BackendError::FixtureMiss { fingerprint: fp }),
        };
        Ok(GenResponse {
            token_counts: TokenCounts {
                prompt: (word_count(&req.system_prompt) + word_count(&req.user_prompt)) as u64,
                completion: word_count(&text) as u64,
            },
            text,
            backend_id: self.id.clone(),
            latency_ms: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub retries: u32,
    /// Sleep before retry `n` is `backoff[min(n, len - 1)]`.
    pub backoff: Vec<Duration>,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            model: model.into(),
            retries: 3,
            backoff: vec![
                Duration::from_millis(500),
                Duration::from_secs(1),
                Duration::from_secs(2),
            ],
            timeout: Duration::from_secs(60),
        }
    }

    /// Base URL from `SAVER_API_BASE`, bearer token from `SAVER_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Result<Self, BackendError> {
        let base = std::env::var(API_BASE_ENV).map_err(|_| {
            BackendError::InvalidRequest(format!("{API_BASE_ENV} is not set"))
        })?;
        let mut cfg = Self::new(base, model);
        cfg.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    fn backoff_for(&self, retry: u32) -> Duration {
        match self.backoff.len() {
            0 => Duration::ZERO,
            n => self.backoff[(retry as usize).min(n - 1)],
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

enum Attempt {
    Done(GenResponse),
    Retry(String),
    Fatal(BackendError),
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    id: String,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let id = format!("http:{}", config.model);
        Ok(Self { config, client, id })
    }

    fn attempt(&self, req: &GenRequest) -> Attempt {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &req.system_prompt,
                },
                ChatMessage {
                    role: "user",
                    content: &req.user_prompt,
                },
            ],
            temperature: req.temperature,
            max_tokens: req.max_tokens,
            seed: req.seed,
        };
        let started = Instant::now();
        let mut builder = self.client.post(self.config.endpoint()).json(&body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = match builder.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => {
                return Attempt::Retry(e.to_string())
            }
            Err(e) => return Attempt::Fatal(BackendError::MalformedResponse(e.to_string())),
        };
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retry(format!("status {status}"));
        }
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Attempt::Retry(e.to_string()),
            Err(e) => return Attempt::Fatal(BackendError::MalformedResponse(e.to_string())),
        };
        if !status.is_success() {
            return Attempt::Fatal(BackendError::Rejected {
                status: status.as_u16(),
                body: text,
            });
        }
        let parsed: ChatResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => return Attempt::Fatal(BackendError::MalformedResponse(e.to_string())),
        };
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        let usage = parsed.usage.map_or_else(TokenCounts::default, |u| TokenCounts {
            prompt: u.prompt_tokens,
            completion: u.completion_tokens,
        });
        Attempt::Done(GenResponse {
            text: content,
            backend_id: self.id.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
            token_counts: usage,
        })
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError> {
        req.validate()?;
        let mut last_error = String::new();
        let attempts = self.config.retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff_for(attempt - 1));
            }
            match self.attempt(req) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => last_error = msg,
            }
        }
        Err(BackendError::BackendUnavailable {
            attempts,
            last_error,
        })
    }
}

/// Runs `reqs` with at most `parallelism` requests in flight. Output order
/// matches input order; each slot carries its own result.
pub fn generate_batch(
    backend: &dyn Backend,
    reqs: &[GenRequest],
    parallelism: usize,
) -> Vec<Result<GenResponse, BackendError>> {
    if reqs.is_empty() {
        return Vec::new();
    }
    let workers = parallelism.max(1).min(reqs.len());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<GenResponse, BackendError>>>> =
        reqs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= reqs.len() {
                    break;
                }
                let result = backend.generate(&reqs[i]);
                *slots[i].lock().expect("slot lock poisoned") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock poisoned")
                .expect("every slot is filled")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;
    use std::net::TcpListener;

    fn req(user: &str) -> GenRequest {
        GenRequest::new("system", user).with_seed(Some(7))
    }

    fn mock(entries: &[(&str, &str)], fallback: FallbackPolicy) -> MockBackend {
        let mut f = ScriptedFixture::new(fallback);
        for (u, r) in entries {
            f.insert(&req(u), *r);
        }
        MockBackend::new(f)
    }

    #[test]
    fn mock_returns_fixture_text() {
        let b = mock(&[("A", "x")], FallbackPolicy::Error);
        assert_eq!(b.generate(&req("A")).unwrap().text, "x");
    }

    #[test]
    fn mock_is_deterministic() {
        let b = mock(&[("A", "some answer")], FallbackPolicy::Error);
        let one = serde_json::to_vec(&b.generate(&req("A")).unwrap()).unwrap();
        let two = serde_json::to_vec(&b.generate(&req("A")).unwrap()).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn mock_miss_with_error_policy() {
        let b = mock(&[("A", "x")], FallbackPolicy::Error);
        assert!(matches!(b.generate(&req("B")), Err(BackendError::FixtureMiss { .. })));
    }

    #[test]
    fn mock_miss_with_echo_policy() {
        let b = mock(&[], FallbackPolicy::Echo);
        assert_eq!(b.generate(&req("hello")).unwrap().text, "hello");
    }

    #[test]
    fn fingerprint_depends_on_prompts_and_seed_only() {
        let base = req("A");
        assert_eq!(fingerprint(&base), fingerprint(&base.clone().with_temperature(0.9)));
        assert_ne!(fingerprint(&base), fingerprint(&base.clone().with_seed(Some(8))));
        assert_ne!(fingerprint(&base), fingerprint(&req("A ")));
        // prompt boundary is part of the hash
        let a = GenRequest::new("ab", "c");
        let b = GenRequest::new("a", "bc");
        assert_ne!(fingerprint(&a), fingerprint(&b));
    }

    #[test]
    fn empty_prompt_is_invalid() {
        let b = mock(&[], FallbackPolicy::Echo);
        assert!(matches!(
            b.generate(&GenRequest::new("", "x")),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn batch_preserves_order() {
        let b = mock(&[("1", "a"), ("2", "b"), ("3", "c"), ("4", "d")], FallbackPolicy::Error);
        let reqs: Vec<_> = ["1", "2", "3", "4"].iter().map(|u| req(u)).collect();
        let out: Vec<_> = generate_batch(&b, &reqs, 2)
            .into_iter()
            .map(|r| r.unwrap().text)
            .collect();
        assert_eq!(out, vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn batch_isolates_failures() {
        let b = mock(&[("1", "a"), ("2", "b"), ("4", "d")], FallbackPolicy::Error);
        let reqs: Vec<_> = ["1", "2", "3", "4"].iter().map(|u| req(u)).collect();
        let out = generate_batch(&b, &reqs, 3);
        assert_eq!(out.len(), 4);
        assert!(out[0].is_ok() && out[1].is_ok() && out[3].is_ok());
        assert!(matches!(out[2], Err(BackendError::FixtureMiss { .. })));
    }

    #[test]
    fn batch_empty() {
        let b = mock(&[], FallbackPolicy::Error);
        assert!(generate_batch(&b, &[], 4).is_empty());
    }

    struct CountingBackend {
        in_flight: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Backend for CountingBackend {
        fn id(&self) -> &str {
            "counting"
        }
        fn generate(&self, req: &GenRequest) -> Result<GenResponse, BackendError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            Ok(GenResponse {
                text: req.user_prompt.clone(),
                backend_id: "counting".into(),
                latency_ms: 0,
                token_counts: TokenCounts::default(),
            })
        }
    }

    #[test]
    fn batch_bounds_parallelism() {
        let b = CountingBackend {
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        };
        let reqs: Vec<_> = (0..12).map(|i| req(&i.to_string())).collect();
        let out = generate_batch(&b, &reqs, 3);
        assert!(b.peak.load(Ordering::SeqCst) <= 3);
        for (i, r) in out.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap().text, i.to_string());
        }
    }

    #[test]
    fn fixture_jsonl_round_trip() {
        let mut f = ScriptedFixture::new(FallbackPolicy::Error);
        f.insert(&req("A"), "line one\nline two");
        let mut buf = Vec::new();
        f.write_jsonl(&mut buf).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.jsonl");
        std::fs::write(&path, &buf).unwrap();
        let back = ScriptedFixture::load_jsonl(&path, FallbackPolicy::Error).unwrap();
        assert_eq!(back, f);
    }

    /// Serves the given raw HTTP responses, one per connection, and records
    /// request bodies.
    fn serve(responses: Vec<String>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for response in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = stream.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf).to_string();
                    if let Some(pos) = text.find("\r\n\r\n") {
                        let len = text[..pos]
                            .lines()
                            .find_map(|l| {
                                l.to_ascii_lowercase()
                                    .strip_prefix("content-length:")
                                    .map(|v| v.trim().parse::<usize>().unwrap())
                            })
                            .unwrap_or(0);
                        if buf.len() >= pos + 4 + len {
                            seen.push(text);
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                stream.write_all(response.as_bytes()).unwrap();
            }
            seen
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn http(status: &str, body: &str) -> String {
        format!(
            "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        )
    }

    fn fast_config(base: String) -> HttpConfig {
        let mut cfg = HttpConfig::new(base, "test-model");
        cfg.api_key = Some("sekret".into());
        cfg.backoff = vec![Duration::from_millis(1)];
        cfg.timeout = Duration::from_secs(5);
        cfg
    }

    #[test]
    fn http_retries_server_errors_then_succeeds() {
        let ok = r#"{"choices":[{"message":{"content":"hi"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;
        let (base, handle) = serve(vec![
            http("503 Service Unavailable", "{}"),
            http("429 Too Many Requests", "{}"),
            http("200 OK", ok),
        ]);
        let backend = HttpBackend::new(fast_config(base)).unwrap();
        let resp = backend.generate(&req("question")).unwrap();
        assert_eq!(resp.text, "hi");
        assert_eq!(resp.token_counts, TokenCounts { prompt: 3, completion: 1 });
        let seen = handle.join().unwrap();
        assert_eq!(seen.len(), 3);
        assert!(seen[0].starts_with("POST /v1/chat/completions"));
        assert!(seen[0].to_ascii_lowercase().contains("authorization: bearer sekret"));
        assert!(seen[0].contains(r#""model":"test-model""#));
        assert!(seen[0].contains(r#""seed":7"#));
    }

    #[test]
    fn http_gives_up_after_retries() {
        let (base, handle) = serve(vec![http("500 Internal Server Error", "{}"); 4]);
        let mut cfg = fast_config(base);
        cfg.retries = 3;
        let backend = HttpBackend::new(cfg).unwrap();
        let err = backend.generate(&req("q")).unwrap_err();
        assert!(matches!(err, BackendError::BackendUnavailable { attempts: 4, .. }));
        handle.join().unwrap();
    }

    #[test]
    fn http_client_errors_are_not_retried() {
        let (base, handle) = serve(vec![http("401 Unauthorized", r#"{"error":"nope"}"#)]);
        let backend = HttpBackend::new(fast_config(base)).unwrap();
        let err = backend.generate(&req("q")).unwrap_err();
        assert!(matches!(err, BackendError::Rejected { status: 401, .. }));
        handle.join().unwrap();
    }

    #[test]
    fn default_retry_schedule() {
        let cfg = HttpConfig::new("http://x", "m");
        assert_eq!(cfg.retries, 3);
        assert_eq!(cfg.backoff_for(0), Duration::from_millis(500));
        assert_eq!(cfg.backoff_for(1), Duration::from_secs(1));
        assert_eq!(cfg.backoff_for(2), Duration::from_secs(2));
        assert_eq!(cfg.backoff_for(5), Duration::from_secs(2));
        assert_eq!(cfg.timeout, Duration::from_secs(60));
    }
}
