//! Completion backends: a live OpenAI-compatible chat endpoint and a
//! deterministic scripted model used for tests and replay.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "FORGELOOP_API_KEY";
pub const CHAT_COMPLETIONS_PATH: &str = "/v1/chat/completions";
pub const DEFAULT_RETRY_LIMIT: u32 = 3;
pub const DEFAULT_BASE_DELAY: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub messages: Vec<ChatMessage>,
    pub model_id: String,
    pub temperature: f64,
    pub max_response_chars: usize,
}

impl ModelRequest {
    /// The most recent message, which is what script matching looks at.
    pub fn latest_prompt(&self) -> &str {
        self.messages.last().map(|m| m.content.as_str()).unwrap_or("")
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for m in &self.messages {
            hasher.update(format!("{:?}\0{}\0", m.role, m.content).as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Other(String),
}

impl FinishReason {
    fn from_wire(value: Option<&str>) -> Self {
        match value {
            Some("stop") | None => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            Some(other) => FinishReason::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", content = "position", rename_all = "snake_case")]
pub enum ResponseSource {
    Live,
    Scripted(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    #[serde(flatten)]
    pub source: ResponseSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("endpoint unreachable after {attempts} attempts: {cause}")]
    EndpointUnreachable { attempts: u32, cause: String },
    #[error("credential rejected by endpoint (HTTP {status})")]
    AuthRejected { status: u16 },
    #[error("endpoint rejected request (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    MalformedResponse(String),
    #[error("no credential: set {API_KEY_ENV}")]
    MissingCredential,
    #[error("script exhausted after {consumed} entries")]
    ScriptExhausted { consumed: usize },
    #[error("script entry {position} expected prompt containing {expected:?}; got prompt {prompt_digest}")]
    ScriptMismatch {
        position: usize,
        expected: String,
        prompt_digest: String,
    },
    #[error("cannot write recording: {0}")]
    Recording(String),
}

/// Anything that turns a rendered prompt into a model response.
pub trait CompletionBackend: Send {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, GatewayError>;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Box<B> {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        (**self).complete(request)
    }
}

// ---------------------------------------------------------------------------
// Scripted model

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScriptMatch {
    AnyNext,
    PromptContains(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEntry {
    pub matcher: ScriptMatch,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("script parse error at line {line}: {cause}")]
pub struct ScriptParseError {
    pub line: usize,
    pub cause: String,
}

/// Replays a fixed list of responses. The cursor only moves forward and
/// reading past the end is an error.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScriptedModel {
    entries: Vec<ScriptEntry>,
    cursor: usize,
}

#[derive(Debug, Deserialize, Serialize)]
struct ScriptFile {
    #[serde(default)]
    entry: Vec<toml::Spanned<RawEntry>>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    #[serde(rename = "match", default = "any_next")]
    matcher: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contains: Option<String>,
    response: String,
}

fn any_next() -> String {
    "any_next".into()
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ScriptedModel {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self { entries, cursor: 0 }
    }

    pub fn from_responses<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(
            responses
                .into_iter()
                .map(|r| ScriptEntry {
                    matcher: ScriptMatch::AnyNext,
                    response: r.into(),
                })
                .collect(),
        )
    }

    /// Parses the script format: a sequence of `[[entry]]` tables with keys
    /// `match` (`any_next` or `prompt_contains`), `contains` and `response`.
    pub fn parse(text: &str) -> Result<Self, ScriptParseError> {
        let file: ScriptFile = toml::from_str(text).map_err(|e| ScriptParseError {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(1),
            cause: e.message().to_string(),
        })?;
        let mut entries = Vec::with_capacity(file.entry.len());
        for spanned in file.entry {
            let line = line_of(text, spanned.span().start);
            let raw = spanned.into_inner();
            let matcher = match (raw.matcher.as_str(), raw.contains) {
                ("any_next" | "any", None) => ScriptMatch::AnyNext,
                ("prompt_contains" | "contains", Some(s)) => ScriptMatch::PromptContains(s),
                ("prompt_contains" | "contains", None) => {
                    return Err(ScriptParseError {
                        line,
                        cause: "prompt_contains entry needs a `contains` field".into(),
                    })
                }
                ("any_next" | "any", Some(_)) => {
                    return Err(ScriptParseError {
                        line,
                        cause: "`contains` is only valid with match = \"prompt_contains\"".into(),
                    })
                }
                (other, _) => {
                    return Err(ScriptParseError {
                        line,
                        cause: format!("unknown match kind {other:?}"),
                    })
                }
            };
            entries.push(ScriptEntry {
                matcher,
                response: raw.response,
            });
        }
        Ok(Self::new(entries))
    }

    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for entry in &self.entries {
            out.push_str("[[entry]]\n");
            match &entry.matcher {
                ScriptMatch::AnyNext => out.push_str("match = \"any_next\"\n"),
                ScriptMatch::PromptContains(s) => {
                    out.push_str("match = \"prompt_contains\"\n");
                    out.push_str(&format!("contains = {}\n", toml_string(s)));
                }
            }
            out.push_str(&format!("response = {}\n\n", toml_string(&entry.response)));
        }
        out
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Skips the first `cursor` entries, e.g. those already answered before
    /// a session was reopened.
    pub fn starting_at(mut self, cursor: usize) -> Self {
        self.cursor = cursor.min(self.entries.len());
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - self.cursor
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

pub fn load_script(path: &Path) -> Result<ScriptedModel, ScriptParseError> {
    let text = fs::read_to_string(path).map_err(|e| ScriptParseError {
        line: 0,
        cause: format!("{}: {e}", path.display()),
    })?;
    ScriptedModel::parse(&text)
}

impl CompletionBackend for ScriptedModel {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let position = self.cursor;
        let entry = self
            .entries
            .get(position)
            .ok_or(GatewayError::ScriptExhausted { consumed: position })?;
        if let ScriptMatch::PromptContains(expected) = &entry.matcher {
            if !request.latest_prompt().contains(expected.as_str()) {
                return Err(GatewayError::ScriptMismatch {
                    position,
                    expected: expected.clone(),
                    prompt_digest: request.digest(),
                });
            }
        }
        self.cursor += 1;
        Ok(ModelResponse {
            text: entry.response.clone(),
            finish_reason: FinishReason::Stop,
            latency_ms: 0,
            source: ResponseSource::Scripted(position),
        })
    }
}

// ---------------------------------------------------------------------------
// Live endpoint

/// Retry delays for attempts after the first: `base * 2^k`.
pub fn backoff_delays(retry_limit: u32, base: Duration) -> Vec<Duration> {
    (0..retry_limit).map(|k| base * 2u32.pow(k)).collect()
}

/// Replaces every occurrence of `secret` in `text`.
pub fn scrub(text: &str, secret: &str) -> String {
    if secret.is_empty() {
        text.to_string()
    } else {
        text.replace(secret, "[REDACTED]")
    }
}

pub struct LiveBackend {
    base_url: String,
    api_key: String,
    retry_limit: u32,
    base_delay: Duration,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for LiveBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LiveBackend")
            .field("base_url", &self.base_url)
            .field("api_key", &"[REDACTED]")
            .field("retry_limit", &self.retry_limit)
            .finish()
    }
}

enum Attempt {
    Done(Result<ModelResponse, GatewayError>),
    Transient(String),
}

impl LiveBackend {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Result<Self, GatewayError> {
        let api_key = api_key.into();
        if api_key.trim().is_empty() {
            return Err(GatewayError::MissingCredential);
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| GatewayError::EndpointUnreachable {
                attempts: 0,
                cause: e.to_string(),
            })?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            retry_limit: DEFAULT_RETRY_LIMIT,
            base_delay: DEFAULT_BASE_DELAY,
            client,
        })
    }

    pub fn from_env(base_url: impl Into<String>) -> Result<Self, GatewayError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| GatewayError::MissingCredential)?;
        Self::new(base_url, key)
    }

    pub fn with_retry(mut self, retry_limit: u32, base_delay: Duration) -> Self {
        self.retry_limit = retry_limit;
        self.base_delay = base_delay;
        self
    }

    pub fn endpoint(&self) -> String {
        format!("{}{}", self.base_url, CHAT_COMPLETIONS_PATH)
    }

    fn attempt(&self, request: &ModelRequest, started: Instant) -> Attempt {
        let body = json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
        });
        let sent = self
            .client
            .post(self.endpoint())
            .bearer_auth(&self.api_key)
            .json(&body)
            .send();
        let response = match sent {
            Ok(r) => r,
            Err(e) => return Attempt::Transient(scrub(&e.to_string(), &self.api_key)),
        };
        let status = response.status().as_u16();
        let text = response.text().unwrap_or_default();
        let text = scrub(&text, &self.api_key);
        match status {
            200..=299 => Attempt::Done(parse_completion(&text, request, started)),
            401 | 403 => Attempt::Done(Err(GatewayError::AuthRejected { status })),
            429 | 500..=599 => Attempt::Transient(format!("HTTP {status}")),
            _ => Attempt::Done(Err(GatewayError::Rejected { status, body: text })),
        }
    }
}

fn parse_completion(
    body: &str,
    request: &ModelRequest,
    started: Instant,
) -> Result<ModelResponse, GatewayError> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::MalformedResponse("missing choices[0]".into()))?;
    let mut text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or("")
        .to_string();
    let mut finish_reason = FinishReason::from_wire(choice.get("finish_reason").and_then(Value::as_str));
    if request.max_response_chars > 0 && text.chars().count() > request.max_response_chars {
        text = text.chars().take(request.max_response_chars).collect();
        finish_reason = FinishReason::Length;
    }
    Ok(ModelResponse {
        text,
        finish_reason,
        latency_ms: started.elapsed().as_millis() as u64,
        source: ResponseSource::Live,
    })
}

impl CompletionBackend for LiveBackend {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let started = Instant::now();
        let delays = backoff_delays(self.retry_limit, self.base_delay);
        let mut last_cause = String::new();
        for attempt in 0..=self.retry_limit {
            if attempt > 0 {
                thread::sleep(delays[attempt as usize - 1]);
            }
            match self.attempt(request, started) {
                Attempt::Done(result) => return result,
                Attempt::Transient(cause) => last_cause = cause,
            }
        }
        Err(GatewayError::EndpointUnreachable {
            attempts: self.retry_limit + 1,
            cause: last_cause,
        })
    }
}

// ---------------------------------------------------------------------------
// Recording

/// Wraps a backend and writes every response it returns to a script file,
/// so a live session can be replayed later.
pub struct RecordingBackend<B> {
    inner: B,
    path: PathBuf,
    recorded: Vec<ScriptEntry>,
}

impl<B: CompletionBackend> RecordingBackend<B> {
    pub fn new(inner: B, path: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            path: path.into(),
            recorded: Vec::new(),
        }
    }

    pub fn script(&self) -> ScriptedModel {
        ScriptedModel::new(self.recorded.clone())
    }
}

impl<B: CompletionBackend> CompletionBackend for RecordingBackend<B> {
    fn complete(&mut self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        let response = self.inner.complete(request)?;
        self.recorded.push(ScriptEntry {
            matcher: ScriptMatch::AnyNext,
            response: response.text.clone(),
        });
        fs::write(&self.path, self.script().to_toml())
            .map_err(|e| GatewayError::Recording(e.to_string()))?;
        Ok(response)
    }
}
