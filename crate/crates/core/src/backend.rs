//! Inference-only propose/solve/score rounds against a chat-completions
//! endpoint.
//!
//! One model plays both roles through prompting. Nothing here updates model
//! parameters: each round is scored with the same reward code the simulator
//! uses and logged in the step-log schema with an `origin` tag.
//!
//! Requests go through a [`ChatTransport`]:
//!
//! - [`HttpTransport`] talks to a real endpoint.
//! - [`FixtureTransport`] replays recorded exchanges offline.
//! - [`RecordingTransport`] wraps another transport and captures its
//!   exchanges into a fixture file.

use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::{
    score_generations, ProposerRewardParams, SolverRewardKind, SolverRewardParams,
};
use crate::trainer::{Origin, StepRecord};

pub const DEFAULT_PROPOSER_PROMPT: &str =
    "Look carefully at the image and write one visually grounded \
mathematical question about it. The question must be answerable from the image alone with a single \
short answer (a number, word or short phrase). Output only the question.";

pub const DEFAULT_SOLVER_PROMPT: &str = "Answer the following question about the image. Reason \
briefly, then finish with the final answer wrapped in <answer></answer> tags.\n\nQuestion: {question}";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("transport failed after {attempts} attempts: {last_error}")]
    Transport {
        attempts: u32,
        last_error: String,
        /// Body of the last HTTP reply, when one was received.
        raw: Option<String>,
    },
    #[error("endpoint returned HTTP {status}")]
    Http { status: u16, body: String },
    #[error("malformed response body: {reason}")]
    MalformedResponse { reason: String, raw: String },
    #[error("reading image {path}: {reason}")]
    Image { path: String, reason: String },
    #[error("fixture file: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    /// Base URL of an OpenAI-compatible API, e.g. `https://host/v1`.
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable that holds the API key.
    pub api_key_env: String,
    pub n_answers: usize,
    pub solver_temperature: f64,
    pub proposer_temperature: f64,
    pub request_timeout_secs: f64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    /// No placeholders.
    pub proposer_prompt_template: String,
    /// Must contain `{question}`.
    pub solver_prompt_template: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "default".into(),
            api_key_env: "COEVO_API_KEY".into(),
            n_answers: 5,
            solver_temperature: 1.0,
            proposer_temperature: 1.0,
            request_timeout_secs: 120.0,
            max_retries: 2,
            retry_backoff_ms: 250,
            proposer_prompt_template: DEFAULT_PROPOSER_PROMPT.into(),
            solver_prompt_template: DEFAULT_SOLVER_PROMPT.into(),
        }
    }
}

/// Returns the first `{identifier}` left in `text`.
fn find_placeholder(text: &str) -> Option<&str> {
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        if let Some(close) = after.find('}') {
            let name = &after[..close];
            if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Some(&rest[open..open + close + 2]);
            }
        }
        rest = after;
    }
    None
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let cfg = |m: String| Err(BackendError::Config(m));
        if self.n_answers < 2 {
            return cfg(format!("n_answers must be >= 2, got {}", self.n_answers));
        }
        if !(self.solver_temperature > 0.0) || !(self.proposer_temperature > 0.0) {
            return cfg("temperatures must be positive".into());
        }
        if !(self.request_timeout_secs > 0.0) || !self.request_timeout_secs.is_finite() {
            return cfg("request_timeout_secs must be positive".into());
        }
        if self.model_name.is_empty() {
            return cfg("model_name is empty".into());
        }
        if let Some(p) = find_placeholder(&self.proposer_prompt_template) {
            return cfg(format!("proposer template has unfilled placeholder {p}"));
        }
        if !self.solver_prompt_template.contains("{question}") {
            return cfg("solver template must contain {question}".into());
        }
        let rendered = self.solver_prompt_template.replace("{question}", "");
        if let Some(p) = find_placeholder(&rendered) {
            return cfg(format!("solver template has unfilled placeholder {p}"));
        }
        Ok(())
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    fn is_loopback(&self) -> bool {
        reqwest::Url::parse(&self.base_url)
            .ok()
            .and_then(|u| u.host_str().map(str::to_owned))
            .is_some_and(|h| matches!(h.as_str(), "localhost" | "127.0.0.1" | "[::1]" | "::1"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: Vec<ContentPart>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

/// Extracts `choices[0].message.content`.
pub fn parse_chat_response(body: &str) -> Result<String, BackendError> {
    let malformed = |reason: String| BackendError::MalformedResponse {
        reason,
        raw: body.to_owned(),
    };
    let resp: ChatResponse = serde_json::from_str(body).map_err(|e| malformed(e.to_string()))?;
    resp.choices
        .into_iter()
        .next()
        .ok_or_else(|| malformed("no choices".into()))?
        .message
        .content
        .ok_or_else(|| malformed("choice has no content".into()))
}

/// Converts an image handle into a URL the endpoint accepts. `http(s)://`
/// and `data:` handles pass through; anything else is read from disk and
/// inlined as base64.
pub fn image_url(image_ref: &str) -> Result<String, BackendError> {
    if ["http://", "https://", "data:"]
        .iter()
        .any(|p| image_ref.starts_with(p))
    {
        return Ok(image_ref.to_owned());
    }
    let bytes = std::fs::read(image_ref).map_err(|e| BackendError::Image {
        path: image_ref.to_owned(),
        reason: e.to_string(),
    })?;
    let ext = Path::new(image_ref)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let mime = match ext.as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    };
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{mime};base64,{encoded}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Proposer,
    Solver,
}

/// Identifies a request within a round; solver requests are otherwise
/// identical across sample indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RequestTag {
    pub role: Role,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

pub trait ChatTransport: Send + Sync {
    /// Sends one request. `Err` means no HTTP reply was obtained.
    fn send(&self, tag: RequestTag, request: &ChatRequest) -> Result<HttpReply, String>;
}

impl<T: ChatTransport + ?Sized> ChatTransport for &T {
    fn send(&self, tag: RequestTag, request: &ChatRequest) -> Result<HttpReply, String> {
        (**self).send(tag, request)
    }
}

impl<T: ChatTransport + ?Sized> ChatTransport for Box<T> {
    fn send(&self, tag: RequestTag, request: &ChatRequest) -> Result<HttpReply, String> {
        (**self).send(tag, request)
    }
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpTransport {
    /// Reads the API key from `config.api_key_env`. A key is required unless
    /// `base_url` points at a loopback host.
    pub fn from_config(config: &BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        if api_key.is_none() && !config.is_loopback() {
            return Err(BackendError::Config(format!(
                "environment variable {} is not set and {} is not a local endpoint",
                config.api_key_env, config.base_url
            )));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.request_timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: config.endpoint(),
            api_key,
        })
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, _tag: RequestTag, request: &ChatRequest) -> Result<HttpReply, String> {
        let mut builder = self.client.post(&self.endpoint).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub tag: RequestTag,
    pub request: ChatRequest,
    pub response: HttpReply,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FixtureFile {
    pub entries: Vec<FixtureEntry>,
}

impl FixtureFile {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| BackendError::Fixture(e.to_string()))?;
        std::fs::write(path, text + "\n")
            .map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))
    }
}

/// Replays a fixture file. Matching entries are served in file order; once
/// exhausted, the last match is repeated.
pub struct FixtureTransport {
    entries: Vec<FixtureEntry>,
    used: Mutex<Vec<bool>>,
}

impl FixtureTransport {
    pub fn new(file: FixtureFile) -> Self {
        let used = Mutex::new(vec![false; file.entries.len()]);
        Self {
            entries: file.entries,
            used,
        }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::new(FixtureFile::load(path)?))
    }
}

impl ChatTransport for FixtureTransport {
    fn send(&self, tag: RequestTag, request: &ChatRequest) -> Result<HttpReply, String> {
        let mut used = self.used.lock().expect("fixture lock poisoned");
        let mut last = None;
        for (i, e) in self.entries.iter().enumerate() {
            if e.tag == tag && &e.request == request {
                if !used[i] {
                    used[i] = true;
                    return Ok(e.response.clone());
                }
                last = Some(i);
            }
        }
        match last {
            Some(i) => Ok(self.entries[i].response.clone()),
            None => Err(format!("no fixture entry for {tag:?}")),
        }
    }
}

/// Forwards to an inner transport and keeps every exchange that produced an
/// HTTP reply.
pub struct RecordingTransport<T> {
    inner: T,
    recorded: Mutex<Vec<FixtureEntry>>,
}

impl<T: ChatTransport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            recorded: Mutex::new(Vec::new()),
        }
    }

    /// Recorded exchanges ordered by tag; attempts under one tag keep their
    /// original order.
    pub fn fixture(&self) -> FixtureFile {
        let mut entries = self
            .recorded
            .lock()
            .expect("recording lock poisoned")
            .clone();
        entries.sort_by_key(|e| e.tag);
        FixtureFile { entries }
    }
}

impl<T: ChatTransport> ChatTransport for RecordingTransport<T> {
    fn send(&self, tag: RequestTag, request: &ChatRequest) -> Result<HttpReply, String> {
        let reply = self.inner.send(tag, request)?;
        self.recorded
            .lock()
            .expect("recording lock poisoned")
            .push(FixtureEntry {
                tag,
                request: request.clone(),
                response: reply.clone(),
            });
        Ok(reply)
    }
}

/// Solver generations for one question, in request order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerBatch {
    pub generations: Vec<String>,
    /// Requests that failed, by request index.
    pub failures: Vec<(usize, BackendError)>,
}

impl AnswerBatch {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// A scored round with the texts that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendRound {
    pub entry: StepRecord,
    pub question: String,
    pub answers: AnswerBatch,
}

pub struct BackendClient<T> {
    config: BackendConfig,
    transport: T,
}

impl<T: ChatTransport> BackendClient<T> {
    pub fn new(config: BackendConfig, transport: T) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(Self { config, transport })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn request(&self, prompt: String, image: &str, temperature: f64) -> ChatRequest {
        ChatRequest {
            model: self.config.model_name.clone(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: vec![
                    ContentPart::ImageUrl {
                        image_url: ImageUrl {
                            url: image.to_owned(),
                        },
                    },
                    ContentPart::Text { text: prompt },
                ],
            }],
            temperature,
        }
    }

    /// Sends with retries on transport errors, HTTP 429 and 5xx. Other
    /// non-success statuses and unparseable bodies fail immediately.
    fn call(&self, tag: RequestTag, request: &ChatRequest) -> Result<String, BackendError> {
        let attempts = self.config.max_retries + 1;
        let mut last_error = String::new();
        let mut raw = None;
        for attempt in 0..attempts {
            if attempt > 0 && self.config.retry_backoff_ms > 0 {
                let delay = self
                    .config
                    .retry_backoff_ms
                    .saturating_mul(1 << (attempt - 1).min(10));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.transport.send(tag, request) {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return parse_chat_response(&reply.body);
                }
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    last_error = format!("HTTP {}", reply.status);
                    raw = Some(reply.body);
                }
                Ok(reply) => {
                    return Err(BackendError::Http {
                        status: reply.status,
                        body: reply.body,
                    })
                }
                Err(e) => {
                    last_error = e;
                    raw = None;
                }
            }
        }
        Err(BackendError::Transport {
            attempts,
            last_error,
            raw,
        })
    }

    pub fn propose_question(&self, image_ref: &str) -> Result<String, BackendError> {
        let image = image_url(image_ref)?;
        let req = self.request(
            self.config.proposer_prompt_template.clone(),
            &image,
            self.config.proposer_temperature,
        );
        self.call(
            RequestTag {
                role: Role::Proposer,
                index: 0,
            },
            &req,
        )
    }

    /// Issues the N solver requests concurrently. Partial failures keep the
    /// successes; if every request fails the first error is returned.
    pub fn sample_answers(
        &self,
        image_ref: &str,
        question: &str,
    ) -> Result<AnswerBatch, BackendError> {
        let image = image_url(image_ref)?;
        let prompt = self
            .config
            .solver_prompt_template
            .replace("{question}", question);
        let req = self.request(prompt, &image, self.config.solver_temperature);
        let results: Vec<Result<String, BackendError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..self.config.n_answers)
                .map(|index| {
                    let req = &req;
                    scope.spawn(move || {
                        self.call(
                            RequestTag {
                                role: Role::Solver,
                                index,
                            },
                            req,
                        )
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("solver request thread panicked"))
                .collect()
        });
        let mut generations = Vec::new();
        let mut failures = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(text) => generations.push(text),
                Err(e) => failures.push((i, e)),
            }
        }
        if generations.is_empty() {
            return Err(failures.swap_remove(0).1);
        }
        Ok(AnswerBatch {
            generations,
            failures,
        })
    }

    /// Runs one full round on an image. `round` becomes the entry's
    /// `step`.
    pub fn score_round(
        &self,
        round: usize,
        image_ref: &str,
        kind: SolverRewardKind,
        solver: &SolverRewardParams,
        proposer: &ProposerRewardParams,
    ) -> Result<BackendRound, BackendError> {
        let question = self.propose_question(image_ref)?;
        let answers = self.sample_answers(image_ref, &question)?;
        let score = score_generations(&answers.generations, kind, solver, proposer);
        let entry = StepRecord {
            step: round,
            difficulty_bin: None,
            entropy_nats: score.entropy_nats,
            solver_rewards: score.solver_rewards,
            proposer_reward: score.proposer_reward,
            solver_kl: 0.0,
            proposer_kl: 0.0,
            beta_solver: 0.0,
            beta_proposer: 0.0,
            baseline_solver: 0.0,
            baseline_proposer: 0.0,
            majority_fraction: score.majority_fraction,
            origin: Some(Origin::Backend),
        };
        Ok(BackendRound {
            entry,
            question,
            answers,
        })
    }
}
