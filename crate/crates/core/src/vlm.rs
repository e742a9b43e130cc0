//! Chat-completions transport for the labeling model.
//!
//! [`VlmClient`] wraps a [`Transport`] with rate limiting and retries. Two
//! transports ship: [`HttpTransport`] speaks the OpenAI chat-completions wire
//! format, [`MockTransport`] answers from a script and falls back to a
//! hash-derived caption. All waiting goes through the injected [`Clock`].

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aspect::AspectKind;
use crate::clock::{Clock, SystemClock};

pub const DEFAULT_MODEL_ID: &str = "Qwen/Qwen3-VL-30B-A3B-Instruct";
pub const API_KEY_ENV: &str = "DEMIAN_API_KEY";
/// Mock input-token count per call (frames plus prompt).
pub const MOCK_INPUT_TOKENS: u32 = 8200;

/// Opaque frame reference: a URL or a `data:` URI.
pub type FrameRef = String;

/// Identifies the annotation unit a request belongs to. Never sent on the
/// wire; the mock uses it to look up scripted outcomes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RequestTag {
    pub segment_id: String,
    pub aspect: AspectKind,
}

#[derive(Debug, Clone)]
pub struct VlmRequest {
    pub frames: Vec<FrameRef>,
    pub system: String,
    pub user: String,
    pub max_output_tokens: u32,
    pub tag: Option<RequestTag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmResponse {
    pub raw_text: String,
    pub input_tokens: u32,
    pub output_tokens: u32,
    /// Seconds, measured on the client's clock.
    pub latency: f64,
    /// Transport attempts including the successful one.
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VlmError {
    #[error("rate limited (HTTP 429)")]
    RateLimited,
    #[error("server error (HTTP {status}): {body}")]
    Server { status: u16, body: String },
    #[error("request rejected (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed completion payload: {0}")]
    Decode(String),
    #[error("environment variable {API_KEY_ENV} is not set")]
    MissingApiKey,
    #[error("invalid client config: {0}")]
    Config(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<VlmError> },
}

impl VlmError {
    /// 429, 5xx, timeouts and connection failures are transient.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            VlmError::RateLimited | VlmError::Server { .. } | VlmError::Timeout | VlmError::Transport(_)
        )
    }

    /// Short machine-readable class, used in failure ledgers.
    pub fn kind(&self) -> &'static str {
        match self {
            VlmError::RateLimited => "rate_limited",
            VlmError::Server { .. } => "server_error",
            VlmError::Rejected { .. } => "rejected",
            VlmError::Timeout => "timeout",
            VlmError::Transport(_) => "transport",
            VlmError::Decode(_) => "decode",
            VlmError::MissingApiKey => "missing_api_key",
            VlmError::Config(_) => "config",
            VlmError::Exhausted { last, .. } => last.kind(),
        }
    }

    pub fn from_status(status: u16, body: String) -> Self {
        match status {
            429 => VlmError::RateLimited,
            500..=599 => VlmError::Server { status, body },
            _ => VlmError::Rejected { status, body },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint_url: String,
    pub model_id: String,
    pub max_retries: u32,
    /// Seconds before the first retry; doubles per attempt.
    pub base_backoff: f64,
    /// Relative jitter band applied to each backoff delay.
    pub jitter: f64,
    /// Requests per second.
    pub rate_limit: f64,
    /// Seconds.
    pub timeout: f64,
    pub seed: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://localhost:8000/v1".to_string(),
            model_id: DEFAULT_MODEL_ID.to_string(),
            max_retries: 3,
            base_backoff: 1.0,
            jitter: 0.2,
            rate_limit: 4.0,
            timeout: 120.0,
            seed: 0,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), VlmError> {
        if !(self.rate_limit > 0.0 && self.rate_limit.is_finite()) {
            return Err(VlmError::Config(format!(
                "rate_limit must be > 0, got {}",
                self.rate_limit
            )));
        }
        if !(self.base_backoff >= 0.0 && self.base_backoff.is_finite()) {
            return Err(VlmError::Config("base_backoff must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(VlmError::Config("jitter must be in [0, 1)".into()));
        }
        if !(self.timeout.is_finite() && self.timeout > 0.0) {
            return Err(VlmError::Config("timeout must be > 0".into()));
        }
        if self.model_id.is_empty() {
            return Err(VlmError::Config("model_id must be non-empty".into()));
        }
        Ok(())
    }

    /// Nominal (jitter-free) delay before retry number `attempt + 1`.
    pub fn nominal_backoff(&self, attempt: u32) -> f64 {
        self.base_backoff * 2f64.powi(attempt as i32)
    }
}

pub trait Transport: Send + Sync {
    fn send(&self, req: &VlmRequest, model_id: &str, timeout: Duration) -> Result<VlmResponse, VlmError>;
}

/// At most `capacity` starts in any sliding window of `capacity / rate`
/// seconds. With `capacity = ceil(rate)` the window is at least one second,
/// so no one-second window ever sees more than `ceil(rate)` starts.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: usize,
    window: Duration,
    starts: VecDeque<Duration>,
}

impl RateLimiter {
    pub fn new(rate: f64) -> Self {
        let capacity = rate.ceil().max(1.0) as usize;
        Self {
            capacity,
            window: Duration::from_secs_f64(capacity as f64 / rate),
            starts: VecDeque::with_capacity(capacity),
        }
    }

    /// Blocks (on `clock`) until a start is allowed, then records it.
    pub fn acquire(&mut self, clock: &dyn Clock) -> Duration {
        loop {
            let now = clock.now();
            while self.starts.front().is_some_and(|&s| s + self.window <= now) {
                self.starts.pop_front();
            }
            if self.starts.len() < self.capacity {
                self.starts.push_back(now);
                return now;
            }
            let oldest = self.starts[0];
            clock.sleep(oldest + self.window - now);
        }
    }
}

pub struct VlmClient {
    config: ClientConfig,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
    limiter: Mutex<RateLimiter>,
    jitter_rng: Mutex<ChaCha8Rng>,
}

impl VlmClient {
    pub fn new(config: ClientConfig, transport: Arc<dyn Transport>, clock: Arc<dyn Clock>) -> Result<Self, VlmError> {
        config.validate()?;
        Ok(Self {
            limiter: Mutex::new(RateLimiter::new(config.rate_limit)),
            jitter_rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed)),
            config,
            transport,
            clock,
        })
    }

    /// Client on real time talking to `config.endpoint_url`, key from the
    /// environment.
    pub fn http(config: ClientConfig) -> Result<Self, VlmError> {
        let transport = HttpTransport::from_env(&config.endpoint_url)?;
        Self::new(config, Arc::new(transport), Arc::new(SystemClock::new()))
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn model_id(&self) -> &str {
        &self.config.model_id
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let nominal = self.config.nominal_backoff(attempt);
        let u: f64 = if self.config.jitter > 0.0 {
            self.jitter_rng
                .lock()
                .expect("jitter rng poisoned")
                .random_range(-self.config.jitter..=self.config.jitter)
        } else {
            0.0
        };
        Duration::from_secs_f64(nominal * (1.0 + u))
    }

    /// Sends `req`, retrying transient failures up to `max_retries` times.
    pub fn complete(&self, req: &VlmRequest) -> Result<VlmResponse, VlmError> {
        let timeout = Duration::from_secs_f64(self.config.timeout);
        let mut attempt = 0u32;
        loop {
            let start = self
                .limiter
                .lock()
                .expect("rate limiter poisoned")
                .acquire(self.clock.as_ref());
            let result = self.transport.send(req, &self.config.model_id, timeout);
            match result {
                Ok(mut resp) => {
                    resp.latency = (self.clock.now().saturating_sub(start)).as_secs_f64();
                    resp.attempts = attempt + 1;
                    return Ok(resp);
                }
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    let delay = self.backoff(attempt);
                    log::debug!("transient {e}; retry {} in {:.2}s", attempt + 1, delay.as_secs_f64());
                    self.clock.sleep(delay);
                    attempt += 1;
                }
                Err(e) if e.is_retryable() => {
                    return Err(VlmError::Exhausted {
                        attempts: attempt + 1,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// OpenAI-compatible `POST {endpoint}/chat/completions`.
pub struct HttpTransport {
    endpoint: String,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(endpoint: &str, api_key: String) -> Result<Self, VlmError> {
        let http = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| VlmError::Config(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            api_key,
            http,
        })
    }

    pub fn from_env(endpoint: &str) -> Result<Self, VlmError> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| VlmError::MissingApiKey)?;
        Self::new(endpoint, key)
    }
}

/// Request body in the chat-completions shape; images go as `image_url` parts.
pub fn chat_request_body(req: &VlmRequest, model_id: &str) -> serde_json::Value {
    let mut user_parts = vec![json!({"type": "text", "text": req.user})];
    user_parts.extend(
        req.frames
            .iter()
            .map(|f| json!({"type": "image_url", "image_url": {"url": f}})),
    );
    json!({
        "model": model_id,
        "max_tokens": req.max_output_tokens,
        "messages": [
            {"role": "system", "content": req.system},
            {"role": "user", "content": user_parts},
        ],
    })
}

#[derive(Debug, Deserialize)]
struct ChatCompletion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

/// Extracts text and token usage from a chat-completions response body.
pub fn parse_chat_response(body: &str) -> Result<VlmResponse, VlmError> {
    let parsed: ChatCompletion = serde_json::from_str(body).map_err(|e| VlmError::Decode(e.to_string()))?;
    let text = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| VlmError::Decode("no choices[0].message.content".into()))?;
    let usage = parsed.usage.unwrap_or(Usage {
        prompt_tokens: 0,
        completion_tokens: 0,
    });
    Ok(VlmResponse {
        raw_text: text,
        input_tokens: usage.prompt_tokens,
        output_tokens: usage.completion_tokens,
        latency: 0.0,
        attempts: 1,
    })
}

impl Transport for HttpTransport {
    fn send(&self, req: &VlmRequest, model_id: &str, timeout: Duration) -> Result<VlmResponse, VlmError> {
        let url = format!("{}/chat/completions", self.endpoint);
        let resp = self
            .http
            .post(&url)
            .bearer_auth(&self.api_key)
            .timeout(timeout)
            .json(&chat_request_body(req, model_id))
            .send()
            .map_err(map_reqwest_error)?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(map_reqwest_error)?;
        if !(200..300).contains(&status) {
            return Err(VlmError::from_status(status, body));
        }
        parse_chat_response(&body)
    }
}

fn map_reqwest_error(e: reqwest::Error) -> VlmError {
    if e.is_timeout() {
        VlmError::Timeout
    } else {
        VlmError::Transport(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockErrorKind {
    RateLimited,
    ServerError,
    BadRequest,
    Timeout,
}

impl MockErrorKind {
    fn to_error(self) -> VlmError {
        match self {
            MockErrorKind::RateLimited => VlmError::RateLimited,
            MockErrorKind::ServerError => VlmError::Server {
                status: 503,
                body: "mock: service unavailable".into(),
            },
            MockErrorKind::BadRequest => VlmError::Rejected {
                status: 400,
                body: "mock: bad request".into(),
            },
            MockErrorKind::Timeout => VlmError::Timeout,
        }
    }
}

/// What the mock does for one scripted `(segment, aspect)` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockOutcome {
    /// Well-formed JSON answer with this caption.
    Caption { caption: String },
    /// Verbatim completion text.
    Raw { text: String },
    /// Fail with `error`; after `times` failures (if set) fall back to the
    /// hash-derived caption. Unset `times` fails forever.
    Fail {
        error: MockErrorKind,
        #[serde(default)]
        times: Option<u32>,
    },
    /// Call `n` uses `outcomes[min(n, len - 1)]`.
    Sequence { outcomes: Vec<MockOutcome> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub segment_id: String,
    pub aspect: AspectKind,
    #[serde(flatten)]
    pub outcome: MockOutcome,
    /// Simulated latency in seconds.
    #[serde(default)]
    pub latency: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct MockScript {
    entries: HashMap<(String, AspectKind), (MockOutcome, Option<f64>)>,
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, segment_id: &str, aspect: AspectKind, outcome: MockOutcome) -> Self {
        self.entries.insert((segment_id.to_string(), aspect), (outcome, None));
        self
    }

    pub fn with_latency(mut self, segment_id: &str, aspect: AspectKind, outcome: MockOutcome, secs: f64) -> Self {
        self.entries
            .insert((segment_id.to_string(), aspect), (outcome, Some(secs)));
        self
    }

    /// Parses a JSON array of [`MockEntry`].
    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let entries: Vec<MockEntry> = serde_json::from_str(s)?;
        Ok(Self {
            entries: entries
                .into_iter()
                .map(|e| ((e.segment_id, e.aspect), (e.outcome, e.latency)))
                .collect(),
        })
    }
}

/// Deterministic stand-in for the labeling model.
pub struct MockTransport {
    script: MockScript,
    seed: u64,
    input_tokens: u32,
    clock: Option<Arc<dyn Clock>>,
    calls: Mutex<HashMap<(String, AspectKind), u32>>,
}

impl MockTransport {
    pub fn new(script: MockScript, seed: u64) -> Self {
        Self {
            script,
            seed,
            input_tokens: MOCK_INPUT_TOKENS,
            clock: None,
            calls: Mutex::new(HashMap::new()),
        }
    }

    /// Scripted latencies are slept on this clock.
    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = Some(clock);
        self
    }

    /// Number of `send` calls observed for this key.
    pub fn calls(&self, segment_id: &str, aspect: AspectKind) -> u32 {
        self.calls
            .lock()
            .expect("mock call table poisoned")
            .get(&(segment_id.to_string(), aspect))
            .copied()
            .unwrap_or(0)
    }

    pub fn total_calls(&self) -> u32 {
        self.calls.lock().expect("mock call table poisoned").values().sum()
    }

    /// Hash-derived two-sentence caption for cache misses.
    pub fn fallback_caption(&self, segment_id: &str, aspect: AspectKind) -> String {
        fallback_caption(self.seed, segment_id, aspect)
    }

    fn respond(&self, tag: &RequestTag, outcome: &MockOutcome, call: u32) -> Result<VlmResponse, VlmError> {
        match outcome {
            MockOutcome::Caption { caption } => Ok(self.caption_response(tag.aspect, caption)),
            MockOutcome::Raw { text } => Ok(VlmResponse {
                raw_text: text.clone(),
                input_tokens: self.input_tokens,
                output_tokens: estimate_tokens(text),
                latency: 0.0,
                attempts: 1,
            }),
            MockOutcome::Fail { error, times } => match times {
                Some(n) if call >= *n => {
                    let caption = self.fallback_caption(&tag.segment_id, tag.aspect);
                    Ok(self.caption_response(tag.aspect, &caption))
                }
                _ => Err(error.to_error()),
            },
            MockOutcome::Sequence { outcomes } => {
                let Some(last) = outcomes.len().checked_sub(1) else {
                    return Err(VlmError::Decode("empty mock sequence".into()));
                };
                self.respond(tag, &outcomes[(call as usize).min(last)], call)
            }
        }
    }

    fn caption_response(&self, aspect: AspectKind, caption: &str) -> VlmResponse {
        VlmResponse {
            raw_text: json!({"aspect": aspect.as_str(), "caption": caption}).to_string(),
            input_tokens: self.input_tokens,
            output_tokens: estimate_tokens(caption),
            latency: 0.0,
            attempts: 1,
        }
    }
}

impl Transport for MockTransport {
    fn send(&self, req: &VlmRequest, _model_id: &str, _timeout: Duration) -> Result<VlmResponse, VlmError> {
        let tag = req.tag.clone().unwrap_or_else(|| RequestTag {
            segment_id: format!("untagged:{}", hex_digest(req.user.as_bytes())),
            aspect: AspectKind::PhysicalMotion,
        });
        let key = (tag.segment_id.clone(), tag.aspect);
        let call = {
            let mut calls = self.calls.lock().expect("mock call table poisoned");
            let n = calls.entry(key.clone()).or_insert(0);
            *n += 1;
            *n - 1
        };
        let scripted = self.script.entries.get(&key);
        if let (Some((_, Some(secs))), Some(clock)) = (scripted, &self.clock) {
            clock.sleep(Duration::from_secs_f64(*secs));
        }
        match scripted {
            Some((outcome, _)) => self.respond(&tag, outcome, call),
            None => {
                let caption = self.fallback_caption(&tag.segment_id, tag.aspect);
                Ok(self.caption_response(tag.aspect, &caption))
            }
        }
    }
}

/// Rough token count: one token per four bytes, at least one.
pub fn estimate_tokens(text: &str) -> u32 {
    (text.len() as u32).div_ceil(4).max(1)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn fallback_caption(seed: u64, segment_id: &str, aspect: AspectKind) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(segment_id.as_bytes());
    h.update([0u8]);
    h.update(aspect.as_str().as_bytes());
    let d = h.finalize();
    let pick = |list: &[&'static str], i: usize| list[d[i] as usize % list.len()];

    const OBJECTS: &[&str] = &[
        "handle",
        "drawer",
        "mug",
        "cabinet door",
        "kettle",
        "bowl",
        "faucet lever",
    ];
    let obj = pick(OBJECTS, 0);
    match aspect {
        AspectKind::PhysicalMotion => {
            const VERBS: &[&str] = &["reaches toward", "closes around", "pulls", "pushes", "lifts"];
            const AFTER: &[&str] = &[
                "then retracts slowly",
                "then moves it inward",
                "then releases it",
                "then holds still",
            ];
            format!("The gripper {} the {obj}. It {}.", pick(VERBS, 1), pick(AFTER, 2))
        }
        AspectKind::SceneComposition => {
            const ROOMS: &[&str] = &["a compact kitchen", "a galley kitchen", "an open-plan kitchen"];
            const EXTRA: &[&str] = &["a cutting board", "a toaster", "a sponge", "a fruit bowl"];
            format!(
                "The scene is {} with the {obj} on the counter. {} sits nearby.",
                pick(ROOMS, 1),
                capitalize(pick(EXTRA, 2))
            )
        }
        AspectKind::ArmPose => {
            const POSES: &[&str] = &["extended forward", "raised above the counter", "bent at the elbow"];
            const GRIP: &[&str] = &["open", "closed", "half open"];
            format!(
                "The arm is {} near the {obj}. The gripper is {}.",
                pick(POSES, 1),
                pick(GRIP, 2)
            )
        }
        AspectKind::Reasoning => {
            const PURPOSE: &[&str] = &[
                "prepares the workspace",
                "performs the main manipulation",
                "finishes the task",
            ];
            format!(
                "This segment {} by handling the {obj}. The next step depends on it being completed.",
                pick(PURPOSE, 1)
            )
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}
