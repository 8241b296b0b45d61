//! Chat-completion access to a pool of model endpoints.
//!
//! A [`ChatBackend`] performs a single attempt; [`generate`] adds retries with
//! exponential backoff, and [`generate_batch`] fans a request list out over a
//! bounded number of worker threads while keeping results in request order.
//! The HTTP backend speaks the OpenAI-compatible `/v1/chat/completions` shape;
//! [`MockBackend`] derives text from a hash of the request so whole pipeline
//! runs are reproducible without a model.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus_model::GenerationParams;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub model_id: String,
    pub base_url: String,
    /// Name of the environment variable holding the bearer token, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
    /// Seconds.
    #[serde(default = "default_timeout")]
    pub request_timeout: u64,
}

fn default_timeout() -> u64 {
    120
}

impl ModelEndpoint {
    pub fn new(model_id: impl Into<String>, base_url: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            base_url: base_url.into(),
            auth_token_env: None,
            request_timeout: default_timeout(),
        }
    }

    /// Full URL of the chat-completions route. A base URL that already ends
    /// in `/v1` is not given a second one.
    pub fn completions_url(&self) -> String {
        let base = self.base_url.trim_end_matches('/');
        if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub prompt: String,
    pub params: GenerationParams,
    /// Number of enumerated items the prompt asks for. Not sent over the
    /// wire; lets the mock backend answer in the requested shape.
    #[serde(skip)]
    pub expected_items: Option<usize>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.is_empty() {
            return Err(GatewayError::Validation("prompt must not be empty".into()));
        }
        self.params.validate().map_err(GatewayError::Validation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub model_id: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    /// How many attempts the successful call took.
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Outcome of one failed attempt, as reported by a backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttemptError {
    /// Timeouts, connection failures, 429 and 5xx.
    Transient { status: Option<u16>, message: String },
    /// Any other non-success status. Not retried.
    Rejected { status: u16, message: String },
    Protocol(String),
    Config(String),
}

/// Performs a single chat-completion attempt.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, endpoint: &ModelEndpoint, request: &ChatRequest) -> Result<ChatResponse, AttemptError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
    /// Relative jitter; 0.2 means ±20%.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let nominal = self.base_delay_ms as f64 * self.factor.powi(retry.saturating_sub(1) as i32);
        let spread = if self.jitter > 0.0 {
            rand::thread_rng().gen_range(-self.jitter..=self.jitter)
        } else {
            0.0
        };
        Duration::from_secs_f64((nominal * (1.0 + spread)).max(0.0) / 1000.0)
    }
}

/// Sends `request` to `endpoint`, retrying transient failures.
pub fn generate(
    backend: &dyn ChatBackend,
    endpoint: &ModelEndpoint,
    request: &ChatRequest,
    retry: &RetryPolicy,
) -> Result<ChatResponse, GatewayError> {
    request.validate()?;
    let max_attempts = retry.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match backend.complete(endpoint, request) {
            Ok(mut response) => {
                response.attempts = attempt;
                return Ok(response);
            }
            Err(AttemptError::Transient { status, message }) => {
                if attempt >= max_attempts {
                    return Err(GatewayError::Transport {
                        attempts: attempt,
                        status,
                        message,
                    });
                }
                log::debug!("{}: attempt {attempt} failed ({message}), retrying", endpoint.model_id);
                std::thread::sleep(retry.delay(attempt));
                attempt += 1;
            }
            Err(AttemptError::Rejected { status, message }) => {
                return Err(GatewayError::Transport {
                    attempts: attempt,
                    status: Some(status),
                    message,
                })
            }
            Err(AttemptError::Protocol(message)) => return Err(GatewayError::Protocol(message)),
            Err(AttemptError::Config(message)) => return Err(GatewayError::Config(message)),
        }
    }
}

/// Round-robin assignment: item `i` goes to `pool[i % pool.len()]`.
pub fn route_even(pool: &[ModelEndpoint], item_index: usize) -> Result<&ModelEndpoint, GatewayError> {
    if pool.is_empty() {
        return Err(GatewayError::Config("model pool is empty".into()));
    }
    Ok(&pool[item_index % pool.len()])
}

/// Runs every request with at most `max_in_flight` outstanding at once.
/// `result[i]` always belongs to `requests[i]`; request `i` is routed with
/// [`route_even`] using `i` as the item index.
pub fn generate_batch(
    backend: &dyn ChatBackend,
    pool: &[ModelEndpoint],
    requests: &[ChatRequest],
    max_in_flight: usize,
    retry: &RetryPolicy,
) -> Vec<Result<ChatResponse, GatewayError>> {
    let workers = max_in_flight.max(1).min(requests.len());
    let mut results: Vec<Option<Result<ChatResponse, GatewayError>>> = vec![None; requests.len()];
    if requests.is_empty() {
        return Vec::new();
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= requests.len() {
                    break;
                }
                let result = route_even(pool, i).and_then(|endpoint| generate(backend, endpoint, &requests[i], retry));
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, result) in rx {
            results[i] = Some(result);
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("every slot is filled by a worker"))
        .collect()
}

/// Deterministic stand-in for a model server.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockBackend {
    pub seed: u64,
    /// Simulated latency range in milliseconds, drawn per request.
    pub latency_ms: Option<(u64, u64)>,
    /// In enumerated answers, every `k`-th item repeats the previous one
    /// verbatim, to exercise deduplication.
    pub duplicate_every: Option<usize>,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn rng_for(&self, endpoint: &ModelEndpoint, request: &ChatRequest) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        for part in [
            endpoint.model_id.as_str(),
            request.system.as_deref().unwrap_or(""),
            request.prompt.as_str(),
        ] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        hasher.update(request.params.seed.unwrap_or(0).to_le_bytes());
        ChaCha8Rng::from_seed(hasher.finalize().into())
    }

    /// The text this backend answers for `request` sent to `endpoint`.
    pub fn text_for(&self, endpoint: &ModelEndpoint, request: &ChatRequest) -> String {
        let mut rng = self.rng_for(endpoint, request);
        match request.expected_items {
            Some(count) => {
                let mut items: Vec<String> = Vec::with_capacity(count);
                for j in 1..=count {
                    let repeat = matches!(self.duplicate_every, Some(k) if k > 0 && j % k == 0 && j > 1);
                    let item = if repeat {
                        items[j - 2].clone()
                    } else {
                        mock_paragraph(&mut rng, 2..=4)
                    };
                    items.push(item);
                }
                items
                    .iter()
                    .enumerate()
                    .map(|(i, item)| format!("{}. {item}", i + 1))
                    .collect::<Vec<_>>()
                    .join("\n")
            }
            None => mock_paragraph(&mut rng, 3..=6),
        }
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, endpoint: &ModelEndpoint, request: &ChatRequest) -> Result<ChatResponse, AttemptError> {
        let started = Instant::now();
        if let Some((lo, hi)) = self.latency_ms {
            let mut rng = self.rng_for(endpoint, request);
            let ms = rng.gen_range(lo..=hi.max(lo));
            std::thread::sleep(Duration::from_millis(ms));
        }
        let text = self.text_for(endpoint, request);
        let prompt_tokens = request.prompt.split_whitespace().count() as u64;
        let completion_tokens = text.split_whitespace().count() as u64;
        Ok(ChatResponse {
            text,
            model_id: endpoint.model_id.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
            usage: Some(Usage {
                prompt_tokens,
                completion_tokens,
                total_tokens: prompt_tokens + completion_tokens,
            }),
            attempts: 1,
        })
    }
}

const NAMES: &[&str] = &[
    "Maya", "Jonas", "Priya", "Tomas", "Aisha", "Dev", "Lena", "Marcus", "Sofia", "Kenji", "Nora",
    "Omar", "Hannah", "Luis", "Grace", "Ravi", "Elena", "Sam", "Ines", "Theo",
];
const VERBS: &[&str] = &[
    "forgot", "noticed", "lost", "missed", "found", "carried", "dropped", "reread", "ignored",
    "postponed", "cancelled", "rewrote", "checked", "repaired", "signed", "returned", "delayed",
    "packed", "doubted", "questioned",
];
const ADJECTIVES: &[&str] = &[
    "crowded", "late", "quiet", "broken", "unfinished", "borrowed", "overdue", "heavy", "blurry",
    "cold", "tangled", "urgent", "empty", "yellow", "noisy", "narrow", "shared", "worn", "final",
    "second",
];
const NOUNS: &[&str] = &[
    "report", "train", "lease", "phone", "invoice", "exam", "kitchen", "manager", "bike", "letter",
    "deadline", "landlord", "shift", "ticket", "laptop", "interview", "garden", "budget", "meeting",
    "neighbor", "class", "sister", "car", "contract", "apartment", "presentation", "doctor", "wallet",
];
const PLACES: &[&str] = &[
    "before lunch", "after the storm", "at the station", "during the meeting", "on Friday",
    "near the office", "at midnight", "before the holidays", "after work", "in the hallway",
    "at the clinic", "over the weekend", "on the bus", "at home", "by the river",
];
const FEELINGS: &[&str] = &[
    "anxious", "exhausted", "ashamed", "restless", "overwhelmed", "hopeless", "tense", "lonely",
    "frustrated", "numb",
];

fn mock_sentence(rng: &mut ChaCha8Rng) -> String {
    let pick = |rng: &mut ChaCha8Rng, words: &[&'static str]| *words.choose(rng).unwrap();
    match rng.gen_range(0..3) {
        0 => format!(
            "{} {} the {} {} {}.",
            pick(rng, NAMES),
            pick(rng, VERBS),
            pick(rng, ADJECTIVES),
            pick(rng, NOUNS),
            pick(rng, PLACES)
        ),
        1 => format!(
            "The {} {} felt {} because the {} was {}.",
            pick(rng, ADJECTIVES),
            pick(rng, NOUNS),
            pick(rng, FEELINGS),
            pick(rng, NOUNS),
            pick(rng, ADJECTIVES)
        ),
        _ => format!(
            "{} stayed {} {} and {} the {}.",
            pick(rng, NAMES),
            pick(rng, FEELINGS),
            pick(rng, PLACES),
            pick(rng, VERBS),
            pick(rng, NOUNS)
        ),
    }
}

fn mock_paragraph(rng: &mut ChaCha8Rng, sentences: std::ops::RangeInclusive<usize>) -> String {
    let count = rng.gen_range(sentences);
    (0..count).map(|_| mock_sentence(rng)).collect::<Vec<_>>().join(" ")
}

#[cfg(feature = "http")]
pub use http::HttpBackend;

#[cfg(feature = "http")]
mod http {
    use super::*;

    #[derive(Serialize)]
    struct WireMessage<'a> {
        role: &'static str,
        content: &'a str,
    }

    #[derive(Serialize)]
    struct WireRequest<'a> {
        model: &'a str,
        messages: Vec<WireMessage<'a>>,
        temperature: f64,
        top_p: f64,
        max_tokens: u32,
        #[serde(skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        n: u32,
        stream: bool,
    }

    #[derive(Deserialize)]
    struct WireResponse {
        choices: Vec<WireChoice>,
        #[serde(default)]
        usage: Option<Usage>,
    }

    #[derive(Deserialize)]
    struct WireChoice {
        message: WireChoiceMessage,
    }

    #[derive(Deserialize)]
    struct WireChoiceMessage {
        #[serde(default)]
        content: Option<String>,
    }

    /// OpenAI-compatible HTTP(S) client.
    pub struct HttpBackend {
        agent: ureq::Agent,
    }

    impl Default for HttpBackend {
        fn default() -> Self {
            Self::new()
        }
    }

    impl HttpBackend {
        pub fn new() -> Self {
            let agent = ureq::Agent::config_builder()
                .http_status_as_error(false)
                .build()
                .into();
            Self { agent }
        }
    }

    /// Token from the endpoint's environment variable, if one is configured.
    pub(crate) fn bearer_token(env_var: Option<&str>) -> Result<Option<String>, AttemptError> {
        match env_var {
            None => Ok(None),
            Some(name) => std::env::var(name)
                .map(Some)
                .map_err(|_| AttemptError::Config(format!("environment variable `{name}` is not set"))),
        }
    }

    /// POSTs a JSON body and returns the response text of a 2xx reply.
    pub(crate) fn post_json<B: Serialize>(
        agent: &ureq::Agent,
        url: &str,
        token: Option<&str>,
        timeout: Duration,
        body: &B,
    ) -> Result<String, AttemptError> {
        let mut request = agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = token {
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let result = request.config().timeout_global(Some(timeout)).build().send_json(body);
        let mut response = match result {
            Ok(r) => r,
            Err(ureq::Error::StatusCode(status)) => return Err(classify_status(status, String::new())),
            Err(e @ (ureq::Error::BadUri(_) | ureq::Error::Http(_))) => {
                return Err(AttemptError::Config(format!("bad endpoint URL `{url}`: {e}")))
            }
            Err(e) => {
                return Err(AttemptError::Transient {
                    status: None,
                    message: e.to_string(),
                })
            }
        };
        let status = response.status().as_u16();
        let body = response.body_mut().read_to_string().map_err(|e| AttemptError::Transient {
            status: Some(status),
            message: format!("failed to read response body: {e}"),
        })?;
        if (200..300).contains(&status) {
            Ok(body)
        } else {
            Err(classify_status(status, body))
        }
    }

    fn classify_status(status: u16, body: String) -> AttemptError {
        let mut message = format!("HTTP {status}");
        if !body.is_empty() {
            message.push_str(": ");
            message.push_str(body.chars().take(200).collect::<String>().trim());
        }
        if status == 429 || status >= 500 {
            AttemptError::Transient {
                status: Some(status),
                message,
            }
        } else {
            AttemptError::Rejected { status, message }
        }
    }

    impl ChatBackend for HttpBackend {
        fn complete(&self, endpoint: &ModelEndpoint, request: &ChatRequest) -> Result<ChatResponse, AttemptError> {
            let token = bearer_token(endpoint.auth_token_env.as_deref())?;
            let mut messages = Vec::with_capacity(2);
            if let Some(system) = &request.system {
                messages.push(WireMessage {
                    role: "system",
                    content: system,
                });
            }
            messages.push(WireMessage {
                role: "user",
                content: &request.prompt,
            });
            let body = WireRequest {
                model: &endpoint.model_id,
                messages,
                temperature: request.params.temperature,
                top_p: request.params.top_p,
                max_tokens: request.params.max_tokens,
                seed: request.params.seed,
                n: 1,
                stream: false,
            };
            let started = Instant::now();
            let text = post_json(
                &self.agent,
                &endpoint.completions_url(),
                token.as_deref(),
                Duration::from_secs(endpoint.request_timeout.max(1)),
                &body,
            )?;
            let parsed: WireResponse = serde_json::from_str(&text)
                .map_err(|e| AttemptError::Protocol(format!("malformed completion body: {e}")))?;
            let usage = parsed.usage;
            let content = parsed
                .choices
                .into_iter()
                .next()
                .and_then(|c| c.message.content)
                .ok_or_else(|| AttemptError::Protocol("completion has no choices[0].message.content".into()))?;
            Ok(ChatResponse {
                text: content,
                model_id: endpoint.model_id.clone(),
                latency_ms: started.elapsed().as_millis() as u64,
                usage,
                attempts: 1,
            })
        }
    }
}

#[cfg(feature = "http")]
pub(crate) use http::{bearer_token, post_json};
