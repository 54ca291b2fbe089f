//! Uniform access to chat-completion, embedding, and top-logprob endpoints.
//!
//! Two backends implement [`Gateway`]: a live OpenAI-compatible HTTP client
//! ([`live::LiveBackend`]) and a deterministic scripted mock
//! ([`mock::MockBackend`]) used for offline pipeline runs and tests.

pub mod cache;
pub mod fixtures;
pub mod live;
pub mod mock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("unknown model: {0}")]
    UnknownModel(String),
    #[error("no scripted response for model {model}, request hash {hash}")]
    MissingScript { model: String, hash: String },
    #[error("mock script for model {model} has {have} responses, {want} requested")]
    ScriptExhausted {
        model: String,
        have: usize,
        want: usize,
    },
    #[error("empty text at index {0}")]
    EmptyText(usize),
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("invalid logprobs: {0}")]
    InvalidLogprobs(String),
    #[error("http error for model {model}: {message}")]
    Http { model: String, message: String },
    #[error("retries exhausted after {attempts} attempts: {last_error}")]
    RetriesExhausted { attempts: u32, last_error: String },
    #[error("provider returned malformed body: {0}")]
    MalformedBody(String),
    #[error("mock responder error: {0}")]
    Responder(String),
    #[error("cache error: {0}")]
    Cache(String),
}

/// Sampling parameters for a completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Upper bound on generated tokens; the provider truncates at this
    /// length.
    pub max_new_tokens: usize,
    pub temperature: f64,
    /// When set, each sample carries a [`LogprobDump`] with this many
    /// alternatives per position.
    pub top_logprobs: Option<usize>,
    /// Number of independent samples to draw for the same request.
    pub n_samples: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 1024,
            temperature: 0.0,
            top_logprobs: None,
            n_samples: 1,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_new_tokens == 0 {
            return Err(GatewayError::InvalidConfig(
                "max_new_tokens must be >= 1".into(),
            ));
        }
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(GatewayError::InvalidConfig(
                "temperature must be a non-negative real".into(),
            ));
        }
        if self.n_samples == 0 {
            return Err(GatewayError::InvalidConfig("n_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-position top-k log-probabilities for one generated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobDump {
    /// The generated token sequence.
    pub tokens: Vec<String>,
    /// For each position, `(token, logprob-in-nats)` pairs sorted by
    /// descending log-probability.
    pub per_position: Vec<Vec<(String, f64)>>,
}

impl LogprobDump {
    /// Checks the shape contract: one inner list per token, each of length
    /// `k`, sorted descending, with non-positive entries.
    pub fn validate(&self, k: usize) -> Result<(), GatewayError> {
        if self.per_position.len() != self.tokens.len() {
            return Err(GatewayError::InvalidLogprobs(format!(
                "{} positions for {} tokens",
                self.per_position.len(),
                self.tokens.len()
            )));
        }
        for (pos, entries) in self.per_position.iter().enumerate() {
            if entries.len() != k {
                return Err(GatewayError::InvalidLogprobs(format!(
                    "position {pos}: {} entries, expected {k}",
                    entries.len()
                )));
            }
            let mut prev = f64::INFINITY;
            for (token, lp) in entries {
                if *lp > 0.0 || !lp.is_finite() && *lp != f64::NEG_INFINITY {
                    return Err(GatewayError::InvalidLogprobs(format!(
                        "position {pos}: token {token:?} has logprob {lp}"
                    )));
                }
                if *lp > prev {
                    return Err(GatewayError::InvalidLogprobs(format!(
                        "position {pos}: entries not sorted descending"
                    )));
                }
                prev = *lp;
            }
        }
        Ok(())
    }
}

/// One chat request. `assistant_prefix`, when set, asks the model to
/// continue an existing assistant turn (used for fork resampling).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system: Option<String>,
    pub user: String,
    pub assistant_prefix: Option<String>,
    pub gen: GenerationConfig,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, user: impl Into<String>, gen: GenerationConfig) -> Self {
        Self {
            model: model.into(),
            system: None,
            user: user.into(),
            assistant_prefix: None,
            gen,
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system = Some(system.into());
        self
    }

    pub fn with_assistant_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.assistant_prefix = Some(prefix.into());
        self
    }
}

/// One generated sample, with logprobs when the request asked for them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub text: String,
    pub logprobs: Option<LogprobDump>,
}

/// The full response to a [`ChatRequest`]: exactly `n_samples` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub samples: Vec<Sample>,
}

impl ChatResponse {
    /// The first (often only) sample's text.
    pub fn text(&self) -> &str {
        self.samples.first().map(|s| s.text.as_str()).unwrap_or("")
    }
}

/// A chat + embedding backend shared across pipeline stages.
pub trait Gateway: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    /// Embeds each text into a fixed-dimension row; row `i` corresponds to
    /// `texts[i]` and the dimension is constant across a run.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

impl<G: Gateway + ?Sized> Gateway for &G {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).chat(request)
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        (**self).embed(texts)
    }
}

impl<G: Gateway + ?Sized> Gateway for std::sync::Arc<G> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).chat(request)
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        (**self).embed(texts)
    }
}

/// Single completion call, the shape most pipeline stages use.
pub fn complete(
    gateway: &dyn Gateway,
    model: &str,
    system: Option<&str>,
    user: &str,
    gen: &GenerationConfig,
) -> Result<ChatResponse, GatewayError> {
    gen.validate()?;
    let mut req = ChatRequest::new(model, user, gen.clone());
    req.system = system.map(str::to_owned);
    gateway.chat(&req)
}

/// Runs a batch of requests with at most `parallelism` in flight. Results
/// are positionally aligned with the requests; a failing request yields an
/// error value at its index without affecting the others.
pub fn complete_batch(
    gateway: &dyn Gateway,
    requests: &[ChatRequest],
    parallelism: usize,
) -> Result<Vec<Result<ChatResponse, GatewayError>>, GatewayError> {
    if parallelism == 0 {
        return Err(GatewayError::InvalidConfig("parallelism must be >= 1".into()));
    }
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let workers = parallelism.min(requests.len());
    if workers == 1 {
        return Ok(requests.iter().map(|r| gateway.chat(r)).collect());
    }

    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<ChatResponse, GatewayError>>>> =
        requests.iter().map(|_| std::sync::Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= requests.len() {
                    break;
                }
                let result = gateway.chat(&requests[idx]);
                *results[idx].lock().unwrap() = Some(result);
            });
        }
    });

    Ok(results
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled every slot"))
        .collect())
}
