//! OpenAI-compatible chat-completions backend over HTTPS.
//!
//! Targets the `/chat/completions` and `/embeddings` endpoints of any
//! provider speaking the OpenAI wire format. Transient failures are retried
//! with exponential backoff, requests are paced by a minimum inter-request
//! interval, and completed responses can be persisted in a
//! [`ResponseCache`](super::cache::ResponseCache).

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::json;

use super::cache::ResponseCache;
use super::{ChatRequest, ChatResponse, Gateway, GatewayError, LogprobDump, Sample};

/// Connection and retry settings for one provider endpoint.
#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Base URL up to but excluding `/chat/completions`, e.g.
    /// `https://api.openai.com/v1`.
    pub base_url: String,
    /// Separate base URL for embeddings; defaults to `base_url`.
    pub embed_base_url: Option<String>,
    pub embed_model: String,
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    /// Minimum spacing between consecutive requests to this provider.
    pub min_request_interval: Duration,
    /// Whether the provider accepts a trailing assistant message as a
    /// continuation prefix. When false, prefix requests are rewritten into
    /// the user turn with an explicit continuation instruction.
    pub supports_assistant_prefill: bool,
    /// Provider-side cap on `top_logprobs`.
    pub max_top_logprobs: usize,
    pub timeout: Duration,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            embed_base_url: None,
            embed_model: "text-embedding-3-small".into(),
            api_key: None,
            max_attempts: 4,
            initial_backoff: Duration::from_millis(500),
            min_request_interval: Duration::ZERO,
            supports_assistant_prefill: false,
            max_top_logprobs: 20,
            timeout: Duration::from_secs(120),
        }
    }
}

pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
    cache: Option<ResponseCache>,
    last_request: Mutex<Option<Instant>>,
}

/// Instruction used when a provider cannot prefill the assistant turn.
/// Runs that fall back to it should flag the fidelity caveat in their
/// manifest.
pub const PREFIX_FALLBACK_INSTRUCTION: &str =
    "Continue the assistant response below exactly from where it stops. \
     Output only the continuation.\n\n--- assistant response so far ---\n";

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Http {
                model: String::new(),
                message: e.to_string(),
            })?;
        Ok(Self {
            config,
            client,
            cache: None,
            last_request: Mutex::new(None),
        })
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    fn pace(&self) {
        if self.config.min_request_interval.is_zero() {
            return;
        }
        let mut last = self.last_request.lock().unwrap();
        if let Some(at) = *last {
            let elapsed = at.elapsed();
            if elapsed < self.config.min_request_interval {
                std::thread::sleep(self.config.min_request_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }

    fn build_messages(&self, request: &ChatRequest) -> Vec<serde_json::Value> {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        match (&request.assistant_prefix, self.config.supports_assistant_prefill) {
            (Some(prefix), true) => {
                messages.push(json!({"role": "user", "content": request.user}));
                messages.push(json!({"role": "assistant", "content": prefix}));
            }
            (Some(prefix), false) => {
                let user = format!(
                    "{}\n\n{}{}",
                    request.user, PREFIX_FALLBACK_INSTRUCTION, prefix
                );
                messages.push(json!({"role": "user", "content": user}));
            }
            (None, _) => messages.push(json!({"role": "user", "content": request.user})),
        }
        messages
    }

    fn build_body(&self, request: &ChatRequest) -> serde_json::Value {
        let mut body = json!({
            "model": request.model,
            "messages": self.build_messages(request),
            "temperature": request.gen.temperature,
            "max_tokens": request.gen.max_new_tokens,
            "n": request.gen.n_samples,
        });
        if let Some(k) = request.gen.top_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(k);
        }
        body
    }

    fn post(&self, url: &str, body: &serde_json::Value, model: &str) -> Result<String, GatewayError> {
        let mut backoff = self.config.initial_backoff;
        let mut last_error = String::new();
        for attempt in 1..=self.config.max_attempts {
            self.pace();
            let mut builder = self.client.post(url).json(body);
            if let Some(key) = &self.config.api_key {
                builder = builder.bearer_auth(key);
            }
            match builder.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    if status.is_success() {
                        return Ok(text);
                    }
                    last_error = format!("status {status}: {text}");
                    // Client errors other than rate limiting will not heal.
                    if status.as_u16() != 429 && status.is_client_error() {
                        return Err(GatewayError::Http {
                            model: model.to_string(),
                            message: last_error,
                        });
                    }
                }
                Err(e) => last_error = e.to_string(),
            }
            if attempt < self.config.max_attempts {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
        }
        Err(GatewayError::RetriesExhausted {
            attempts: self.config.max_attempts,
            last_error,
        })
    }
}

#[derive(Deserialize)]
struct ChatCompletionBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Vec<TokenLogprob>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

/// Parses an OpenAI-format chat-completions body into samples, validating
/// logprob shape when `top_k` was requested.
pub fn parse_chat_body(body: &str, top_k: Option<usize>) -> Result<ChatResponse, GatewayError> {
    let parsed: ChatCompletionBody =
        serde_json::from_str(body).map_err(|e| GatewayError::MalformedBody(e.to_string()))?;
    if parsed.choices.is_empty() {
        return Err(GatewayError::MalformedBody("no choices in body".into()));
    }
    let mut samples = Vec::with_capacity(parsed.choices.len());
    for choice in parsed.choices {
        let text = choice.message.content.unwrap_or_default();
        let logprobs = match (choice.logprobs, top_k) {
            (Some(lp), Some(k)) => {
                let tokens: Vec<String> = lp.content.iter().map(|t| t.token.clone()).collect();
                let per_position: Vec<Vec<(String, f64)>> = lp
                    .content
                    .into_iter()
                    .map(|t| {
                        let mut entries: Vec<(String, f64)> = t
                            .top_logprobs
                            .into_iter()
                            .map(|alt| (alt.token, alt.logprob))
                            .collect();
                        entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
                        entries
                    })
                    .collect();
                let dump = LogprobDump {
                    tokens,
                    per_position,
                };
                dump.validate(k)?;
                Some(dump)
            }
            _ => None,
        };
        samples.push(Sample { text, logprobs });
    }
    Ok(ChatResponse { samples })
}

#[derive(Deserialize)]
struct EmbeddingBody {
    data: Vec<EmbeddingRow>,
}

#[derive(Deserialize)]
struct EmbeddingRow {
    index: usize,
    embedding: Vec<f64>,
}

impl Gateway for LiveBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.gen.validate()?;
        if let Some(k) = request.gen.top_logprobs {
            if k > self.config.max_top_logprobs {
                return Err(GatewayError::InvalidConfig(format!(
                    "top_logprobs {k} exceeds provider maximum {}",
                    self.config.max_top_logprobs
                )));
            }
        }
        let key = ResponseCache::key(request);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key) {
                return Ok(hit);
            }
        }
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = self.build_body(request);
        let text = self.post(&url, &body, &request.model)?;
        let response = parse_chat_body(&text, request.gen.top_logprobs)?;
        if response.samples.len() != request.gen.n_samples {
            return Err(GatewayError::MalformedBody(format!(
                "{} choices returned for n={}",
                response.samples.len(),
                request.gen.n_samples
            )));
        }
        if let Some(cache) = &self.cache {
            cache.put(&key, &response)?;
        }
        Ok(response)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        for (i, text) in texts.iter().enumerate() {
            if text.is_empty() {
                return Err(GatewayError::EmptyText(i));
            }
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let base = self
            .config
            .embed_base_url
            .as_deref()
            .unwrap_or(&self.config.base_url);
        let url = format!("{}/embeddings", base.trim_end_matches('/'));
        let body = json!({"model": self.config.embed_model, "input": texts});
        let text = self.post(&url, &body, &self.config.embed_model)?;
        let parsed: EmbeddingBody =
            serde_json::from_str(&text).map_err(|e| GatewayError::MalformedBody(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(GatewayError::MalformedBody(format!(
                "{} embeddings for {} inputs",
                parsed.data.len(),
                texts.len()
            )));
        }
        let mut rows = parsed.data;
        rows.sort_by_key(|r| r.index);
        let dim = rows[0].embedding.len();
        if rows.iter().any(|r| r.embedding.len() != dim) {
            return Err(GatewayError::MalformedBody(
                "inconsistent embedding dimensions".into(),
            ));
        }
        Ok(rows.into_iter().map(|r| r.embedding).collect())
    }
}
