//! Deterministic scripted backend for offline runs and tests.
//!
//! Responses are looked up by `(model, request hash)` where the hash covers
//! the system message, user message, and assistant prefix. Identical
//! requests therefore produce byte-identical outputs across runs. A model
//! may instead be served by a registered responder function, which the
//! bundled pipeline fixtures use to react to rendered prompt content.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatRequest, ChatResponse, Gateway, GatewayError, LogprobDump, Sample};
use crate::jsonl;

/// One scripted sample for a given request key.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<LogprobDump>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScriptLine {
    model: String,
    prompt_hash: String,
    response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logprobs: Option<LogprobDump>,
}

/// Scripted responses keyed by `(model, request hash)`. Multiple lines with
/// the same key are served in file order when a request asks for several
/// samples.
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    entries: BTreeMap<(String, String), Vec<ScriptEntry>>,
}

/// Digest of the message content that identifies a scripted request.
pub fn request_hash(system: Option<&str>, user: &str, assistant_prefix: Option<&str>) -> String {
    let mut hasher = Sha256::new();
    for part in [system, Some(user), assistant_prefix] {
        match part {
            Some(text) => {
                hasher.update([1u8]);
                hasher.update(text.as_bytes());
            }
            None => hasher.update([0u8]),
        }
        hasher.update([0x1f]);
    }
    hex::encode(&hasher.finalize()[..8])
}

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads a line-delimited script file of
    /// `{"model","prompt_hash","response","logprobs"?}` records.
    pub fn load(path: &Path) -> Result<Self, jsonl::JsonlError> {
        let lines: Vec<ScriptLine> = jsonl::read_all(path)?;
        let mut script = Self::new();
        for line in lines {
            script
                .entries
                .entry((line.model, line.prompt_hash))
                .or_default()
                .push(ScriptEntry {
                    response: line.response,
                    logprobs: line.logprobs,
                });
        }
        Ok(script)
    }

    pub fn push(
        &mut self,
        model: &str,
        system: Option<&str>,
        user: &str,
        assistant_prefix: Option<&str>,
        entry: ScriptEntry,
    ) {
        let hash = request_hash(system, user, assistant_prefix);
        self.entries
            .entry((model.to_string(), hash))
            .or_default()
            .push(entry);
    }

    fn lookup(&self, model: &str, hash: &str) -> Option<&[ScriptEntry]> {
        self.entries
            .get(&(model.to_string(), hash.to_string()))
            .map(|v| v.as_slice())
    }

    fn has_model(&self, model: &str) -> bool {
        self.entries.keys().any(|(m, _)| m == model)
    }
}

/// A responder is called once per requested sample with the sample index.
pub type ResponderFn = Arc<dyn Fn(&ChatRequest, usize) -> Result<String, String> + Send + Sync>;

/// Deterministic mock gateway backend.
pub struct MockBackend {
    script: MockScript,
    responders: BTreeMap<String, ResponderFn>,
    embed_dim: usize,
    embed_seed: u64,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl MockBackend {
    pub fn new() -> Self {
        Self {
            script: MockScript::new(),
            responders: BTreeMap::new(),
            embed_dim: 24,
            embed_seed: 0,
        }
    }

    pub fn with_embed_dim(mut self, dim: usize) -> Self {
        self.embed_dim = dim;
        self
    }

    pub fn with_embed_seed(mut self, seed: u64) -> Self {
        self.embed_seed = seed;
        self
    }

    pub fn with_script(mut self, script: MockScript) -> Self {
        self.script = script;
        self
    }

    /// Scripts a single plain-text response for `(model, user)` with no
    /// system message or prefix.
    pub fn script_text(&mut self, model: &str, user: &str, response: impl Into<String>) {
        self.script.push(
            model,
            None,
            user,
            None,
            ScriptEntry {
                response: response.into(),
                logprobs: None,
            },
        );
    }

    /// Scripts a full request key, appending to any existing sample list.
    pub fn script_entry(
        &mut self,
        model: &str,
        system: Option<&str>,
        user: &str,
        assistant_prefix: Option<&str>,
        entry: ScriptEntry,
    ) {
        self.script.push(model, system, user, assistant_prefix, entry);
    }

    /// Registers a responder function serving every request for `model`.
    pub fn register_responder(
        &mut self,
        model: &str,
        responder: impl Fn(&ChatRequest, usize) -> Result<String, String> + Send + Sync + 'static,
    ) {
        self.responders.insert(model.to_string(), Arc::new(responder));
    }

    fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.embed_seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut seed_bytes = [0u8; 8];
        seed_bytes.copy_from_slice(&digest[..8]);
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(seed_bytes));
        (0..self.embed_dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }
}

impl Gateway for MockBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.gen.validate()?;
        let n = request.gen.n_samples;

        if let Some(responder) = self.responders.get(&request.model) {
            let mut samples = Vec::with_capacity(n);
            for idx in 0..n {
                let text = responder(request, idx).map_err(GatewayError::Responder)?;
                samples.push(Sample {
                    text,
                    logprobs: None,
                });
            }
            return Ok(ChatResponse { samples });
        }

        let hash = request_hash(
            request.system.as_deref(),
            &request.user,
            request.assistant_prefix.as_deref(),
        );
        let entries = match self.script.lookup(&request.model, &hash) {
            Some(entries) => entries,
            None if self.script.has_model(&request.model) => {
                return Err(GatewayError::MissingScript {
                    model: request.model.clone(),
                    hash,
                })
            }
            None => return Err(GatewayError::UnknownModel(request.model.clone())),
        };
        if entries.len() < n {
            return Err(GatewayError::ScriptExhausted {
                model: request.model.clone(),
                have: entries.len(),
                want: n,
            });
        }
        let samples = entries[..n]
            .iter()
            .map(|e| {
                if let (Some(dump), Some(k)) = (&e.logprobs, request.gen.top_logprobs) {
                    dump.validate(k)?;
                }
                Ok(Sample {
                    text: e.response.clone(),
                    logprobs: e.logprobs.clone(),
                })
            })
            .collect::<Result<Vec<_>, GatewayError>>()?;
        Ok(ChatResponse { samples })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        for (i, text) in texts.iter().enumerate() {
            if text.is_empty() {
                return Err(GatewayError::EmptyText(i));
            }
        }
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::GenerationConfig;

    fn req(model: &str, user: &str) -> ChatRequest {
        ChatRequest::new(model, user, GenerationConfig::default())
    }

    #[test]
    fn scripted_lookup_is_deterministic() {
        let mut mock = MockBackend::new();
        mock.script_text("echo-A", "hi", "scripted response");
        let a = mock.chat(&req("echo-A", "hi")).unwrap();
        let b = mock.chat(&req("echo-A", "hi")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.text(), "scripted response");
    }

    #[test]
    fn multi_sample_script_preserves_order() {
        let mut mock = MockBackend::new();
        for i in 0..20 {
            mock.script_text("m", "q", format!("sample-{i}"));
        }
        let mut r = req("m", "q");
        r.gen.n_samples = 20;
        r.gen.temperature = 1.0;
        let resp = mock.chat(&r).unwrap();
        assert_eq!(resp.samples.len(), 20);
        for (i, s) in resp.samples.iter().enumerate() {
            assert_eq!(s.text, format!("sample-{i}"));
        }
    }

    #[test]
    fn exhausted_script_errors() {
        let mut mock = MockBackend::new();
        for i in 0..19 {
            mock.script_text("m", "q", format!("sample-{i}"));
        }
        let mut r = req("m", "q");
        r.gen.n_samples = 20;
        let err = mock.chat(&r).unwrap_err();
        assert!(matches!(err, GatewayError::ScriptExhausted { have: 19, want: 20, .. }));
    }

    #[test]
    fn unregistered_model_errors() {
        let mock = MockBackend::new();
        let err = mock.chat(&req("nope", "hi")).unwrap_err();
        assert!(err.to_string().contains("unknown model"));
    }

    #[test]
    fn embeddings_are_deterministic_and_shaped() {
        let mock = MockBackend::new().with_embed_dim(8);
        let rows = mock
            .embed(&["a".to_string(), "a".to_string(), "b".to_string()])
            .unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].len(), 8);
        assert_eq!(rows[0], rows[1]);
        assert_ne!(rows[0], rows[2]);
    }

    #[test]
    fn embed_rejects_empty_text() {
        let mock = MockBackend::new();
        let err = mock.embed(&["ok".to_string(), String::new()]).unwrap_err();
        assert!(matches!(err, GatewayError::EmptyText(1)));
    }

    #[test]
    fn embed_empty_list_is_empty_matrix() {
        let mock = MockBackend::new();
        assert!(mock.embed(&[]).unwrap().is_empty());
    }

    #[test]
    fn script_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.jsonl");
        let hash = request_hash(None, "hello", None);
        let line = format!(
            "{{\"model\":\"m\",\"prompt_hash\":\"{hash}\",\"response\":\"hi there\"}}\n"
        );
        std::fs::write(&path, line).unwrap();
        let script = MockScript::load(&path).unwrap();
        let mock = MockBackend::new().with_script(script);
        assert_eq!(mock.chat(&req("m", "hello")).unwrap().text(), "hi there");
    }

    #[test]
    fn responder_serves_per_sample_indices() {
        let mut mock = MockBackend::new();
        mock.register_responder("gen", |req, idx| Ok(format!("{}#{idx}", req.user)));
        let mut r = req("gen", "x");
        r.gen.n_samples = 3;
        let resp = mock.chat(&r).unwrap();
        let texts: Vec<&str> = resp.samples.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, vec!["x#0", "x#1", "x#2"]);
    }
}
