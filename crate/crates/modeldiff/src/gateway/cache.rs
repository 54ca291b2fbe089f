//! Disk cache of completed responses, keyed by request content.
//!
//! Each entry is a content-addressed JSON blob under the cache directory,
//! so pipeline reruns skip completed calls and judge/rater outputs stay
//! reproducible. Reads are lock-free; writes are serialized.

use std::path::PathBuf;
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::{ChatRequest, ChatResponse, GatewayError};

pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)
            .map_err(|e| GatewayError::Cache(format!("create {}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    /// Cache key over model, message content, and generation config.
    pub fn key(request: &ChatRequest) -> String {
        let mut hasher = Sha256::new();
        let serialized = serde_json::to_string(request).expect("request serializes");
        hasher.update(serialized.as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn get(&self, key: &str) -> Option<ChatResponse> {
        let path = self.dir.join(format!("{key}.json"));
        let data = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&data).ok()
    }

    pub fn put(&self, key: &str, response: &ChatResponse) -> Result<(), GatewayError> {
        let _guard = self.write_lock.lock().unwrap();
        let path = self.dir.join(format!("{key}.json"));
        let tmp = self.dir.join(format!("{key}.tmp"));
        let data = serde_json::to_string(response)
            .map_err(|e| GatewayError::Cache(e.to_string()))?;
        std::fs::write(&tmp, data).map_err(|e| GatewayError::Cache(e.to_string()))?;
        std::fs::rename(&tmp, &path).map_err(|e| GatewayError::Cache(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GenerationConfig, Sample};

    #[test]
    fn put_then_get_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path()).unwrap();
        let request = ChatRequest::new("m", "hello", GenerationConfig::default());
        let key = ResponseCache::key(&request);
        assert!(cache.get(&key).is_none());
        let response = ChatResponse {
            samples: vec![Sample {
                text: "hi".into(),
                logprobs: None,
            }],
        };
        cache.put(&key, &response).unwrap();
        assert_eq!(cache.get(&key).unwrap(), response);
    }

    #[test]
    fn distinct_configs_have_distinct_keys() {
        let a = ChatRequest::new("m", "hello", GenerationConfig::default());
        let mut b = a.clone();
        b.gen.temperature = 1.0;
        assert_ne!(ResponseCache::key(&a), ResponseCache::key(&b));
    }
}
