//! Talk to a live OpenAI-compatible endpoint with retries, pacing, and the
//! on-disk response cache.
//!
//! ```bash
//! export MODELDIFF_BASE_URL=https://api.openai.com/v1
//! export MODELDIFF_API_KEY=sk-...
//! export MODELDIFF_MODEL=gpt-4o-mini
//! cargo run -p modeldiff --example live_gateway
//! ```

use std::time::Duration;

use modeldiff::gateway::cache::ResponseCache;
use modeldiff::gateway::live::{LiveBackend, LiveConfig};
use modeldiff::gateway::{ChatRequest, Gateway, GenerationConfig};

fn main() -> anyhow::Result<()> {
    let Ok(base_url) = std::env::var("MODELDIFF_BASE_URL") else {
        println!(
            "set MODELDIFF_BASE_URL (and MODELDIFF_API_KEY / MODELDIFF_MODEL) to run this \
             example against a live endpoint; exiting"
        );
        return Ok(());
    };
    let model = std::env::var("MODELDIFF_MODEL").unwrap_or_else(|_| "gpt-4o-mini".into());

    let config = LiveConfig {
        base_url,
        api_key: std::env::var("MODELDIFF_API_KEY").ok(),
        max_attempts: 4,
        min_request_interval: Duration::from_millis(200),
        ..LiveConfig::default()
    };
    let cache_dir = std::env::temp_dir().join("modeldiff-cache");
    let gateway = LiveBackend::new(config)?.with_cache(ResponseCache::new(&cache_dir)?);

    let gen = GenerationConfig {
        max_new_tokens: 64,
        ..GenerationConfig::default()
    };
    let request = ChatRequest::new(&model, "In one sentence: what is model diffing?", gen)
        .with_system("Answer concisely.");

    let response = gateway.chat(&request)?;
    println!("{model}: {}", response.text());
    println!("(cached under {}; rerunning skips the network)", cache_dir.display());
    Ok(())
}
