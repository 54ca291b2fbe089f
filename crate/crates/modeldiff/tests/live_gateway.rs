//! Exercises the OpenAI-compatible backend against a local HTTP stub.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use modeldiff::gateway::cache::ResponseCache;
use modeldiff::gateway::live::{LiveBackend, LiveConfig};
use modeldiff::gateway::{ChatRequest, Gateway, GenerationConfig};

/// Serves canned HTTP responses, one per request, then stops.
fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let mut seen_bodies = Vec::new();
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            stream
                .set_read_timeout(Some(Duration::from_secs(5)))
                .unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            // read headers, then the content-length body
            let (mut header_end, mut content_length) = (None, 0usize);
            loop {
                let n = stream.read(&mut chunk).unwrap();
                if n == 0 {
                    break;
                }
                buf.extend_from_slice(&chunk[..n]);
                if header_end.is_none() {
                    if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                        header_end = Some(pos + 4);
                        let headers = String::from_utf8_lossy(&buf[..pos]);
                        for line in headers.lines() {
                            if let Some(v) = line.to_lowercase().strip_prefix("content-length:").map(str::trim).map(str::to_string) {
                                content_length = v.parse().unwrap_or(0);
                            }
                        }
                    }
                }
                if let Some(end) = header_end {
                    if buf.len() >= end + content_length {
                        break;
                    }
                }
            }
            if let Some(end) = header_end {
                seen_bodies.push(String::from_utf8_lossy(&buf[end..]).to_string());
            }
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
        seen_bodies
    });
    (format!("http://{addr}/v1"), handle)
}

fn chat_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}]
    })
    .to_string()
}

fn backend(base_url: String) -> LiveBackend {
    LiveBackend::new(LiveConfig {
        base_url,
        max_attempts: 3,
        initial_backoff: Duration::from_millis(10),
        timeout: Duration::from_secs(5),
        ..LiveConfig::default()
    })
    .unwrap()
}

#[test]
fn completes_against_openai_shape() {
    let (base_url, server) = serve(vec![(200, chat_body("hello from the stub"))]);
    let gw = backend(base_url);
    let response = gw
        .chat(&ChatRequest::new("test-model", "hi", GenerationConfig::default()))
        .unwrap();
    assert_eq!(response.text(), "hello from the stub");
    let bodies = server.join().unwrap();
    let sent: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(sent["model"], "test-model");
    assert_eq!(sent["messages"][0]["content"], "hi");
    assert_eq!(sent["max_tokens"], 1024);
}

#[test]
fn retries_transient_failures_with_backoff() {
    let (base_url, server) = serve(vec![
        (500, "{\"error\": \"boom\"}".into()),
        (429, "{\"error\": \"slow down\"}".into()),
        (200, chat_body("third time lucky")),
    ]);
    let gw = backend(base_url);
    let response = gw
        .chat(&ChatRequest::new("m", "q", GenerationConfig::default()))
        .unwrap();
    assert_eq!(response.text(), "third time lucky");
    assert_eq!(server.join().unwrap().len(), 3);
}

#[test]
fn exhausted_retries_error() {
    let (base_url, server) = serve(vec![
        (500, "{}".into()),
        (500, "{}".into()),
        (500, "{}".into()),
    ]);
    let gw = backend(base_url);
    let err = gw
        .chat(&ChatRequest::new("m", "q", GenerationConfig::default()))
        .unwrap_err();
    assert!(err.to_string().contains("retries exhausted"), "{err}");
    server.join().unwrap();
}

#[test]
fn cache_short_circuits_the_second_call() {
    // the server only answers once; the cached response must serve the rerun
    let (base_url, server) = serve(vec![(200, chat_body("cached"))]);
    let dir = tempfile::tempdir().unwrap();
    let gw = backend(base_url).with_cache(ResponseCache::new(dir.path()).unwrap());
    let request = ChatRequest::new("m", "q", GenerationConfig::default());
    let first = gw.chat(&request).unwrap();
    let second = gw.chat(&request).unwrap();
    assert_eq!(first, second);
    assert_eq!(server.join().unwrap().len(), 1);
}

#[test]
fn embeddings_parse_and_align() {
    let body = serde_json::json!({
        "data": [
            {"index": 1, "embedding": [0.3, 0.4]},
            {"index": 0, "embedding": [0.1, 0.2]}
        ]
    })
    .to_string();
    let (base_url, server) = serve(vec![(200, body)]);
    let gw = backend(base_url);
    let rows = gw.embed(&["first".into(), "second".into()]).unwrap();
    assert_eq!(rows, vec![vec![0.1, 0.2], vec![0.3, 0.4]]);
    server.join().unwrap();
}
