#![cfg(feature = "remote")]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use causeway_core::abduction::{AbductionClient, ChatBackend, ChatRequest, HttpBackend, LlmConfig};
use causeway_core::Error;
use serde_json::Value;

struct Seen {
    auth: Option<String>,
    body: Value,
}

/// Serves one canned `(status, body)` per connection, in order, and reports
/// what each request carried.
fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut auth = None;
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let _ = tx.send(Seen {
                auth,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let mut out = stream;
            write!(
                out,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn completion(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

fn config(url: String, key_env: &str) -> LlmConfig {
    LlmConfig {
        endpoint: url,
        model: "test-model".into(),
        retries: 2,
        retry_backoff_ms: 1,
        timeout_secs: 10,
        api_key_env: key_env.into(),
        ..LlmConfig::default()
    }
}

fn request(prompt: &str) -> ChatRequest {
    ChatRequest {
        model: "test-model".into(),
        temperature: 0.0,
        prompt: prompt.into(),
    }
}

#[test]
fn sends_chat_completion_shape_and_reads_first_choice() {
    std::env::set_var("CAUSEWAY_WIRE_TEST_KEY", "sk-test");
    let (url, rx) = serve(vec![(200, completion("cause event 1\npredicate: THREATEN"))]);
    let backend = HttpBackend::new(&config(url, "CAUSEWAY_WIRE_TEST_KEY"));
    let out = backend.complete(&request("why?")).unwrap();
    assert_eq!(out, "cause event 1\npredicate: THREATEN");
    let seen = rx.recv().unwrap();
    assert_eq!(seen.auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(seen.body["model"], "test-model");
    assert_eq!(seen.body["temperature"], 0.0);
    assert_eq!(seen.body["messages"][0]["role"], "user");
    assert_eq!(seen.body["messages"][0]["content"], "why?");
}

#[test]
fn retries_server_errors() {
    let (url, rx) = serve(vec![
        (503, "busy".into()),
        (429, "slow down".into()),
        (200, completion("ok")),
    ]);
    let backend = HttpBackend::new(&config(url, "CAUSEWAY_WIRE_UNSET"));
    assert_eq!(backend.complete(&request("p")).unwrap(), "ok");
    assert_eq!(rx.iter().take(3).count(), 3);
}

#[test]
fn client_error_surfaces_body_without_retry() {
    let (url, rx) = serve(vec![(400, r#"{"error":"bad model"}"#.into())]);
    let backend = HttpBackend::new(&config(url, "CAUSEWAY_WIRE_UNSET"));
    match backend.complete(&request("p")) {
        Err(Error::Backend(msg)) => {
            assert!(msg.contains("400"), "{msg}");
            assert!(msg.contains("bad model"), "{msg}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(rx.iter().count(), 1);
}

#[test]
fn cached_client_hits_network_once() {
    let dir = tempfile::tempdir().unwrap();
    let (url, rx) = serve(vec![(200, completion("answer"))]);
    let mut cfg = config(url, "CAUSEWAY_WIRE_UNSET");
    cfg.cache_dir = Some(dir.path().to_path_buf());
    let client = AbductionClient::new(Box::new(HttpBackend::new(&cfg)), &cfg).unwrap();
    for _ in 0..5 {
        assert_eq!(client.generate_causes("same prompt").unwrap(), "answer");
    }
    assert_eq!(client.backend_calls(), 1);
    assert_eq!(rx.iter().count(), 1);
}
