use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use demian_core::clock::{Clock, VirtualClock};
use demian_core::vlm::{ClientConfig, HttpTransport, RateLimiter, VlmClient, VlmError, VlmRequest};
use proptest::prelude::*;

struct Captured {
    path: String,
    authorization: Option<String>,
    body: serde_json::Value,
}

/// Serves one canned `(status, body)` per connection, recording requests.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let handle = thread::spawn(move || {
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut content_length = 0;
            let mut authorization = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap();
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => content_length = value.trim().parse().unwrap(),
                    "authorization" => authorization = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; content_length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured {
                path: request_line.split_whitespace().nth(1).unwrap().to_string(),
                authorization,
                body: serde_json::from_slice(&buf).unwrap(),
            });
            let reply = format!(
                "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/v1"), seen, handle)
}

fn request() -> VlmRequest {
    VlmRequest {
        frames: vec!["frame://ep/0".into(), "frame://ep/9".into()],
        system: "sys".into(),
        user: "describe".into(),
        max_output_tokens: 256,
        tag: None,
    }
}

fn completion(text: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": text}}],
        "usage": {"prompt_tokens": 8200, "completion_tokens": 31},
    })
    .to_string()
}

#[test]
fn http_transport_retries_429_then_succeeds() {
    let (endpoint, seen, server) = serve(vec![
        (429, r#"{"error":"slow down"}"#.into()),
        (503, "unavailable".into()),
        (200, completion(r#"{"aspect":"arm_pose","caption":"Open gripper."}"#)),
    ]);
    let clock = Arc::new(VirtualClock::new());
    let cfg = ClientConfig {
        endpoint_url: endpoint.clone(),
        ..ClientConfig::default()
    };
    let transport = Arc::new(HttpTransport::new(&endpoint, "test-key".into()).unwrap());
    let client = VlmClient::new(cfg, transport, clock.clone()).unwrap();
    let resp = client.complete(&request()).unwrap();
    server.join().unwrap();

    assert_eq!(resp.attempts, 3);
    assert_eq!(resp.input_tokens, 8200);
    assert_eq!(resp.output_tokens, 31);
    assert!(resp.raw_text.contains("Open gripper."));
    // backoff 1 s and 2 s, each within +-20%
    let waited = clock.now().as_secs_f64();
    assert!((2.4..=3.6).contains(&waited), "{waited}");

    let seen = seen.lock().unwrap();
    assert_eq!(seen.len(), 3);
    assert_eq!(seen[0].path, "/v1/chat/completions");
    assert_eq!(seen[0].authorization.as_deref(), Some("Bearer test-key"));
    assert_eq!(seen[0].body["model"], "Qwen/Qwen3-VL-30B-A3B-Instruct");
    assert_eq!(seen[0].body["max_tokens"], 256);
    assert_eq!(
        seen[0].body["messages"][1]["content"][2]["image_url"]["url"],
        "frame://ep/9"
    );
}

#[test]
fn http_transport_does_not_retry_client_errors() {
    let (endpoint, seen, server) = serve(vec![(401, r#"{"error":"bad key"}"#.into())]);
    let transport = Arc::new(HttpTransport::new(&endpoint, "wrong".into()).unwrap());
    let client = VlmClient::new(ClientConfig::default(), transport, Arc::new(VirtualClock::new())).unwrap();
    let err = client.complete(&request()).unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, VlmError::Rejected { status: 401, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = format!("http://{}/v1", listener.local_addr().unwrap());
    drop(listener);
    let transport = Arc::new(HttpTransport::new(&endpoint, "k".into()).unwrap());
    let cfg = ClientConfig {
        max_retries: 1,
        ..ClientConfig::default()
    };
    let client = VlmClient::new(cfg, transport, Arc::new(VirtualClock::new())).unwrap();
    match client.complete(&request()).unwrap_err() {
        VlmError::Exhausted { attempts: 2, last } => assert!(matches!(*last, VlmError::Transport(_))),
        other => panic!("unexpected {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rate_limiter_never_exceeds_window_capacity(rate in 0.5f64..20.0, n in 1usize..80, gaps in prop::collection::vec(0u64..400, 80)) {
        let clock = VirtualClock::new();
        let mut limiter = RateLimiter::new(rate);
        let mut grants = Vec::with_capacity(n);
        for gap in gaps.iter().take(n) {
            clock.advance(Duration::from_millis(*gap));
            limiter.acquire(&clock);
            grants.push(clock.now_ns());
        }
        let cap = rate.ceil() as usize;
        let window_ns = (cap as f64 / rate * 1e9) as u64;
        for (i, &t) in grants.iter().enumerate() {
            let in_window = grants[i..].iter().take_while(|&&u| u < t + window_ns).count();
            prop_assert!(in_window <= cap, "{in_window} grants within {window_ns} ns at rate {rate}");
        }
    }
}
