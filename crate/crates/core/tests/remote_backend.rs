use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use ctxsel_core::lm_backend::{BackendConfig, LanguageModel, RemoteLm, Session};
use ctxsel_core::BackendError;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Seen {
    authorization: Option<String>,
    body: Value,
}

#[derive(Clone, Copy)]
enum Reply {
    Echo,
    Status(u16),
    /// Echoes a prompt whose last character has been replaced.
    Altered,
}

/// Character-level echo server following a script of replies; the last
/// entry repeats once the script runs out.
struct MockServer {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<Seen> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut length = 0usize;
    let mut authorization = None;
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    loop {
        line.clear();
        reader.read_line(&mut line).ok()?;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            break;
        }
        let (name, value) = trimmed.split_once(':')?;
        match name.to_ascii_lowercase().as_str() {
            "content-length" => length = value.trim().parse().ok()?,
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0u8; length];
    reader.read_exact(&mut body).ok()?;
    Some(Seen { authorization, body: serde_json::from_slice(&body).ok()? })
}

fn echo_body(prompt: &str) -> Value {
    let tokens: Vec<String> = prompt.chars().map(|c| c.to_string()).collect();
    let offsets: Vec<usize> = (0..tokens.len()).collect();
    let logprobs: Vec<Value> = (0..tokens.len())
        .map(|i| if i == 0 { Value::Null } else { json!(-0.1 * (i % 5 + 1) as f64) })
        .collect();
    json!({"choices": [{"text": prompt, "logprobs": {"tokens": tokens, "token_logprobs": logprobs, "text_offset": offsets}}]})
}

impl MockServer {
    fn start(script: Vec<Reply>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            let mut served = 0usize;
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let Some(req) = read_request(&mut stream) else { continue };
                let reply = script[served.min(script.len() - 1)];
                served += 1;
                let prompt = req.body["prompt"].as_str().unwrap_or_default().to_string();
                log.lock().unwrap().push(req);
                let (status, body) = match reply {
                    Reply::Echo => (200, echo_body(&prompt).to_string()),
                    Reply::Altered => {
                        let mut altered: String = prompt.chars().collect();
                        altered.pop();
                        altered.push('#');
                        (200, echo_body(&altered).to_string())
                    }
                    Reply::Status(code) => (code, json!({"error": "scripted"}).to_string()),
                };
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
        });
        MockServer { url, seen }
    }

    fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn client(server: &MockServer, retries: u32) -> RemoteLm {
    let mut config = BackendConfig::remote(server.url.clone(), "mock-model");
    config.retry_limit = retries;
    config.backoff_ms = 1;
    config.timeout_secs = 5.0;
    RemoteLm::new(&config).unwrap().with_api_key(Some("secret-key".into()))
}

#[test]
fn continuation_logprobs_come_from_the_echo() {
    let server = MockServer::start(vec![Reply::Echo]);
    let lm = client(&server, 0);
    let out = lm.continuation_logprobs("abc", "de").unwrap();
    assert_eq!(out.tokens, vec!["d", "e"]);
    assert_eq!(out.logprobs, vec![-0.1 * 4.0, -0.1 * 5.0]);
    let reqs = server.requests();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].authorization.as_deref(), Some("Bearer secret-key"));
    assert_eq!(reqs[0].body["prompt"], "abcde");
    assert_eq!(reqs[0].body["max_tokens"], 0);
    assert_eq!(reqs[0].body["echo"], true);
    assert_eq!(reqs[0].body["model"], "mock-model");
}

#[test]
fn server_errors_are_retried_until_success() {
    let server = MockServer::start(vec![Reply::Status(503), Reply::Status(429), Reply::Echo]);
    let lm = client(&server, 3);
    assert!(lm.continuation_logprobs("x", "yz").is_ok());
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn persistent_failure_reports_every_attempt() {
    let server = MockServer::start(vec![Reply::Status(500)]);
    let lm = client(&server, 2);
    match lm.continuation_logprobs("x", "y") {
        Err(BackendError::Transport { attempts, log }) => {
            assert_eq!(attempts, 3);
            assert_eq!(log.len(), 3);
            assert!(log.iter().all(|l| l.contains("500")));
        }
        other => panic!("expected transport error, got {other:?}"),
    }
    assert_eq!(server.requests().len(), 3);
}

#[test]
fn client_errors_and_mismatches_are_not_retried() {
    let server = MockServer::start(vec![Reply::Status(400)]);
    let lm = client(&server, 3);
    assert!(matches!(lm.continuation_logprobs("x", "y"), Err(BackendError::Rejected { status: 400, .. })));
    assert_eq!(server.requests().len(), 1);

    let server = MockServer::start(vec![Reply::Altered]);
    let lm = client(&server, 3);
    assert!(matches!(lm.continuation_logprobs("x", "yz"), Err(BackendError::TokenizationMismatch(_))));
    assert_eq!(server.requests().len(), 1);
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut config = BackendConfig::remote(format!("http://127.0.0.1:{port}/v1/completions"), "m");
    config.retry_limit = 1;
    config.backoff_ms = 1;
    let lm = RemoteLm::new(&config).unwrap();
    assert!(matches!(lm.continuation_logprobs("a", "b"), Err(BackendError::Transport { attempts: 2, .. })));
}

#[test]
fn session_cache_avoids_repeat_requests() {
    let server = MockServer::start(vec![Reply::Echo]);
    let session = Session::in_memory(Arc::new(client(&server, 0)));
    let first = session.continuation_logprobs("hello ", "world").unwrap();
    let second = session.continuation_logprobs("hello ", "world").unwrap();
    assert_eq!(first, second);
    assert_eq!(server.requests().len(), 1);
    let acct = session.accounting();
    assert_eq!(acct.backend_calls, 1);
    assert_eq!(acct.cache_hits, 1);
}

#[test]
fn controls_need_a_vocabulary_file() {
    let server = MockServer::start(vec![Reply::Echo]);
    let lm = client(&server, 0);
    assert!(matches!(lm.control_vocabulary(), Err(BackendError::Config(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    std::fs::write(&path, " alpha\n beta\n\n gamma\n").unwrap();
    let mut config = BackendConfig::remote(server.url.clone(), "mock-model");
    config.control_vocab_path = Some(path);
    let lm = RemoteLm::new(&config).unwrap();
    assert_eq!(lm.control_vocabulary().unwrap(), [" alpha", " beta", " gamma"]);
}
