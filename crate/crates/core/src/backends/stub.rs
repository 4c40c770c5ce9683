//! Minimal OpenAI-compatible stub server for tests.
//!
//! Serves `POST .../chat/completions` over plain HTTP/1.1 on a loopback
//! port, one thread per connection. Requests are classified by the prompt's
//! template (or as `Score` when `max_tokens == 1`), and failures can be
//! injected per class.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::{json, Value};

use crate::backends::{option_letter, CallKind};
use crate::engine::Templates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RequestClass {
    Answer,
    Cot,
    Feedback,
    Refine,
    Score,
    Other,
}

#[derive(Debug, Clone)]
pub struct StubConfig {
    /// Number of HTTP 500 responses injected for each request class before
    /// that class starts succeeding.
    pub fail_first: usize,
    /// Classes that always answer HTTP 500.
    pub always_fail: Vec<RequestClass>,
    /// Status and body returned for every request, when set.
    pub client_error: Option<(u16, String)>,
    /// Delay before responding.
    pub delay: Duration,
    /// Logprobs for option letters `A`, `B`, ... in score responses.
    pub letter_logprobs: Vec<f64>,
    pub answer_text: String,
    pub feedback_text: String,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            fail_first: 0,
            always_fail: Vec::new(),
            client_error: None,
            delay: Duration::ZERO,
            letter_logprobs: vec![-0.25, -1.9, -2.6, -3.2],
            answer_text: "The answer is A.".into(),
            feedback_text: "The answer looks plausible; re-check the key fact.".into(),
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct StubStats {
    pub requests: HashMap<RequestClass, usize>,
    pub failures: HashMap<RequestClass, usize>,
    /// Raw request bodies, in arrival order.
    pub bodies: Vec<String>,
    /// Values of the `Authorization` header, when present.
    pub authorization: Vec<String>,
}

impl StubStats {
    pub fn total_requests(&self) -> usize {
        self.requests.values().sum()
    }
}

pub struct StubServer {
    addr: SocketAddr,
    stats: Arc<Mutex<StubStats>>,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(config: StubConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(Mutex::new(StubStats::default()));
        let shutdown = Arc::new(AtomicBool::new(false));
        let config = Arc::new(config);
        let handle = {
            let stats = Arc::clone(&stats);
            let shutdown = Arc::clone(&shutdown);
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if shutdown.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let stats = Arc::clone(&stats);
                    let config = Arc::clone(&config);
                    thread::spawn(move || {
                        let _ = serve(stream, &config, &stats);
                    });
                }
            })
        };
        Ok(Self {
            addr,
            stats,
            shutdown,
            handle: Some(handle),
        })
    }

    /// Base URL to put in an HTTP backend spec.
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn stats(&self) -> StubStats {
        self.stats.lock().expect("stub stats").clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn classify(body: &Value) -> RequestClass {
    if body["max_tokens"].as_u64() == Some(1) {
        return RequestClass::Score;
    }
    let prompt = body["messages"]
        .as_array()
        .and_then(|m| m.last())
        .and_then(|m| m["content"].as_str())
        .unwrap_or_default();
    match Templates::v1().classify(prompt) {
        Some(CallKind::Answer) => RequestClass::Answer,
        Some(CallKind::Cot) => RequestClass::Cot,
        Some(CallKind::Feedback) => RequestClass::Feedback,
        Some(CallKind::Refine) => RequestClass::Refine,
        None => RequestClass::Other,
    }
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        401 => "Unauthorized",
        500 => "Internal Server Error",
        _ => "Status",
    };
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

fn serve(mut stream: TcpStream, config: &StubConfig, stats: &Mutex<StubStats>) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut content_length = 0usize;
    let mut authorization = None;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            match name.trim().to_ascii_lowercase().as_str() {
                "content-length" => content_length = value.trim().parse().unwrap_or(0),
                "authorization" => authorization = Some(value.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut raw = vec![0u8; content_length];
    reader.read_exact(&mut raw)?;
    let body_text = String::from_utf8_lossy(&raw).into_owned();
    let body: Value = serde_json::from_str(&body_text).unwrap_or(Value::Null);
    let class = classify(&body);

    let fail = {
        let mut s = stats.lock().expect("stub stats");
        s.bodies.push(body_text);
        if let Some(a) = authorization {
            s.authorization.push(a);
        }
        *s.requests.entry(class).or_default() += 1;
        let failed = s.failures.get(&class).copied().unwrap_or(0);
        let fail = config.always_fail.contains(&class) || failed < config.fail_first;
        if fail {
            *s.failures.entry(class).or_default() += 1;
        }
        fail
    };

    if !config.delay.is_zero() {
        thread::sleep(config.delay);
    }
    if let Some((status, msg)) = &config.client_error {
        return respond(&mut stream, *status, msg);
    }
    if fail {
        return respond(&mut stream, 500, r#"{"error":{"message":"injected failure"}}"#);
    }

    let payload = match class {
        RequestClass::Score => {
            let top: Vec<Value> = config
                .letter_logprobs
                .iter()
                .enumerate()
                .map(|(i, lp)| json!({"token": option_letter(i).to_string(), "logprob": lp}))
                .collect();
            json!({
                "choices": [{
                    "message": {"role": "assistant", "content": "A"},
                    "logprobs": {"content": [{"token": "A", "logprob": config.letter_logprobs[0], "top_logprobs": top}]}
                }],
                "usage": {"prompt_tokens": 1, "completion_tokens": 1, "total_tokens": 2}
            })
        }
        other => {
            let text = match other {
                RequestClass::Feedback => config.feedback_text.as_str(),
                RequestClass::Cot => "Step 1: restate the question. Step 2: compare the options.",
                _ => config.answer_text.as_str(),
            };
            json!({
                "choices": [{"message": {"role": "assistant", "content": text}}],
                "usage": {"prompt_tokens": 10, "completion_tokens": 5, "total_tokens": 15}
            })
        }
    };
    respond(&mut stream, 200, &payload.to_string())
}
