//! OpenAI-compatible chat-completions client.
//!
//! Blocking requests with per-request timeout, exponential backoff on 5xx
//! and transport failures, and an in-flight request ceiling. The API key is
//! read from the configured environment variable at call time and is never
//! stored.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use super::{
    check_context, option_letter, Backend, BackendError, Completion, CompletionRequest, ScoreRequest,
    DEFAULT_CONTEXT_LIMIT,
};

const TOP_LOGPROBS: u32 = 20;
const BODY_EXCERPT_CHARS: usize = 200;

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_base_ms() -> u64 {
    500
}
fn default_context_limit() -> usize {
    DEFAULT_CONTEXT_LIMIT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpSpec {
    /// e.g. `http://localhost:8000/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key, if any.
    #[serde(default)]
    pub api_key_env_name: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_context_limit")]
    pub context_limit_tokens: usize,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
}

impl HttpSpec {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env_name: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            context_limit_tokens: default_context_limit(),
            backoff_base_ms: default_backoff_base_ms(),
        }
    }

    /// Upper bound on how long one logical call can take, retries included.
    pub fn worst_case_duration(&self) -> Duration {
        let attempts = u64::from(self.max_retries) + 1;
        let backoff: u64 = (0..self.max_retries).map(|i| self.backoff_base_ms << i).sum();
        Duration::from_millis(self.timeout_ms * attempts + backoff)
    }
}

#[derive(Debug, Serialize)]
pub(crate) struct ChatMessage<'a> {
    pub role: &'a str,
    pub content: &'a str,
}

#[derive(Debug, Serialize)]
pub(crate) struct ChatRequest<'a> {
    pub model: &'a str,
    pub messages: Vec<ChatMessage<'a>>,
    pub max_tokens: u32,
    pub logprobs: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u32>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct ChatResponse {
    pub choices: Vec<Choice>,
    #[serde(default)]
    pub usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct Choice {
    pub message: ResponseMessage,
    #[serde(default)]
    pub logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct ResponseMessage {
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct ChoiceLogprobs {
    #[serde(default)]
    pub content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct TokenLogprob {
    #[allow(dead_code)]
    pub token: String,
    #[allow(dead_code)]
    pub logprob: f64,
    #[serde(default)]
    pub top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Deserialize)]
pub(crate) struct Usage {
    pub prompt_tokens: u32,
}

/// Counting gate bounding concurrent requests.
struct InFlight {
    used: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            used: Mutex::new(0),
            freed: Condvar::new(),
            limit: limit.max(1),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().expect("in-flight lock");
        while *used >= self.limit {
            used = self.freed.wait(used).expect("in-flight lock");
        }
        *used += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpBackend {
    spec: HttpSpec,
    endpoint: String,
    client: reqwest::blocking::Client,
    in_flight: InFlight,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend").field("endpoint", &self.endpoint).finish()
    }
}

enum Attempt {
    Done(ChatResponse),
    Retry(String),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(spec: HttpSpec, max_in_flight: usize) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(spec.timeout_ms))
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        let endpoint = format!("{}/chat/completions", spec.base_url.trim_end_matches('/'));
        Ok(Self {
            spec,
            endpoint,
            client,
            in_flight: InFlight::new(max_in_flight),
        })
    }

    fn api_key(&self) -> Result<Option<String>, BackendError> {
        match &self.spec.api_key_env_name {
            None => Ok(None),
            Some(name) => std::env::var(name)
                .map(Some)
                .map_err(|_| BackendError::Config(format!("environment variable {name} is not set"))),
        }
    }

    fn attempt(&self, body: &ChatRequest<'_>) -> Result<Attempt, BackendError> {
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(key) = self.api_key()? {
            req = req.bearer_auth(key);
        }
        let _permit = self.in_flight.acquire();
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => {
                return Ok(Attempt::Retry(format!("transport: {e}")))
            }
            Err(e) => return Ok(Attempt::Fatal(BackendError::Capability(format!("transport: {e}")))),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Ok(Attempt::Retry(format!("reading body: {e}"))),
        };
        if status.is_server_error() {
            return Ok(Attempt::Retry(format!("status {}", status.as_u16())));
        }
        if !status.is_success() {
            return Ok(Attempt::Fatal(BackendError::Request {
                status: status.as_u16(),
                body_excerpt: text.chars().take(BODY_EXCERPT_CHARS).collect(),
            }));
        }
        serde_json::from_str(&text)
            .map(Attempt::Done)
            .map_err(|e| BackendError::Capability(format!("malformed chat-completions response: {e}")))
    }

    fn send(&self, body: &ChatRequest<'_>) -> Result<ChatResponse, BackendError> {
        let attempts = self.spec.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.spec.backoff_base_ms << (attempt - 1);
                debug!("retrying in {wait} ms after: {last_error}");
                thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(body)? {
                Attempt::Done(resp) => return Ok(resp),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => {
                    warn!("attempt {}/{attempts} failed: {msg}", attempt + 1);
                    last_error = msg;
                }
            }
        }
        Err(BackendError::Unavailable { attempts, last_error })
    }

    fn request<'a>(&'a self, prompt: &'a str, max_tokens: u32, top_logprobs: Option<u32>) -> ChatRequest<'a> {
        ChatRequest {
            model: &self.spec.model_name,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
            max_tokens,
            logprobs: true,
            top_logprobs,
        }
    }
}

/// Per-option logprobs from the first generated token's alternatives.
/// Tokens are matched to option letters after trimming whitespace and an
/// opening parenthesis; duplicates are merged by log-sum-exp. Letters absent
/// from the alternatives get the smallest listed logprob, an upper bound on
/// their true value.
pub(crate) fn letter_logprobs(top: &[TopLogprob], k_opts: usize) -> Result<Vec<f64>, BackendError> {
    let mut found: Vec<Option<f64>> = vec![None; k_opts];
    for alt in top {
        let token = alt.token.trim().trim_start_matches('(');
        let mut chars = token.chars();
        let (Some(c), None) = (chars.next(), chars.next()) else {
            continue;
        };
        let c = c.to_ascii_uppercase();
        if let Some(idx) = (0..k_opts).find(|i| option_letter(*i) == c) {
            found[idx] = Some(match found[idx] {
                None => alt.logprob,
                Some(prev) => {
                    let m = prev.max(alt.logprob);
                    m + ((prev - m).exp() + (alt.logprob - m).exp()).ln()
                }
            });
        }
    }
    if found.iter().all(Option::is_none) {
        return Err(BackendError::Capability(
            "no option letter among returned top logprobs".into(),
        ));
    }
    let floor = top.iter().map(|t| t.logprob).fold(f64::INFINITY, f64::min);
    let out: Vec<f64> = found.into_iter().map(|f| f.unwrap_or(floor)).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(BackendError::Capability("non-finite option logprob".into()));
    }
    Ok(out)
}

impl Backend for HttpBackend {
    fn context_limit_tokens(&self) -> usize {
        self.spec.context_limit_tokens
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        check_context(&request.prompt, self.spec.context_limit_tokens)?;
        let resp = self.send(&self.request(&request.prompt, request.max_tokens, None))?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Capability("response has no choices".into()))?;
        Ok(Completion {
            text: choice.message.content.unwrap_or_default(),
            option_logprobs: None,
            usage_tokens: resp.usage.map(|u| u.prompt_tokens),
        })
    }

    fn score_options(&self, request: &ScoreRequest) -> Result<Vec<f64>, BackendError> {
        if request.options.is_empty() {
            return Err(BackendError::Capability("no options to score".into()));
        }
        check_context(&request.prompt, self.spec.context_limit_tokens)?;
        let resp = self.send(&self.request(&request.prompt, 1, Some(TOP_LOGPROBS)))?;
        let top = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .and_then(|l| l.content)
            .and_then(|tokens| tokens.into_iter().next())
            .map(|t| t.top_logprobs)
            .ok_or_else(|| BackendError::Capability("response carries no token logprobs".into()))?;
        letter_logprobs(&top, request.options.len())
    }
}
