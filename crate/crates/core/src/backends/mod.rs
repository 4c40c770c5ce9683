//! Model backends.
//!
//! A [`Backend`] realizes every model call of the self-improvement loop:
//! free-text completions and per-option scores for multiple-choice answers.
//! Two implementations ship: an OpenAI-compatible HTTP client and a seeded
//! synthetic oracle with configurable accuracy drift and confidence
//! inflation.

mod http;
pub mod stub;
mod synthetic;

pub use http::{HttpBackend, HttpSpec};
pub use synthetic::{SyntheticBackend, SyntheticSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default context window, in tokens.
pub const DEFAULT_CONTEXT_LIMIT: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempts: {last_error}")]
    Unavailable { attempts: u32, last_error: String },
    #[error("request rejected with status {status}: {body_excerpt}")]
    Request { status: u16, body_excerpt: String },
    #[error("backend capability missing: {0}")]
    Capability(String),
    #[error("prompt needs ~{tokens} tokens, context limit is {limit}")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("backend configuration: {0}")]
    Config(String),
}

/// Which step of the loop a call belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Answer,
    Cot,
    Feedback,
    Refine,
}

impl CallKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Answer => "answer",
            Self::Cot => "cot",
            Self::Feedback => "feedback",
            Self::Refine => "refine",
        }
    }
}

/// Identifies a call for deterministic backends. The gold index is only
/// consumed by the synthetic oracle; network backends ignore it.
#[derive(Debug, Clone, PartialEq)]
pub struct CallMeta {
    pub query_id: String,
    pub round: u32,
    pub kind: CallKind,
    pub gold: usize,
    pub k_opts: usize,
}

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub meta: CallMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub option_logprobs: Option<Vec<f64>>,
    pub usage_tokens: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct ScoreRequest {
    pub prompt: String,
    pub options: Vec<String>,
    pub meta: CallMeta,
}

pub trait Backend: Send + Sync {
    fn context_limit_tokens(&self) -> usize;

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError>;

    /// One logit per option, scored as the single-letter continuation of
    /// the prompt.
    fn score_options(&self, request: &ScoreRequest) -> Result<Vec<f64>, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    Http(HttpSpec),
    Synthetic(SyntheticSpec),
}

impl BackendSpec {
    pub fn context_limit_tokens(&self) -> usize {
        match self {
            Self::Http(h) => h.context_limit_tokens,
            Self::Synthetic(s) => s.context_limit_tokens,
        }
    }

    /// Lists every problem with the spec; empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.context_limit_tokens() == 0 {
            v.push("backend.context_limit_tokens must be > 0".to_string());
        }
        match self {
            Self::Http(h) => {
                if h.base_url.trim().is_empty() {
                    v.push("backend.base_url must not be empty".into());
                }
                if h.model_name.trim().is_empty() {
                    v.push("backend.model_name must not be empty".into());
                }
                if h.timeout_ms == 0 {
                    v.push("backend.timeout_ms must be > 0".into());
                }
            }
            Self::Synthetic(s) => {
                if !(0.0..=1.0).contains(&s.alpha) {
                    v.push(format!("backend.alpha must be in [0, 1], got {}", s.alpha));
                }
                if !s.gamma.is_finite() {
                    v.push("backend.gamma must be finite".into());
                }
                if !(s.delta >= 0.0 && s.delta.is_finite()) {
                    v.push(format!("backend.delta must be >= 0, got {}", s.delta));
                }
                if !(s.sigma >= 0.0 && s.sigma.is_finite()) {
                    v.push(format!("backend.sigma must be >= 0, got {}", s.sigma));
                }
                if s.k_opts < 2 {
                    v.push(format!("backend.k_opts must be >= 2, got {}", s.k_opts));
                }
            }
        }
        v
    }

    /// Instantiates the backend. `run_seed` keys the synthetic oracle;
    /// `max_in_flight` caps concurrent HTTP requests.
    pub fn build(&self, run_seed: u64, max_in_flight: usize) -> Result<Box<dyn Backend>, BackendError> {
        match self {
            Self::Http(h) => Ok(Box::new(HttpBackend::new(h.clone(), max_in_flight)?)),
            Self::Synthetic(s) => Ok(Box::new(SyntheticBackend::new(s.clone(), run_seed))),
        }
    }
}

/// Token estimate used for the context policy: one token per four chars.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

pub(crate) fn check_context(prompt: &str, limit: usize) -> Result<usize, BackendError> {
    let tokens = estimate_tokens(prompt);
    if tokens > limit {
        return Err(BackendError::ContextOverflow { tokens, limit });
    }
    Ok(tokens)
}

/// `A`, `B`, ... for option indices.
pub fn option_letter(index: usize) -> char {
    (b'A' + index as u8) as char
}
