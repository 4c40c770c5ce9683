//! The answer -> feedback -> refine loop.
//!
//! Round 0 answers the query (after an optional chain-of-thought call whose
//! text conditions every later round). Each further round asks the model to
//! critique its current answer and then to revise it given that critique.
//! Every answer is scored over the option letters, giving a
//! [`ConfidenceRecord`] per round.

mod parse;
mod templates;

pub use parse::{parse_answer, render_answer, ANSWER_RENDERINGS};
pub use templates::{render, Templates};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    estimate_tokens, option_letter, Backend, BackendError, CallKind, CallMeta, CompletionRequest, ScoreRequest,
};
use crate::calibration::{argmax, ordered_sum, ConfidenceRecord};
use templates::{confidence_block, cot_block, history_block, options_block};

const ANSWER_MAX_TOKENS: u32 = 16;
const FEEDBACK_MAX_TOKENS: u32 = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("{query_id}: {source}")]
    Backend { query_id: String, source: BackendError },
    #[error("{query_id}: no answer could be extracted from {text:?}")]
    Extraction { query_id: String, text: String },
    #[error("{query_id}: empty feedback at round {round}")]
    EmptyFeedback { query_id: String, round: u32 },
    #[error("{query_id}: invalid query: {reason}")]
    InvalidQuery { query_id: String, reason: String },
    #[error("{query_id}: invalid confidence: {reason}")]
    InvalidConfidence { query_id: String, reason: String },
}

impl EngineError {
    /// True when the model service itself could not be reached or refused.
    pub fn is_backend_failure(&self) -> bool {
        matches!(
            self,
            Self::Backend {
                source: BackendError::Unavailable { .. } | BackendError::Request { .. } | BackendError::Config(_),
                ..
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub stem: String,
    pub options: Vec<String>,
    pub gold: usize,
}

impl Query {
    pub fn k_opts(&self) -> usize {
        self.options.len()
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let reason = if self.options.len() < 2 {
            Some(format!("needs at least 2 options, has {}", self.options.len()))
        } else if self.options.len() > 26 {
            Some("more than 26 options cannot be lettered".to_string())
        } else if self.gold >= self.options.len() {
            Some(format!("gold index {} out of range", self.gold))
        } else {
            None
        };
        match reason {
            Some(reason) => Err(EngineError::InvalidQuery {
                query_id: self.id.clone(),
                reason,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelfImproveMethod {
    Basic,
    Cot { max_cot_tokens: u32 },
}

impl SelfImproveMethod {
    pub const SHORT_COT_TOKENS: u32 = 128;
    pub const LONG_COT_TOKENS: u32 = 512;

    pub fn is_cot(&self) -> bool {
        matches!(self, Self::Cot { .. })
    }

    pub fn label(&self) -> String {
        match self {
            Self::Basic => "basic".into(),
            Self::Cot { max_cot_tokens } => format!("cot{max_cot_tokens}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    pub round: u32,
    /// Parsed answer, or the logit argmax when the text named no option.
    pub answer: usize,
    pub answer_text: String,
    /// The critique this round's answer responded to; absent at round 0.
    pub feedback: Option<String>,
    pub cot: Option<String>,
    pub record: ConfidenceRecord,
    /// True when the text named no option and the logit argmax was used.
    pub parse_fallback: bool,
    /// True when earlier exchanges were dropped to fit the context window,
    /// or when the round was cut short by an empty critique.
    pub truncated: bool,
    pub prompt_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub query: Query,
    pub method: SelfImproveMethod,
    pub template_hash: String,
    pub rounds: Vec<RoundState>,
    pub error: Option<String>,
    /// Whether `error` came from the model service itself.
    #[serde(default)]
    pub backend_failure: bool,
}

impl Transcript {
    pub fn last(&self) -> Option<&RoundState> {
        self.rounds.last()
    }

    /// Appends a finished round, or records the error that ended the
    /// transcript. An empty critique also marks the current round truncated.
    pub fn push(&mut self, step: Result<RoundState, EngineError>) -> Result<(), EngineError> {
        match step {
            Ok(state) => {
                self.rounds.push(state);
                Ok(())
            }
            Err(e) => {
                if let (EngineError::EmptyFeedback { .. }, Some(last)) = (&e, self.rounds.last_mut()) {
                    last.truncated = true;
                }
                self.error = Some(e.to_string());
                self.backend_failure = e.is_backend_failure();
                Err(e)
            }
        }
    }
}

/// Exponentiates option logprobs and renormalizes them to sum to one.
pub fn extract_option_confidence(option_logprobs: &[f64]) -> Result<Vec<f64>, String> {
    if option_logprobs.is_empty() {
        return Err("no option logprobs".into());
    }
    if option_logprobs.iter().any(|l| !l.is_finite()) {
        return Err("non-finite option logprob".into());
    }
    let max = option_logprobs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = option_logprobs.iter().map(|l| (l - max).exp()).collect();
    let sum = ordered_sum(&exps);
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Runs the loop for one method against one backend.
pub struct SelfImprover<'a> {
    backend: &'a dyn Backend,
    templates: &'a Templates,
    method: SelfImproveMethod,
}

impl<'a> SelfImprover<'a> {
    pub fn new(backend: &'a dyn Backend, method: SelfImproveMethod) -> Self {
        Self::with_templates(backend, method, Templates::v1())
    }

    pub fn with_templates(backend: &'a dyn Backend, method: SelfImproveMethod, templates: &'a Templates) -> Self {
        Self {
            backend,
            templates,
            method,
        }
    }

    pub fn method(&self) -> SelfImproveMethod {
        self.method
    }

    fn meta(&self, query: &Query, round: u32, kind: CallKind) -> CallMeta {
        CallMeta {
            query_id: query.id.clone(),
            round,
            kind,
            gold: query.gold,
            k_opts: query.k_opts(),
        }
    }

    fn backend_err(query: &Query) -> impl Fn(BackendError) -> EngineError + '_ {
        move |source| EngineError::Backend {
            query_id: query.id.clone(),
            source,
        }
    }

    pub fn answer_prompt(&self, query: &Query, cot: Option<&str>) -> String {
        render(
            self.templates.answer,
            &[
                ("stem", &query.stem),
                ("options", &options_block(&query.options)),
                ("cot", &cot_block(cot)),
            ],
        )
    }

    pub fn cot_prompt(&self, query: &Query) -> String {
        render(
            self.templates.cot,
            &[("stem", &query.stem), ("options", &options_block(&query.options))],
        )
    }

    pub fn feedback_prompt(&self, query: &Query, state: &RoundState, confidence: Option<f64>) -> String {
        render(
            self.templates.feedback,
            &[
                ("stem", &query.stem),
                ("options", &options_block(&query.options)),
                ("cot", &cot_block(state.cot.as_deref())),
                ("answer", &option_letter(state.answer).to_string()),
                ("confidence", &confidence_block(confidence)),
            ],
        )
    }

    /// Refine prompt for the last round in `history`, dropping the oldest
    /// earlier exchanges until it fits the backend's context window.
    /// Returns the prompt and whether anything was dropped.
    pub fn refine_prompt(&self, query: &Query, history: &[RoundState], feedback: &str) -> (String, bool) {
        let current = history.last().expect("refine needs at least one round");
        let exchanges: Vec<(char, String)> = history
            .windows(2)
            .filter_map(|w| Some((option_letter(w[0].answer), w[1].feedback.clone()?)))
            .collect();
        let options = options_block(&query.options);
        let cot = cot_block(current.cot.as_deref());
        let answer = option_letter(current.answer).to_string();
        let limit = self.backend.context_limit_tokens();
        let mut skip = 0;
        loop {
            let prompt = render(
                self.templates.refine,
                &[
                    ("stem", &query.stem),
                    ("options", &options),
                    ("cot", &cot),
                    ("history", &history_block(&exchanges[skip..])),
                    ("answer", &answer),
                    ("feedback", feedback),
                ],
            );
            if estimate_tokens(&prompt) <= limit || skip == exchanges.len() {
                return (prompt, skip > 0);
            }
            skip += 1;
        }
    }

    /// One scored answer: free-text completion, option scores, parsed letter.
    fn answer_round(
        &self,
        query: &Query,
        round: u32,
        kind: CallKind,
        prompt: String,
        cot: Option<String>,
        feedback: Option<String>,
    ) -> Result<RoundState, EngineError> {
        let berr = Self::backend_err(query);
        let meta = self.meta(query, round, kind);
        let completion = self
            .backend
            .complete(&CompletionRequest {
                prompt: prompt.clone(),
                max_tokens: ANSWER_MAX_TOKENS,
                meta: meta.clone(),
            })
            .map_err(&berr)?;
        let logprobs = match completion.option_logprobs {
            Some(lp) => lp,
            None => match self.backend.score_options(&ScoreRequest {
                prompt: prompt.clone(),
                options: query.options.clone(),
                meta,
            }) {
                Ok(lp) => lp,
                Err(BackendError::Capability(_)) => {
                    return Err(EngineError::Extraction {
                        query_id: query.id.clone(),
                        text: completion.text,
                    })
                }
                Err(e) => return Err(berr(e)),
            },
        };
        let invalid = |reason: String| EngineError::InvalidConfidence {
            query_id: query.id.clone(),
            reason,
        };
        if logprobs.len() != query.k_opts() {
            return Err(invalid(format!(
                "{} scores for {} options",
                logprobs.len(),
                query.k_opts()
            )));
        }
        let probs = extract_option_confidence(&logprobs).map_err(invalid)?;
        let chosen = argmax(&probs);
        let record = ConfidenceRecord {
            question_id: query.id.clone(),
            round,
            option_logits: logprobs,
            confidence: probs[chosen],
            option_probs: probs,
            chosen,
            correct: chosen == query.gold,
            gold: query.gold,
        };
        let parsed = parse_answer(&completion.text, query.k_opts());
        Ok(RoundState {
            round,
            answer: parsed.unwrap_or(chosen),
            parse_fallback: parsed.is_none(),
            answer_text: completion.text,
            feedback,
            cot,
            record,
            truncated: false,
            prompt_tokens: estimate_tokens(&prompt),
        })
    }

    /// Round 0. The CoT variant first generates reasoning capped at
    /// `max_cot_tokens`, then answers conditioned on it.
    pub fn initial_answer(&self, query: &Query) -> Result<RoundState, EngineError> {
        query.validate()?;
        let cot = match self.method {
            SelfImproveMethod::Basic => None,
            SelfImproveMethod::Cot { max_cot_tokens } => {
                let c = self
                    .backend
                    .complete(&CompletionRequest {
                        prompt: self.cot_prompt(query),
                        max_tokens: max_cot_tokens,
                        meta: self.meta(query, 0, CallKind::Cot),
                    })
                    .map_err(Self::backend_err(query))?;
                Some(c.text)
            }
        };
        let prompt = self.answer_prompt(query, cot.as_deref());
        self.answer_round(query, 0, CallKind::Answer, prompt, cot, None)
    }

    /// Critique of the answer in `state`. `confidence`, when given, is shown
    /// to the model alongside the answer.
    pub fn feedback(&self, query: &Query, state: &RoundState, confidence: Option<f64>) -> Result<String, EngineError> {
        let prompt = self.feedback_prompt(query, state, confidence);
        let c = self
            .backend
            .complete(&CompletionRequest {
                prompt,
                max_tokens: FEEDBACK_MAX_TOKENS,
                meta: self.meta(query, state.round, CallKind::Feedback),
            })
            .map_err(Self::backend_err(query))?;
        let text = c.text.trim();
        if text.is_empty() {
            return Err(EngineError::EmptyFeedback {
                query_id: query.id.clone(),
                round: state.round,
            });
        }
        Ok(text.to_string())
    }

    /// Revised answer for round `t + 1`, where `history` holds rounds
    /// `0..=t` and `feedback` critiques round `t`.
    pub fn refine(&self, query: &Query, history: &[RoundState], feedback: &str) -> Result<RoundState, EngineError> {
        let current = history.last().ok_or_else(|| EngineError::InvalidQuery {
            query_id: query.id.clone(),
            reason: "refine called without a previous round".into(),
        })?;
        let (prompt, truncated) = self.refine_prompt(query, history, feedback);
        let mut state = self.answer_round(
            query,
            current.round + 1,
            CallKind::Refine,
            prompt,
            current.cot.clone(),
            Some(feedback.to_string()),
        )?;
        state.truncated = truncated;
        Ok(state)
    }

    pub fn new_transcript(&self, query: &Query) -> Transcript {
        Transcript {
            query: query.clone(),
            method: self.method,
            template_hash: self.templates.hash().to_string(),
            rounds: Vec::new(),
            error: None,
            backend_failure: false,
        }
    }

    /// Transcript holding round 0, or the error that prevented it.
    pub fn start(&self, query: &Query) -> Transcript {
        let mut t = self.new_transcript(query);
        let _ = t.push(self.initial_answer(query));
        t
    }

    /// One feedback + refine step on a transcript that has no error yet.
    pub fn step(&self, transcript: &Transcript, confidence: Option<f64>) -> Result<RoundState, EngineError> {
        let query = &transcript.query;
        if let Some(err) = &transcript.error {
            return Err(EngineError::InvalidQuery {
                query_id: query.id.clone(),
                reason: format!("transcript already failed: {err}"),
            });
        }
        let current = transcript.rounds.last().ok_or_else(|| EngineError::InvalidQuery {
            query_id: query.id.clone(),
            reason: "transcript has no rounds".into(),
        })?;
        let feedback = self.feedback(query, current, confidence)?;
        self.refine(query, &transcript.rounds, &feedback)
    }

    pub fn advance(&self, transcript: &mut Transcript, confidence: Option<f64>) -> Result<(), EngineError> {
        let step = self.step(transcript, confidence);
        transcript.push(step)
    }

    /// Full loop: one initial answer and `rounds` improvement steps.
    pub fn run(&self, query: &Query, rounds: u32) -> Transcript {
        let mut t = self.start(query);
        for _ in 0..rounds {
            if t.error.is_some() || self.advance(&mut t, None).is_err() {
                break;
            }
        }
        t
    }
}
