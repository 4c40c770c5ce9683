//! Seeded synthetic model oracle.
//!
//! At round `t` the oracle answers correctly with probability
//! `a_t = clamp01(alpha + gamma * t)` and reports confidence
//! `c_t = clamp(a_t + delta * t + eps_t, 1/K, 1 - 1e-6)` on its chosen
//! option, with `eps_t ~ N(0, sigma)`. The chosen option gets logit `ln c_t`
//! and every other option `ln((1 - c_t) / (K - 1))`, so the softmax of the
//! returned logits reproduces `c_t` exactly.
//!
//! Correctness is decided by comparing one uniform draw per question with
//! `a_t`, and a wrong answer always picks the same distractor. The same
//! question therefore stays right (or wrong) while `a_t` is flat and only
//! flips when accuracy drifts. Noise is drawn fresh each round. All draws are
//! keyed by `(seed, question id, round, purpose)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    check_context, option_letter, Backend, BackendError, CallKind, CallMeta, Completion, CompletionRequest,
    ScoreRequest, DEFAULT_CONTEXT_LIMIT,
};
use crate::seeding::keyed_rng;

const MAX_CONFIDENCE: f64 = 1.0 - 1e-6;

const CRITIQUES: [&str; 4] = [
    "The answer {L} seems plausible, but the key premise should be re-checked against the question.",
    "Option {L} matches part of the question; confirm that no other option fits better.",
    "The reasoning behind {L} skips a step. Verify the definition the question relies on.",
    "Answer {L} looks consistent. Double-check for a common misconception before finalizing.",
];

const COT_STEPS: [&str; 4] = [
    "First, restate what the question is asking.",
    "Next, recall the relevant facts for each option.",
    "Then, eliminate options that contradict those facts.",
    "Finally, compare the remaining options carefully.",
];

fn default_context_limit() -> usize {
    DEFAULT_CONTEXT_LIMIT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Base accuracy at round 0.
    pub alpha: f64,
    /// Per-round accuracy drift.
    #[serde(default)]
    pub gamma: f64,
    /// Per-round confidence inflation.
    #[serde(default)]
    pub delta: f64,
    /// Standard deviation of confidence noise.
    #[serde(default)]
    pub sigma: f64,
    pub k_opts: usize,
    #[serde(default = "default_context_limit")]
    pub context_limit_tokens: usize,
}

/// What the oracle "believes" for one question at one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticDraw {
    pub chosen: usize,
    pub confidence: f64,
    pub correct: bool,
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    spec: SyntheticSpec,
    seed: u64,
}

impl SyntheticBackend {
    pub fn new(spec: SyntheticSpec, seed: u64) -> Self {
        Self { spec, seed }
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn accuracy_at(&self, round: u32) -> f64 {
        (self.spec.alpha + self.spec.gamma * round as f64).clamp(0.0, 1.0)
    }

    pub fn draw(&self, query_id: &str, round: u32, gold: usize, k_opts: usize) -> SyntheticDraw {
        let a_t = self.accuracy_at(round);
        let u: f64 = keyed_rng(self.seed, &[query_id, "correct"]).random();
        let correct = u < a_t;
        let chosen = if correct {
            gold
        } else {
            let offset = keyed_rng(self.seed, &[query_id, "distractor"]).random_range(1..k_opts);
            (gold + offset) % k_opts
        };
        let noise = if self.spec.sigma > 0.0 {
            let normal = Normal::new(0.0, self.spec.sigma).expect("sigma validated");
            normal.sample(&mut keyed_rng(self.seed, &[query_id, &round.to_string(), "noise"]))
        } else {
            0.0
        };
        let floor = 1.0 / k_opts as f64;
        let confidence = (a_t + self.spec.delta * round as f64 + noise).clamp(floor, MAX_CONFIDENCE);
        SyntheticDraw {
            chosen,
            confidence,
            correct,
        }
    }

    /// Logits realizing the drawn confidence on the chosen option.
    pub fn logits_for(draw: &SyntheticDraw, k_opts: usize) -> Vec<f64> {
        let other = ((1.0 - draw.confidence) / (k_opts - 1) as f64).ln();
        (0..k_opts)
            .map(|i| if i == draw.chosen { draw.confidence.ln() } else { other })
            .collect()
    }

    fn check_meta(meta: &CallMeta) -> Result<(), BackendError> {
        if meta.k_opts < 2 || meta.gold >= meta.k_opts {
            return Err(BackendError::Capability(format!(
                "{}: synthetic oracle needs >= 2 options and an in-range gold index",
                meta.query_id
            )));
        }
        Ok(())
    }

    fn critique(&self, meta: &CallMeta, letter: char) -> String {
        let pick = keyed_rng(self.seed, &[&meta.query_id, &meta.round.to_string(), "feedback"])
            .random_range(0..CRITIQUES.len());
        CRITIQUES[pick].replace("{L}", &letter.to_string())
    }

    fn chain_of_thought(&self, max_tokens: u32) -> String {
        let budget = max_tokens as usize * 4;
        let mut text = String::from("Let me think step by step.");
        for step in COT_STEPS.iter().cycle() {
            if text.len() + 1 + step.len() > budget {
                break;
            }
            text.push(' ');
            text.push_str(step);
        }
        text
    }
}

impl Backend for SyntheticBackend {
    fn context_limit_tokens(&self) -> usize {
        self.spec.context_limit_tokens
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let prompt_tokens = check_context(&request.prompt, self.spec.context_limit_tokens)?;
        let meta = &request.meta;
        Self::check_meta(meta)?;
        let draw = self.draw(&meta.query_id, meta.round, meta.gold, meta.k_opts);
        let letter = option_letter(draw.chosen);
        let text = match meta.kind {
            CallKind::Answer | CallKind::Refine => format!("The answer is {letter}."),
            CallKind::Feedback => self.critique(meta, letter),
            CallKind::Cot => self.chain_of_thought(request.max_tokens),
        };
        Ok(Completion {
            text,
            option_logprobs: None,
            usage_tokens: Some(prompt_tokens as u32),
        })
    }

    fn score_options(&self, request: &ScoreRequest) -> Result<Vec<f64>, BackendError> {
        check_context(&request.prompt, self.spec.context_limit_tokens)?;
        let meta = &request.meta;
        Self::check_meta(meta)?;
        if request.options.len() != meta.k_opts {
            return Err(BackendError::Capability(format!(
                "{}: {} options supplied for k_opts = {}",
                meta.query_id,
                request.options.len(),
                meta.k_opts
            )));
        }
        let draw = self.draw(&meta.query_id, meta.round, meta.gold, meta.k_opts);
        Ok(Self::logits_for(&draw, meta.k_opts))
    }
}
