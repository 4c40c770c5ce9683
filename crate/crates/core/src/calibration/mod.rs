//! Confidence calibration primitives.
//!
//! Reliability binning and expected calibration error over per-question
//! predictions, plus temperature scaling (scalar and feature-conditioned)
//! fitted by minimizing the negative log-likelihood of gold options.

mod format;
mod latent;
mod temperature;

pub use format::{FormatError, TextFormat};
pub use latent::{logit_features, FeatureVector, LatentFitConfig, LatentNet};
pub use temperature::{
    apply_temperature, fit_latent_temperature, fit_scalar_temperature, golden_section_minimize, mean_nll,
    recalibrate_records, TemperatureModel, NLL_PROB_FLOOR, TAU_MAX, TAU_MIN,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of reliability bins (width 0.1 on `[0, 1]`).
pub const DEFAULT_BINS: usize = 10;

const PROB_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("input domain error: {0}")]
    InputDomain(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
}

pub type Result<T> = std::result::Result<T, CalibrationError>;

/// Anything that can be scored for calibration: an identifier, a stated
/// confidence and whether the prediction was right.
pub trait Scored {
    fn id(&self) -> &str;
    fn confidence(&self) -> f64;
    fn is_correct(&self) -> bool;
}

/// A bare (confidence, correctness) observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub id: String,
    pub confidence: f64,
    pub correct: bool,
}

impl Outcome {
    pub fn new(id: impl Into<String>, confidence: f64, correct: bool) -> Self {
        Self {
            id: id.into(),
            confidence,
            correct,
        }
    }
}

impl Scored for Outcome {
    fn id(&self) -> &str {
        &self.id
    }
    fn confidence(&self) -> f64 {
        self.confidence
    }
    fn is_correct(&self) -> bool {
        self.correct
    }
}

/// One (question, round) prediction over a fixed set of answer options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub question_id: String,
    pub round: u32,
    pub option_logits: Vec<f64>,
    pub option_probs: Vec<f64>,
    pub chosen: usize,
    pub confidence: f64,
    pub correct: bool,
    pub gold: usize,
}

impl ConfidenceRecord {
    /// Builds a record from option logits: probabilities are the plain
    /// softmax, the chosen option is the argmax (lowest index on ties).
    pub fn from_logits(
        question_id: impl Into<String>,
        round: u32,
        option_logits: Vec<f64>,
        gold: usize,
    ) -> Result<Self> {
        let question_id = question_id.into();
        if gold >= option_logits.len() {
            return Err(CalibrationError::InputDomain(format!(
                "{question_id}: gold index {gold} out of range for {} options",
                option_logits.len()
            )));
        }
        let option_probs = apply_temperature(&option_logits, 1.0)
            .map_err(|e| CalibrationError::InputDomain(format!("{question_id}: {e}")))?;
        Ok(Self::with_probs(question_id, round, option_logits, option_probs, gold))
    }

    fn with_probs(
        question_id: String,
        round: u32,
        option_logits: Vec<f64>,
        option_probs: Vec<f64>,
        gold: usize,
    ) -> Self {
        let chosen = argmax(&option_probs);
        Self {
            question_id,
            round,
            confidence: option_probs[chosen],
            correct: chosen == gold,
            option_logits,
            option_probs,
            chosen,
            gold,
        }
    }

    pub fn k_opts(&self) -> usize {
        self.option_logits.len()
    }

    /// Checks the record invariants: a proper distribution whose argmax is
    /// the chosen option and whose mass there is the stated confidence.
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(CalibrationError::InputDomain(format!("{}: {msg}", self.question_id)));
        let k = self.option_probs.len();
        if k < 2 || self.option_logits.len() != k {
            return err(format!("expected >= 2 options with matching logits, got {k}"));
        }
        if self.option_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return err("probability outside [0, 1]".into());
        }
        let sum: f64 = self.option_probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return err(format!("probabilities sum to {sum}"));
        }
        if self.chosen != argmax(&self.option_probs) {
            return err("chosen option is not the argmax".into());
        }
        if self.confidence != self.option_probs[self.chosen] {
            return err("confidence differs from chosen probability".into());
        }
        if self.correct != (self.chosen == self.gold) {
            return err("correctness flag inconsistent with gold".into());
        }
        Ok(())
    }
}

impl Scored for ConfidenceRecord {
    fn id(&self) -> &str {
        &self.question_id
    }
    fn confidence(&self) -> f64 {
        self.confidence
    }
    fn is_correct(&self) -> bool {
        self.correct
    }
}

/// Sum in ascending order, so permuting the inputs cannot change the result.
pub fn ordered_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub sum_confidence: f64,
    pub sum_correct: usize,
}

impl ReliabilityBin {
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_correct as f64 / self.count as f64)
    }

    pub fn mean_confidence(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_confidence / self.count as f64)
    }

    /// `|acc - conf|`, or `None` for an empty bin.
    pub fn gap(&self) -> Option<f64> {
        Some((self.accuracy()? - self.mean_confidence()?).abs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub bins: Vec<ReliabilityBin>,
    pub total: usize,
}

impl ReliabilityTable {
    pub fn empty(k_bins: usize) -> Self {
        let bins = (0..k_bins)
            .map(|k| ReliabilityBin {
                lower: k as f64 / k_bins as f64,
                upper: (k + 1) as f64 / k_bins as f64,
                count: 0,
                sum_confidence: 0.0,
                sum_correct: 0,
            })
            .collect();
        Self { bins, total: 0 }
    }

    pub fn k_bins(&self) -> usize {
        self.bins.len()
    }
}

/// Bin index for a confidence: half-open `[k/K, (k+1)/K)`, last bin closed.
pub fn bin_index(confidence: f64, k_bins: usize) -> usize {
    ((confidence * k_bins as f64).floor() as usize).min(k_bins - 1)
}

pub fn bin_records<S: Scored>(records: &[S], k_bins: usize) -> Result<ReliabilityTable> {
    if k_bins == 0 {
        return Err(CalibrationError::InputDomain("k_bins must be >= 1".into()));
    }
    let mut table = ReliabilityTable::empty(k_bins);
    for r in records {
        let c = r.confidence();
        if !c.is_finite() || !(0.0..=1.0).contains(&c) {
            return Err(CalibrationError::InputDomain(format!(
                "{}: confidence {c} outside [0, 1]",
                r.id()
            )));
        }
        let bin = &mut table.bins[bin_index(c, k_bins)];
        bin.count += 1;
        bin.sum_confidence += c;
        bin.sum_correct += usize::from(r.is_correct());
        table.total += 1;
    }
    Ok(table)
}

/// Count-weighted mean absolute gap between per-bin accuracy and per-bin
/// mean confidence. Empty bins contribute nothing.
pub fn expected_calibration_error(table: &ReliabilityTable) -> Result<f64> {
    if table.total == 0 {
        return Err(CalibrationError::EmptyInput("reliability table has no records"));
    }
    let n = table.total as f64;
    Ok(table
        .bins
        .iter()
        .filter_map(|b| b.gap().map(|gap| b.count as f64 / n * gap))
        .sum())
}

pub fn accuracy<S: Scored>(records: &[S]) -> Result<f64> {
    if records.is_empty() {
        return Err(CalibrationError::EmptyInput("no records to score"));
    }
    let correct = records.iter().filter(|r| r.is_correct()).count();
    Ok(correct as f64 / records.len() as f64)
}

pub fn mean_confidence<S: Scored>(records: &[S]) -> Result<f64> {
    if records.is_empty() {
        return Err(CalibrationError::EmptyInput("no records to score"));
    }
    Ok(records.iter().map(Scored::confidence).sum::<f64>() / records.len() as f64)
}
