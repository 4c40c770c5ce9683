//! Calibration x self-improvement schedules over a split dataset.
//!
//! Every query (validation and test) goes through the same self-improvement
//! rounds. Temperatures are fitted on validation records only and applied to
//! test records; trajectory metrics are computed over the test split.
//!
//! * uncalibrated: rounds `0..=T`, raw confidences.
//! * iterative: after each improvement round `t = 1..=T`, refit on
//!   validation round `t` and recalibrate. Emits `T` points.
//! * calibrate-then-improve: fit once on validation round 0 and apply that
//!   frozen temperature to rounds `0..=T`.
//! * improve-then-calibrate: rounds `0..T` raw, round `T` recalibrated with a
//!   temperature fitted on validation round `T`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{
    accuracy, bin_records, expected_calibration_error, fit_latent_temperature, fit_scalar_temperature, logit_features,
    mean_confidence, recalibrate_records, CalibrationError, ConfidenceRecord, FeatureVector, LatentFitConfig,
    ReliabilityTable, TemperatureModel, DEFAULT_BINS,
};
use crate::dataset::Dataset;
use crate::engine::{SelfImprover, Transcript};

/// Share of queries that may fail in one round before the run aborts.
pub const MAX_FAILED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Iterative,
    CalibrateThenImprove,
    ImproveThenCalibrate,
}

impl ScheduleKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::Iterative => "iterative",
            Self::CalibrateThenImprove => "calibrate_then_improve",
            Self::ImproveThenCalibrate => "improve_then_calibrate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub rounds: u32,
    /// Show the (calibrated, when available) confidence in feedback prompts.
    #[serde(default)]
    pub feed_confidence_to_prompt: bool,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, rounds: u32) -> Self {
        Self {
            kind,
            rounds,
            feed_confidence_to_prompt: false,
        }
    }
}

/// What to run: plain self-improvement, or one of the schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Uncalibrated { rounds: u32 },
    Scheduled(Schedule),
}

impl Mode {
    pub fn rounds(&self) -> u32 {
        match self {
            Self::Uncalibrated { rounds } => *rounds,
            Self::Scheduled(s) => s.rounds,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Uncalibrated { .. } => "uncalibrated",
            Self::Scheduled(s) => s.kind.label(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibratorKind {
    Scalar,
    Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibratorConfig {
    #[serde(default = "default_calibrator_kind")]
    pub kind: CalibratorKind,
    #[serde(default = "default_bins")]
    pub k_bins: usize,
    /// Feature width for the latent model.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

fn default_calibrator_kind() -> CalibratorKind {
    CalibratorKind::Scalar
}
fn default_bins() -> usize {
    DEFAULT_BINS
}
fn default_feature_dim() -> usize {
    8
}

impl Default for CalibratorConfig {
    fn default() -> Self {
        Self {
            kind: CalibratorKind::Scalar,
            k_bins: DEFAULT_BINS,
            feature_dim: default_feature_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub round: u32,
    /// Test records scored at this round.
    pub n: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub mean_confidence: f64,
    pub calibrated: bool,
    /// Scalar temperature, or the mean per-record temperature of a latent
    /// model; absent for raw confidences.
    pub tau: Option<f64>,
}

/// A query that stopped early, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedQuery {
    pub query_id: String,
    pub round: u32,
    pub error: String,
    pub backend_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub round: u32,
    pub failed: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct RoundResult {
    pub point: TrajectoryPoint,
    pub table: ReliabilityTable,
    pub model: Option<TemperatureModel>,
}

/// Progress report handed to observers after each round.
pub struct RoundEvent<'e> {
    pub round: u32,
    pub transcripts: &'e [Transcript],
    /// Queries that failed during this round.
    pub failed: &'e [FailedQuery],
    /// The trajectory point emitted for this round, if any.
    pub result: Option<&'e RoundResult>,
}

#[derive(Debug, Clone)]
pub struct ScheduleOutcome {
    pub mode: Mode,
    pub rounds: Vec<RoundResult>,
    /// One transcript per dataset query, in dataset order.
    pub transcripts: Vec<Transcript>,
    pub failures: Vec<FailedQuery>,
    pub aborted: Option<Abort>,
}

impl ScheduleOutcome {
    pub fn points(&self) -> Vec<TrajectoryPoint> {
        self.rounds.iter().map(|r| r.point.clone()).collect()
    }

    pub fn last_point(&self) -> Option<&TrajectoryPoint> {
        self.rounds.last().map(|r| &r.point)
    }
}

#[derive(Debug, Error)]
pub enum CompositionError {
    #[error("round {round}: {source}")]
    Calibration {
        round: u32,
        #[source]
        source: CalibrationError,
    },
    #[error("schedules need at least one improvement round")]
    NoRounds,
}

/// Drives a [`SelfImprover`] over a dataset with bounded concurrency.
pub struct Composer<'a> {
    improver: SelfImprover<'a>,
    calibrator: CalibratorConfig,
    concurrency: usize,
}

impl<'a> Composer<'a> {
    pub fn new(improver: SelfImprover<'a>, calibrator: CalibratorConfig, concurrency: usize) -> Self {
        Self {
            improver,
            calibrator,
            concurrency: concurrency.max(1),
        }
    }

    pub fn run(&self, dataset: &Dataset, mode: Mode) -> Result<ScheduleOutcome, CompositionError> {
        self.run_observed(dataset, mode, &mut |_| {})
    }

    /// As [`Composer::run`], calling `observer` once each round has finished.
    pub fn run_observed(
        &self,
        dataset: &Dataset,
        mode: Mode,
        observer: &mut dyn FnMut(RoundEvent<'_>),
    ) -> Result<ScheduleOutcome, CompositionError> {
        let rounds = mode.rounds();
        if matches!(mode, Mode::Scheduled(_)) && rounds == 0 {
            return Err(CompositionError::NoRounds);
        }
        let (kind, feed) = match mode {
            Mode::Uncalibrated { .. } => (None, false),
            Mode::Scheduled(s) => (Some(s.kind), s.feed_confidence_to_prompt),
        };
        let mut out = ScheduleOutcome {
            mode,
            rounds: Vec::new(),
            transcripts: Vec::new(),
            failures: Vec::new(),
            aborted: None,
        };
        let mut transcripts: Vec<Transcript> =
            parallel_map(&dataset.queries, self.concurrency, |q| self.improver.start(q));
        let total = transcripts.len();
        // Model whose confidences are shown in feedback prompts.
        let mut current: Option<TemperatureModel> = None;

        for t in 0..=rounds {
            if t > 0 {
                let hints: Vec<Option<f64>> = if feed {
                    transcripts.iter().map(|tr| self.hint(tr, current.as_ref())).collect()
                } else {
                    vec![None; total]
                };
                let items: Vec<(&Transcript, Option<f64>)> = transcripts.iter().zip(hints).collect();
                let steps = parallel_map(&items, self.concurrency, |(tr, hint)| {
                    tr.error.is_none().then(|| self.improver.step(tr, *hint))
                });
                for (tr, step) in transcripts.iter_mut().zip(steps) {
                    if let Some(step) = step {
                        let _ = tr.push(step);
                    }
                }
            }
            let before = out.failures.len();
            out.aborted = collect_failures(&transcripts, t, &mut out.failures, total);
            if out.aborted.is_some() {
                observer(RoundEvent {
                    round: t,
                    transcripts: &transcripts,
                    failed: &out.failures[before..],
                    result: None,
                });
                break;
            }
            let result = match kind {
                None => Some(self.point(dataset, &transcripts, t, None)?),
                Some(ScheduleKind::Iterative) if t == 0 => None,
                Some(ScheduleKind::ImproveThenCalibrate) if t < rounds => {
                    Some(self.point(dataset, &transcripts, t, None)?)
                }
                Some(ScheduleKind::CalibrateThenImprove) if t > 0 => {
                    Some(self.point(dataset, &transcripts, t, current.as_ref())?)
                }
                Some(_) => {
                    let model = self.fit(dataset, &transcripts, t)?;
                    let r = self.point(dataset, &transcripts, t, Some(&model))?;
                    current = Some(model);
                    Some(r)
                }
            };
            observer(RoundEvent {
                round: t,
                transcripts: &transcripts,
                failed: &out.failures[before..],
                result: result.as_ref(),
            });
            out.rounds.extend(result);
        }
        out.transcripts = transcripts;
        Ok(out)
    }

    fn features(&self, records: &[ConfidenceRecord]) -> Result<Vec<FeatureVector>, CalibrationError> {
        records
            .iter()
            .map(|r| logit_features(&r.option_logits, self.calibrator.feature_dim))
            .collect()
    }

    fn fit(
        &self,
        dataset: &Dataset,
        transcripts: &[Transcript],
        round: u32,
    ) -> Result<TemperatureModel, CompositionError> {
        let wrap = |source| CompositionError::Calibration { round, source };
        let records = records_at(transcripts, &dataset.validation, round);
        match self.calibrator.kind {
            CalibratorKind::Scalar => fit_scalar_temperature(&records).map_err(wrap),
            CalibratorKind::Latent => {
                let features = self.features(&records).map_err(wrap)?;
                let config = LatentFitConfig::new(self.calibrator.feature_dim, round as u64);
                fit_latent_temperature(&features, &records, &config).map_err(wrap)
            }
        }
    }

    fn point(
        &self,
        dataset: &Dataset,
        transcripts: &[Transcript],
        round: u32,
        model: Option<&TemperatureModel>,
    ) -> Result<RoundResult, CompositionError> {
        let wrap = |source| CompositionError::Calibration { round, source };
        let raw = records_at(transcripts, &dataset.test, round);
        let (point, table) = evaluate(&raw, model, self.calibrator, round).map_err(wrap)?;
        Ok(RoundResult {
            point,
            table,
            model: model.cloned(),
        })
    }

    fn hint(&self, transcript: &Transcript, model: Option<&TemperatureModel>) -> Option<f64> {
        let record = &transcript.last()?.record;
        match model {
            None => Some(record.confidence),
            Some(m) => {
                let one = std::slice::from_ref(record);
                let features = match m {
                    TemperatureModel::Latent(_) => Some(self.features(one).ok()?),
                    TemperatureModel::Scalar { .. } => None,
                };
                let scaled = recalibrate_records(one, m, features.as_deref()).ok()?;
                Some(scaled[0].confidence)
            }
        }
    }
}

/// Metrics and reliability table for `records`, after applying `model`.
pub fn evaluate(
    records: &[ConfidenceRecord],
    model: Option<&TemperatureModel>,
    calibrator: CalibratorConfig,
    round: u32,
) -> Result<(TrajectoryPoint, ReliabilityTable), CalibrationError> {
    let (records, tau) = match model {
        None => (records.to_vec(), None),
        Some(m) => {
            let features = match m {
                TemperatureModel::Latent(_) => Some(
                    records
                        .iter()
                        .map(|r| logit_features(&r.option_logits, calibrator.feature_dim))
                        .collect::<Result<Vec<_>, _>>()?,
                ),
                TemperatureModel::Scalar { .. } => None,
            };
            let tau = match m {
                TemperatureModel::Scalar { tau } => *tau,
                TemperatureModel::Latent(_) => {
                    let f = features.as_deref().unwrap_or_default();
                    let taus = f.iter().map(|x| m.tau_for(Some(x))).collect::<Result<Vec<_>, _>>()?;
                    taus.iter().sum::<f64>() / taus.len().max(1) as f64
                }
            };
            (recalibrate_records(records, m, features.as_deref())?, Some(tau))
        }
    };
    let table = bin_records(&records, calibrator.k_bins)?;
    let point = TrajectoryPoint {
        round,
        n: records.len(),
        accuracy: accuracy(&records)?,
        ece: expected_calibration_error(&table)?,
        mean_confidence: mean_confidence(&records)?,
        calibrated: model.is_some(),
        tau,
    };
    Ok((point, table))
}

/// Round-`round` records of the transcripts at `indices` that reached it.
pub fn records_at(transcripts: &[Transcript], indices: &[usize], round: u32) -> Vec<ConfidenceRecord> {
    indices
        .iter()
        .filter_map(|&i| transcripts[i].rounds.get(round as usize))
        .map(|s| s.record.clone())
        .collect()
}

/// Logs transcripts that failed at `round`; returns an abort when too many did.
fn collect_failures(
    transcripts: &[Transcript],
    round: u32,
    ledger: &mut Vec<FailedQuery>,
    total: usize,
) -> Option<Abort> {
    let mut failed = 0;
    for t in transcripts {
        if let Some(err) = &t.error {
            if t.rounds.len() == round as usize {
                failed += 1;
                ledger.push(FailedQuery {
                    query_id: t.query.id.clone(),
                    round,
                    error: err.clone(),
                    backend_failure: t.backend_failure,
                });
            }
        }
    }
    (failed as f64 > MAX_FAILED_FRACTION * total as f64).then_some(Abort { round, failed, total })
}

/// Maps `f` over `items` on at most `workers` scoped threads, keeping order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every item mapped"))
        .collect()
}
