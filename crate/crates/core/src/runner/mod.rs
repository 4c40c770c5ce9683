//! Config-driven experiment runs and their on-disk layout.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `config.toml` | the effective config |
//! | `run.json` | hashes, status, split, error ledger, wall-clock |
//! | `dataset.jsonl` | normalized queries |
//! | `transcripts.jsonl` | one line per (query, round), sorted by query id then round |
//! | `metrics.csv` | one trajectory point per row |
//! | `reliability_round_<t>.csv` | reliability table behind each point |
//! | `temperature_round_<t>.txt` | temperature model behind each calibrated point |
//!
//! While a run is in progress, transcript lines are appended round by round
//! to `transcripts.partial.jsonl`; the sorted file replaces it at the end.

mod config;
mod plot;
mod report;

pub use config::{ConfigError, DatasetConfig, ExperimentConfig, ScheduleConfig, FIXTURE_PATH, SCHEMA_VERSION};
pub use plot::{plot, PlotFiles};
pub use report::{report, Report, ReportRow};

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendError;
use crate::calibration::{ReliabilityTable, TextFormat};
use crate::composition::{Abort, Composer, CompositionError, FailedQuery, RoundEvent, TrajectoryPoint};
use crate::dataset::{self, Dataset, DatasetError};
use crate::engine::{RoundState, SelfImproveMethod, SelfImprover, Templates, Transcript};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const PARTIAL_TRANSCRIPTS_FILE: &str = "transcripts.partial.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "schedule,round,n,accuracy,ece,mean_confidence,calibrated,tau";

pub fn reliability_file(round: u32) -> String {
    format!("reliability_round_{round}.csv")
}

pub fn temperature_file(round: u32) -> String {
    format!("temperature_round_{round}.txt")
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("backend setup failed: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Composition(#[from] CompositionError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Corrupt(String),
}

impl RunError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Dataset(_) | Self::Backend(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    /// Finished, but some queries stopped early.
    Partial,
    /// Stopped because too many queries failed in one round.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config_hash: String,
    pub template_hash: String,
    pub seed: u64,
    pub schedule: String,
    pub method: SelfImproveMethod,
    pub status: RunStatus,
    /// Rounds that should have a metrics row.
    pub expected_rounds: Vec<u32>,
    pub validation_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub aborted: Option<Abort>,
    pub errors: Vec<FailedQuery>,
    pub wall_clock_ms: u128,
}

impl RunRecord {
    /// 0 when complete, 3 after an abort caused by the model service,
    /// 4 for any other incomplete run.
    pub fn exit_code(&self) -> i32 {
        match self.status {
            RunStatus::Completed => 0,
            RunStatus::Aborted if self.errors.iter().any(|e| e.backend_failure) => 3,
            _ => 4,
        }
    }

    pub fn load(run_dir: &Path) -> Result<Self, RunError> {
        let path = run_dir.join(RUN_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| RunError::Corrupt(format!("{}: {e}", path.display())))
    }
}

/// One persisted (query, round) entry. Failed attempts carry `error`
/// instead of `state`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub query_id: String,
    pub round: u32,
    pub method: SelfImproveMethod,
    pub template_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<RoundState>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TranscriptLine {
    fn from_state(t: &Transcript, state: &RoundState) -> Self {
        Self {
            query_id: t.query.id.clone(),
            round: state.round,
            method: t.method,
            template_hash: t.template_hash.clone(),
            state: Some(state.clone()),
            error: None,
        }
    }

    fn from_error(t: &Transcript) -> Option<Self> {
        Some(Self {
            query_id: t.query.id.clone(),
            round: t.rounds.len() as u32,
            method: t.method,
            template_hash: t.template_hash.clone(),
            state: None,
            error: Some(t.error.clone()?),
        })
    }
}

/// Every line of every transcript, sorted by query id then round.
pub fn transcript_lines(transcripts: &[Transcript]) -> Vec<TranscriptLine> {
    let mut lines: Vec<TranscriptLine> = transcripts
        .iter()
        .flat_map(|t| {
            t.rounds
                .iter()
                .map(|s| TranscriptLine::from_state(t, s))
                .chain(TranscriptLine::from_error(t))
        })
        .collect();
    lines.sort_by(|a, b| a.query_id.cmp(&b.query_id).then(a.round.cmp(&b.round)));
    lines
}

pub fn metrics_row(schedule: &str, p: &TrajectoryPoint) -> String {
    format!(
        "{schedule},{},{},{},{},{},{},{}",
        p.round,
        p.n,
        p.accuracy,
        p.ece,
        p.mean_confidence,
        p.calibrated,
        p.tau.map(|t| t.to_string()).unwrap_or_default()
    )
}

pub fn reliability_csv(table: &ReliabilityTable) -> String {
    let mut out = String::from("bin,lower,upper,count,sum_confidence,sum_correct,accuracy,mean_confidence\n");
    for (i, b) in table.bins.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{},{},{},{},{}\n",
            b.lower,
            b.upper,
            b.count,
            b.sum_confidence,
            b.sum_correct,
            b.accuracy().map(|a| a.to_string()).unwrap_or_default(),
            b.mean_confidence().map(|a| a.to_string()).unwrap_or_default(),
        ));
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<(), RunError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T], append: bool) -> Result<(), RunError> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| RunError::Corrupt(e.to_string()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_queries(config: &ExperimentConfig) -> Result<Vec<crate::engine::Query>, DatasetError> {
    let base = if config.dataset.path == FIXTURE_PATH {
        dataset::load_fixture()
    } else {
        dataset::load_path(Path::new(&config.dataset.path))?
    };
    Ok(dataset::expand(&base, config.dataset.repeat))
}

fn expected_rounds(config: &ExperimentConfig) -> Vec<u32> {
    let start = match config.schedule {
        Some(ScheduleConfig {
            kind: crate::composition::ScheduleKind::Iterative,
            ..
        }) => 1,
        _ => 0,
    };
    (start..=config.rounds).collect()
}

/// Runs an experiment and writes its run directory. `seed` overrides the
/// config's seed. Returns the final run record; its status tells whether
/// every query finished.
pub fn run(config: &ExperimentConfig, out_dir: &Path, seed: Option<u64>) -> Result<RunRecord, RunError> {
    let started = Instant::now();
    let mut config = config.clone();
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    let queries = load_queries(&config)?;
    let name = if config.dataset.path == FIXTURE_PATH {
        dataset::FIXTURE_NAME.to_string()
    } else {
        config.dataset.path.clone()
    };
    let dataset: Dataset = dataset::split(name, queries, config.validation_fraction, config.seed)?;
    let backend = config.backend.build(config.seed, config.concurrency)?;

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for entry in fs::read_dir(out_dir).map_err(io_err(out_dir))?.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        let stale = name.starts_with("reliability_round_")
            || name.starts_with("temperature_round_")
            || [
                TRANSCRIPTS_FILE,
                PARTIAL_TRANSCRIPTS_FILE,
                METRICS_FILE,
                report::REPORT_FILE,
            ]
            .contains(&name.as_str())
            || name.ends_with(".svg");
        if stale {
            let p = entry.path();
            fs::remove_file(&p).map_err(io_err(&p))?;
        }
    }
    write_file(&out_dir.join(CONFIG_FILE), &config.to_toml())?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| dataset.queries[i].id.clone()).collect::<Vec<_>>();
    let mode = config.mode();
    let mut record = RunRecord {
        schema_version: SCHEMA_VERSION,
        config_hash: config.hash(),
        template_hash: Templates::v1().hash().to_string(),
        seed: config.seed,
        schedule: mode.label().to_string(),
        method: config.method,
        status: RunStatus::Running,
        expected_rounds: expected_rounds(&config),
        validation_ids: ids(&dataset.validation),
        test_ids: ids(&dataset.test),
        aborted: None,
        errors: Vec::new(),
        wall_clock_ms: 0,
    };
    let run_path = out_dir.join(RUN_FILE);
    let save_record = |r: &RunRecord| {
        write_file(
            &run_path,
            &(serde_json::to_string_pretty(r).expect("record serializes") + "\n"),
        )
    };
    save_record(&record)?;
    write_jsonl(&out_dir.join(DATASET_FILE), &dataset.queries, false)?;

    let metrics_path = out_dir.join(METRICS_FILE);
    write_file(&metrics_path, &format!("{METRICS_HEADER}\n"))?;
    let partial_path = out_dir.join(PARTIAL_TRANSCRIPTS_FILE);
    File::create(&partial_path).map_err(io_err(&partial_path))?;

    let improver = SelfImprover::new(backend.as_ref(), config.method);
    let composer = Composer::new(improver, config.calibrator, config.concurrency);
    let mut io_failure: Option<RunError> = None;
    let mut observer = |ev: RoundEvent<'_>| {
        if io_failure.is_some() {
            return;
        }
        if let Err(e) = persist_round(out_dir, mode.label(), &ev) {
            io_failure = Some(e);
        }
    };
    let outcome = composer.run_observed(&dataset, mode, &mut observer)?;
    if let Some(e) = io_failure {
        return Err(e);
    }

    write_jsonl(
        &out_dir.join(TRANSCRIPTS_FILE),
        &transcript_lines(&outcome.transcripts),
        false,
    )?;
    fs::remove_file(&partial_path).map_err(io_err(&partial_path))?;

    record.status = if outcome.aborted.is_some() {
        RunStatus::Aborted
    } else if outcome.failures.is_empty() {
        RunStatus::Completed
    } else {
        RunStatus::Partial
    };
    record.aborted = outcome.aborted;
    record.errors = outcome.failures;
    record.wall_clock_ms = started.elapsed().as_millis();
    save_record(&record)?;
    Ok(record)
}

fn persist_round(out_dir: &Path, schedule: &str, ev: &RoundEvent<'_>) -> Result<(), RunError> {
    let lines: Vec<TranscriptLine> = ev
        .transcripts
        .iter()
        .filter_map(|t| match t.rounds.get(ev.round as usize) {
            Some(s) => Some(TranscriptLine::from_state(t, s)),
            None if t.rounds.len() == ev.round as usize => TranscriptLine::from_error(t),
            None => None,
        })
        .collect();
    write_jsonl(&out_dir.join(PARTIAL_TRANSCRIPTS_FILE), &lines, true)?;
    let Some(result) = ev.result else { return Ok(()) };
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut f = OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    writeln!(f, "{}", metrics_row(schedule, &result.point)).map_err(io_err(&metrics_path))?;
    write_file(
        &out_dir.join(reliability_file(ev.round)),
        &reliability_csv(&result.table),
    )?;
    if let Some(model) = &result.model {
        write_file(&out_dir.join(temperature_file(ev.round)), &model.to_text())?;
    }
    Ok(())
}

/// Resolves the output directory: explicit argument first, then config.
pub fn output_dir(config: &ExperimentConfig, cli_out: Option<&Path>) -> Option<PathBuf> {
    cli_out.map(Path::to_path_buf).or_else(|| config.output_dir.clone())
}
