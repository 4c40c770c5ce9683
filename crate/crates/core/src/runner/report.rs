//! Summaries of finished (or interrupted) runs, checked against the
//! persisted transcripts.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    io_err, temperature_file, ExperimentConfig, RunError, RunRecord, RunStatus, TranscriptLine, CONFIG_FILE,
    METRICS_FILE, PARTIAL_TRANSCRIPTS_FILE, TRANSCRIPTS_FILE,
};
use crate::calibration::{ConfidenceRecord, ReliabilityTable, TemperatureModel, TextFormat};
use crate::composition::evaluate;

pub const REPORT_FILE: &str = "report.txt";
/// Largest tolerated difference between a stored metric and its recomputation.
pub const RECOMPUTE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub schedule: String,
    pub round: u32,
    pub n: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub mean_confidence: f64,
    pub calibrated: bool,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub record: RunRecord,
    pub rows: Vec<ReportRow>,
    pub tables: Vec<(u32, ReliabilityTable)>,
    /// Rounds the run should have produced but did not.
    pub missing_rounds: Vec<u32>,
    pub warnings: Vec<String>,
    /// Stored metrics that disagree with the recomputation.
    pub mismatches: Vec<String>,
    pub text: String,
}

pub fn read_metrics(path: &Path) -> Result<Vec<ReportRow>, RunError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| RunError::Corrupt(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| RunError::Corrupt(format!("{}: {e}", path.display()))))
        .collect()
}

/// Transcript lines of a run, with a flag telling whether they came from an
/// interrupted run's partial file.
pub fn read_transcripts(run_dir: &Path) -> Result<(Vec<TranscriptLine>, bool), RunError> {
    let full = run_dir.join(TRANSCRIPTS_FILE);
    let (path, partial) = if full.exists() {
        (full, false)
    } else {
        (run_dir.join(PARTIAL_TRANSCRIPTS_FILE), true)
    };
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let mut lines = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str(&line)
            .map_err(|e| RunError::Corrupt(format!("{} line {}: {e}", path.display(), i + 1)));
        match parsed {
            Ok(l) => lines.push(l),
            // A killed run may leave a torn last line.
            Err(_) if partial => break,
            Err(e) => return Err(e),
        }
    }
    Ok((lines, partial))
}

pub fn report(run_dir: &Path) -> Result<Report, RunError> {
    let record = RunRecord::load(run_dir)?;
    let config_path = run_dir.join(CONFIG_FILE);
    let config_text = fs::read_to_string(&config_path).map_err(io_err(&config_path))?;
    let config = ExperimentConfig::parse(&config_text)?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let rows = if metrics_path.exists() {
        read_metrics(&metrics_path)?
    } else {
        Vec::new()
    };
    let (lines, partial) = read_transcripts(run_dir)?;

    let mut warnings = Vec::new();
    if partial {
        warnings.push(format!(
            "{TRANSCRIPTS_FILE} missing; using the interrupted run's {PARTIAL_TRANSCRIPTS_FILE}"
        ));
    }
    match record.status {
        RunStatus::Completed => {}
        RunStatus::Running => warnings.push("run did not finish (status: running)".into()),
        RunStatus::Partial => warnings.push(format!("{} queries stopped early", record.errors.len())),
        RunStatus::Aborted => {
            if let Some(a) = &record.aborted {
                warnings.push(format!(
                    "run aborted at round {}: {} of {} queries failed",
                    a.round, a.failed, a.total
                ));
            }
        }
    }
    let present: Vec<u32> = rows.iter().map(|r| r.round).collect();
    let missing_rounds: Vec<u32> = record
        .expected_rounds
        .iter()
        .copied()
        .filter(|r| !present.contains(r))
        .collect();
    if !missing_rounds.is_empty() {
        warnings.push(format!("partial report: missing rounds {missing_rounds:?}"));
    }

    let mut by_round: BTreeMap<u32, HashMap<&str, &ConfidenceRecord>> = BTreeMap::new();
    for l in &lines {
        if let Some(s) = &l.state {
            by_round.entry(l.round).or_default().insert(&l.query_id, &s.record);
        }
    }
    let mut mismatches = Vec::new();
    let mut tables = Vec::new();
    for row in &rows {
        let empty = HashMap::new();
        let at = by_round.get(&row.round).unwrap_or(&empty);
        let records: Vec<ConfidenceRecord> = record
            .test_ids
            .iter()
            .filter_map(|id| at.get(id.as_str()).map(|r| (*r).clone()))
            .collect();
        let model = if row.calibrated {
            let path = run_dir.join(temperature_file(row.round));
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            Some(
                TemperatureModel::from_text(&text)
                    .map_err(|e| RunError::Corrupt(format!("{}: {e}", path.display())))?,
            )
        } else {
            None
        };
        if records.is_empty() {
            mismatches.push(format!("round {}: no test records in transcripts", row.round));
            continue;
        }
        let (point, table) = evaluate(&records, model.as_ref(), config.calibrator, row.round)
            .map_err(|e| RunError::Corrupt(format!("round {}: {e}", row.round)))?;
        let direct_accuracy = records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64;
        let direct_confidence = point.mean_confidence;
        if point.n != row.n {
            mismatches.push(format!(
                "round {}: n {} stored, {} recomputed",
                row.round, row.n, point.n
            ));
        }
        for (name, stored, recomputed) in [
            ("accuracy", row.accuracy, direct_accuracy),
            ("ece", row.ece, point.ece),
            ("mean_confidence", row.mean_confidence, direct_confidence),
        ] {
            if (stored - recomputed).abs() > RECOMPUTE_TOLERANCE {
                mismatches.push(format!(
                    "round {}: {name} {stored} stored, {recomputed} recomputed",
                    row.round
                ));
            }
        }
        tables.push((row.round, table));
    }

    let text = render(&record, &rows, &tables, &warnings, &mismatches);
    let out = run_dir.join(REPORT_FILE);
    fs::write(&out, &text).map_err(io_err(&out))?;
    Ok(Report {
        record,
        rows,
        tables,
        missing_rounds,
        warnings,
        mismatches,
        text,
    })
}

fn render(
    record: &RunRecord,
    rows: &[ReportRow],
    tables: &[(u32, ReliabilityTable)],
    warnings: &[String],
    mismatches: &[String],
) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "schedule: {}  method: {}  seed: {}  status: {:?}",
        record.schedule,
        record.method.label(),
        record.seed,
        record.status
    );
    let _ = writeln!(s, "config: {}", record.config_hash);
    let _ = writeln!(s, "templates: {}", record.template_hash);
    for w in warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    for m in mismatches {
        let _ = writeln!(s, "MISMATCH: {m}");
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:>5} {:>6} {:>9} {:>9} {:>9} {:>10} {:>8}",
        "round", "n", "accuracy", "ece", "mean_conf", "calibrated", "tau"
    );
    for r in rows {
        let tau = r.tau.map(|t| format!("{t:.4}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:>5} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>10} {:>8}",
            r.round, r.n, r.accuracy, r.ece, r.mean_confidence, r.calibrated, tau
        );
    }
    for (round, table) in tables {
        let _ = writeln!(s, "\nreliability, round {round}");
        let _ = writeln!(s, "{:>11} {:>6} {:>9} {:>9}", "bin", "count", "accuracy", "mean_conf");
        for b in &table.bins {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:>11} {:>6} {:>9} {:>9}",
                format!("[{:.1},{:.1})", b.lower, b.upper),
                b.count,
                fmt(b.accuracy()),
                fmt(b.mean_confidence())
            );
        }
    }
    s
}
