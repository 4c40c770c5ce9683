//! MMLU-format loading, normalized dataset files and validation/test splits.
//!
//! Input CSVs have no header and six columns: stem, options A to D, answer
//! letter. Query ids are `<filename>:<row>` with 1-based rows.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::option_letter;
use crate::engine::Query;
use crate::seeding::keyed_rng;

pub const FIXTURE_NAME: &str = "mmlu_fixture.csv";
pub const FIXTURE_CSV: &str = include_str!("../fixtures/mmlu_fixture.csv");
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;
const MMLU_OPTIONS: usize = 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{name} row {row}: {msg}")]
    Parse { name: String, row: usize, msg: String },
    #[error("{0}: no questions")]
    Empty(String),
    #[error("{0}")]
    InputDomain(String),
}

type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_mmlu_csv(path: &Path) -> Result<Vec<Query>> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let file = File::open(path).map_err(io_err(path))?;
    parse_mmlu_csv(file, &name)
}

/// The bundled 50-question fixture spanning five subjects.
pub fn load_fixture() -> Vec<Query> {
    parse_mmlu_csv(FIXTURE_CSV.as_bytes(), FIXTURE_NAME).expect("bundled fixture parses")
}

pub fn parse_mmlu_csv(reader: impl Read, name: &str) -> Result<Vec<Query>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut queries = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let parse = |msg: String| DatasetError::Parse {
            name: name.to_string(),
            row,
            msg,
        };
        let rec = rec.map_err(|e| parse(e.to_string()))?;
        if rec.len() != MMLU_OPTIONS + 2 {
            return Err(parse(format!(
                "expected {} columns, found {}",
                MMLU_OPTIONS + 2,
                rec.len()
            )));
        }
        let stem = rec[0].trim();
        if stem.is_empty() {
            return Err(parse("empty question stem".into()));
        }
        let letter = rec[MMLU_OPTIONS + 1].trim().to_ascii_uppercase();
        let gold = match letter.as_bytes() {
            [c @ b'A'..=b'D'] => (c - b'A') as usize,
            _ => return Err(parse(format!("answer must be one of A-D, found {letter:?}"))),
        };
        queries.push(Query {
            id: format!("{name}:{row}"),
            stem: stem.to_string(),
            options: (1..=MMLU_OPTIONS).map(|c| rec[c].trim().to_string()).collect(),
            gold,
        });
    }
    if queries.is_empty() {
        return Err(DatasetError::Empty(name.to_string()));
    }
    Ok(queries)
}

/// Writes queries back out in the six-column layout.
pub fn write_mmlu_csv(writer: impl Write, queries: &[Query]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for q in queries {
        if q.options.len() != MMLU_OPTIONS || q.gold >= MMLU_OPTIONS {
            return Err(DatasetError::InputDomain(format!(
                "{}: the MMLU layout needs exactly {MMLU_OPTIONS} options",
                q.id
            )));
        }
        let letter = option_letter(q.gold).to_string();
        let mut row: Vec<&str> = vec![&q.stem];
        row.extend(q.options.iter().map(String::as_str));
        row.push(&letter);
        w.write_record(&row)
            .map_err(|e| DatasetError::InputDomain(e.to_string()))?;
    }
    w.flush().map_err(io_err(Path::new("<csv>")))
}

/// One JSON object per line: id, stem, options, gold.
pub fn write_jsonl(mut writer: impl Write, queries: &[Query]) -> std::io::Result<()> {
    for q in queries {
        serde_json::to_writer(&mut writer, q)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn read_jsonl(reader: impl BufRead, name: &str) -> Result<Vec<Query>> {
    let mut queries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let parse = |msg: String| DatasetError::Parse {
            name: name.to_string(),
            row: i + 1,
            msg,
        };
        let line = line.map_err(|e| parse(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Query = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        q.validate().map_err(|e| parse(e.to_string()))?;
        queries.push(q);
    }
    if queries.is_empty() {
        return Err(DatasetError::Empty(name.to_string()));
    }
    Ok(queries)
}

/// Loads `.jsonl` files as normalized datasets and anything else as MMLU CSV.
pub fn load_path(path: &Path) -> Result<Vec<Query>> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let file = File::open(path).map_err(io_err(path))?;
        read_jsonl(BufReader::new(file), &path.display().to_string())
    } else {
        load_mmlu_csv(path)
    }
}

/// `copies` renamed replicas of every query (`<id>#<n>`), for runs that
/// need more questions than a file holds.
pub fn expand(queries: &[Query], copies: usize) -> Vec<Query> {
    if copies <= 1 {
        return queries.to_vec();
    }
    (0..copies)
        .flat_map(|n| {
            queries.iter().map(move |q| Query {
                id: format!("{}#{n}", q.id),
                ..q.clone()
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub queries: Vec<Query>,
    /// Indices into `queries`, in shuffled order.
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn validation_queries(&self) -> Vec<&Query> {
        self.validation.iter().map(|&i| &self.queries[i]).collect()
    }

    pub fn test_queries(&self) -> Vec<&Query> {
        self.test.iter().map(|&i| &self.queries[i]).collect()
    }
}

/// Seeded shuffle, then a prefix split. The smaller side takes the prefix,
/// so fractions `f` and `1 - f` under one seed give swapped sets.
pub fn split(name: impl Into<String>, queries: Vec<Query>, validation_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(DatasetError::InputDomain(format!(
            "validation fraction must lie in (0, 1), got {validation_fraction}"
        )));
    }
    let n = queries.len();
    if n < 2 {
        return Err(DatasetError::InputDomain(format!(
            "need at least 2 queries to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, &["split"]));
    let small = validation_fraction.min(1.0 - validation_fraction);
    let prefix = ((small * n as f64).round() as usize).clamp(1, n - 1);
    let (head, tail) = order.split_at(prefix);
    let (validation, test) = if validation_fraction <= 0.5 {
        (head.to_vec(), tail.to_vec())
    } else {
        (tail.to_vec(), head.to_vec())
    };
    Ok(Dataset {
        name: name.into(),
        queries,
        validation,
        test,
    })
}
