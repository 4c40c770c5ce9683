//! Experiment configuration (TOML).
//!
//! ```toml
//! schema_version = 1
//! seed = 42
//! rounds = 5
//! validation_fraction = 0.2
//! concurrency = 8
//!
//! [dataset]
//! path = "fixture"        # the bundled fixture, or a CSV/JSONL path
//! repeat = 20             # optional replication factor
//!
//! [backend]
//! kind = "synthetic"
//! alpha = 0.6
//! delta = 0.05
//! k_opts = 4
//!
//! [method]
//! kind = "basic"          # or "cot" with max_cot_tokens
//!
//! [schedule]              # omit for plain self-improvement
//! kind = "improve_then_calibrate"
//! ```
//!
//! Unknown keys are errors. Relative dataset paths resolve against the
//! config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::BackendSpec;
use crate::composition::{CalibratorConfig, Mode, Schedule, ScheduleKind};
use crate::dataset::DEFAULT_VALIDATION_FRACTION;
use crate::engine::SelfImproveMethod;
use crate::seeding::sha256_hex;

pub const SCHEMA_VERSION: u32 = 1;
pub const FIXTURE_PATH: &str = "fixture";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: String,
    #[serde(default = "one")]
    pub repeat: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(default)]
    pub feed_confidence_to_prompt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub rounds: u32,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "one")]
    pub concurrency: usize,
    /// Used when no output directory is given on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub backend: BackendSpec,
    pub method: SelfImproveMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default)]
    pub calibrator: CalibratorConfig,
}

fn one() -> usize {
    1
}

fn default_validation_fraction() -> f64 {
    DEFAULT_VALIDATION_FRACTION
}

impl ExperimentConfig {
    /// Parses and validates a config file, resolving the dataset path.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config = Self::parse(&text)?;
        if config.dataset.path != FIXTURE_PATH {
            let p = Path::new(&config.dataset.path);
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                config.dataset.path = base.join(p).display().to_string();
            }
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn mode(&self) -> Mode {
        match self.schedule {
            None => Mode::Uncalibrated { rounds: self.rounds },
            Some(s) => Mode::Scheduled(Schedule {
                kind: s.kind,
                rounds: self.rounds,
                feed_confidence_to_prompt: s.feed_confidence_to_prompt,
            }),
        }
    }

    /// Every violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            v.push(format!(
                "schema_version must be {SCHEMA_VERSION}, got {}",
                self.schema_version
            ));
        }
        if self.rounds < 1 {
            v.push("rounds must be >= 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            v.push(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if self.concurrency < 1 {
            v.push("concurrency must be >= 1".into());
        }
        if self.dataset.path.trim().is_empty() {
            v.push("dataset.path must not be empty".into());
        }
        if self.dataset.repeat < 1 {
            v.push("dataset.repeat must be >= 1".into());
        }
        if let SelfImproveMethod::Cot { max_cot_tokens: 0 } = self.method {
            v.push("method.max_cot_tokens must be > 0".into());
        }
        if self.schedule.is_some() && self.method != SelfImproveMethod::Basic {
            v.push("schedules run with method.kind = \"basic\" only".into());
        }
        if self.calibrator.k_bins < 1 {
            v.push("calibrator.k_bins must be >= 1".into());
        }
        if self.calibrator.feature_dim < 1 {
            v.push("calibrator.feature_dim must be >= 1".into());
        }
        v.extend(self.backend.violations());
        v
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v))
        }
    }
}
