//! Plain-text key/value serialization for reliability tables and fitted
//! temperature models.
//!
//! One `key = value` pair per line; `#` starts a comment line. Arrays are
//! written as `[v1, v2, ...]`. Reals use 17 significant digits
//! (`{:.16e}`), which round-trips every `f64` exactly.
//!
//! ```text
//! # selfcal temperature model
//! kind = temperature-model
//! version = 1
//! variant = scalar
//! tau = 2.1910000000000001e0
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use super::{LatentNet, ReliabilityBin, ReliabilityTable, TemperatureModel};

const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("missing key `{0}`")]
    MissingKey(&'static str),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: &'static str, msg: String },
}

pub trait TextFormat: Sized {
    fn to_text(&self) -> String;
    fn from_text(text: &str) -> Result<Self, FormatError>;
}

fn real(x: f64) -> String {
    format!("{x:.16e}")
}

fn real_array(xs: &[f64]) -> String {
    let items: Vec<String> = xs.iter().map(|x| real(*x)).collect();
    format!("[{}]", items.join(", "))
}

fn int_array(xs: &[usize]) -> String {
    let items: Vec<String> = xs.iter().map(usize::to_string).collect();
    format!("[{}]", items.join(", "))
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn parse(text: &str) -> Result<Self, FormatError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| FormatError::Syntax {
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            if map.insert(key.trim().to_string(), value.trim().to_string()).is_some() {
                return Err(FormatError::Syntax {
                    line: i + 1,
                    msg: format!("duplicate key `{}`", key.trim()),
                });
            }
        }
        Ok(Self(map))
    }

    fn raw(&self, key: &'static str) -> Result<&str, FormatError> {
        self.0.get(key).map(String::as_str).ok_or(FormatError::MissingKey(key))
    }

    fn scalar<T: std::str::FromStr>(&self, key: &'static str) -> Result<T, FormatError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)?.parse().map_err(|e: T::Err| FormatError::BadValue {
            key,
            msg: e.to_string(),
        })
    }

    fn array<T: std::str::FromStr>(&self, key: &'static str) -> Result<Vec<T>, FormatError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key)?;
        let inner = raw
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| FormatError::BadValue {
                key,
                msg: "expected `[...]`".into(),
            })?;
        if inner.trim().is_empty() {
            return Ok(Vec::new());
        }
        inner
            .split(',')
            .map(|item| {
                item.trim().parse().map_err(|e: T::Err| FormatError::BadValue {
                    key,
                    msg: e.to_string(),
                })
            })
            .collect()
    }

    fn expect(&self, key: &'static str, want: &str) -> Result<(), FormatError> {
        let got = self.raw(key)?;
        if got != want {
            return Err(FormatError::BadValue {
                key,
                msg: format!("expected `{want}`, found `{got}`"),
            });
        }
        Ok(())
    }
}

fn check_len(key: &'static str, got: usize, want: usize) -> Result<(), FormatError> {
    if got != want {
        return Err(FormatError::BadValue {
            key,
            msg: format!("expected {want} entries, found {got}"),
        });
    }
    Ok(())
}

impl TextFormat for ReliabilityTable {
    fn to_text(&self) -> String {
        let lower: Vec<f64> = self.bins.iter().map(|b| b.lower).collect();
        let upper: Vec<f64> = self.bins.iter().map(|b| b.upper).collect();
        let count: Vec<usize> = self.bins.iter().map(|b| b.count).collect();
        let sum_conf: Vec<f64> = self.bins.iter().map(|b| b.sum_confidence).collect();
        let sum_correct: Vec<usize> = self.bins.iter().map(|b| b.sum_correct).collect();
        format!(
            "# selfcal reliability table\nkind = reliability-table\nversion = {VERSION}\nk_bins = {}\ntotal = {}\n\
             lower = {}\nupper = {}\ncount = {}\nsum_confidence = {}\nsum_correct = {}\n",
            self.bins.len(),
            self.total,
            real_array(&lower),
            real_array(&upper),
            int_array(&count),
            real_array(&sum_conf),
            int_array(&sum_correct),
        )
    }

    fn from_text(text: &str) -> Result<Self, FormatError> {
        let f = Fields::parse(text)?;
        f.expect("kind", "reliability-table")?;
        f.expect("version", &VERSION.to_string())?;
        let k: usize = f.scalar("k_bins")?;
        let total: usize = f.scalar("total")?;
        let lower: Vec<f64> = f.array("lower")?;
        let upper: Vec<f64> = f.array("upper")?;
        let count: Vec<usize> = f.array("count")?;
        let sum_conf: Vec<f64> = f.array("sum_confidence")?;
        let sum_correct: Vec<usize> = f.array("sum_correct")?;
        check_len("lower", lower.len(), k)?;
        check_len("upper", upper.len(), k)?;
        check_len("count", count.len(), k)?;
        check_len("sum_confidence", sum_conf.len(), k)?;
        check_len("sum_correct", sum_correct.len(), k)?;
        if count.iter().sum::<usize>() != total {
            return Err(FormatError::BadValue {
                key: "total",
                msg: "bin counts do not sum to total".into(),
            });
        }
        let bins = (0..k)
            .map(|i| ReliabilityBin {
                lower: lower[i],
                upper: upper[i],
                count: count[i],
                sum_confidence: sum_conf[i],
                sum_correct: sum_correct[i],
            })
            .collect();
        Ok(Self { bins, total })
    }
}

impl TextFormat for TemperatureModel {
    fn to_text(&self) -> String {
        let header = format!("# selfcal temperature model\nkind = temperature-model\nversion = {VERSION}\n");
        match self {
            Self::Scalar { tau } => format!("{header}variant = scalar\ntau = {}\n", real(*tau)),
            Self::Latent(net) => format!(
                "{header}variant = latent\nfeature_dim = {}\nhidden = {}\nhidden_weights = {}\n\
                 hidden_bias = {}\noutput_weights = {}\noutput_bias = {}\n",
                net.feature_dim,
                net.hidden,
                real_array(&net.hidden_weights),
                real_array(&net.hidden_bias),
                real_array(&net.output_weights),
                real(net.output_bias),
            ),
        }
    }

    fn from_text(text: &str) -> Result<Self, FormatError> {
        let f = Fields::parse(text)?;
        f.expect("kind", "temperature-model")?;
        f.expect("version", &VERSION.to_string())?;
        match f.raw("variant")? {
            "scalar" => {
                let tau: f64 = f.scalar("tau")?;
                TemperatureModel::scalar(tau).map_err(|e| FormatError::BadValue {
                    key: "tau",
                    msg: e.to_string(),
                })
            }
            "latent" => {
                let feature_dim: usize = f.scalar("feature_dim")?;
                let hidden: usize = f.scalar("hidden")?;
                let hidden_weights: Vec<f64> = f.array("hidden_weights")?;
                let hidden_bias: Vec<f64> = f.array("hidden_bias")?;
                let output_weights: Vec<f64> = f.array("output_weights")?;
                check_len("hidden_weights", hidden_weights.len(), hidden * feature_dim)?;
                check_len("hidden_bias", hidden_bias.len(), hidden)?;
                check_len("output_weights", output_weights.len(), hidden)?;
                Ok(Self::Latent(LatentNet {
                    feature_dim,
                    hidden,
                    hidden_weights,
                    hidden_bias,
                    output_weights,
                    output_bias: f.scalar("output_bias")?,
                }))
            }
            other => Err(FormatError::BadValue {
                key: "variant",
                msg: format!("unknown variant `{other}`"),
            }),
        }
    }
}
