//! Versioned prompt templates.
//!
//! The v1 texts live under `templates/v1/` and are compiled in. Templates
//! are content-addressed: [`Templates::hash`] is recorded in every
//! transcript, so any wording change is visible in the outputs.
//!
//! Placeholders are `{name}`; unknown names are left untouched and
//! substituted values are never re-scanned.

use std::sync::OnceLock;

use crate::backends::{option_letter, CallKind};
use crate::seeding::sha256_hex;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub version: &'static str,
    pub answer: &'static str,
    pub cot: &'static str,
    pub feedback: &'static str,
    pub refine: &'static str,
    hash: String,
}

impl Templates {
    pub fn v1() -> &'static Templates {
        static V1: OnceLock<Templates> = OnceLock::new();
        V1.get_or_init(|| {
            let mut t = Templates {
                version: "v1",
                answer: include_str!("../../templates/v1/answer.txt"),
                cot: include_str!("../../templates/v1/cot.txt"),
                feedback: include_str!("../../templates/v1/feedback.txt"),
                refine: include_str!("../../templates/v1/refine.txt"),
                hash: String::new(),
            };
            t.hash = t.content_hash();
            t
        })
    }

    fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        for (name, text) in [
            ("version", self.version),
            ("answer", self.answer),
            ("cot", self.cot),
            ("feedback", self.feedback),
            ("refine", self.refine),
        ] {
            buf.extend_from_slice(name.as_bytes());
            buf.push(0);
            buf.extend_from_slice(text.as_bytes());
            buf.push(0);
        }
        sha256_hex(&buf)
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Which template a prompt was rendered from, judged by its first line.
    pub fn classify(&self, prompt: &str) -> Option<CallKind> {
        let first = prompt.lines().next()?;
        [
            (self.answer, CallKind::Answer),
            (self.cot, CallKind::Cot),
            (self.feedback, CallKind::Feedback),
            (self.refine, CallKind::Refine),
        ]
        .into_iter()
        .find(|(t, _)| t.lines().next() == Some(first))
        .map(|(_, kind)| kind)
    }
}

/// Single-pass `{name}` substitution.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = &after[..close];
                match vars.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push('{');
                        out.push_str(name);
                        out.push('}');
                    }
                }
                rest = &after[close + 1..];
            }
            None => {
                out.push_str(&rest[open..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out.trim_end().to_string()
}

/// `A. first\nB. second\n...`
pub fn options_block(options: &[String]) -> String {
    options
        .iter()
        .enumerate()
        .map(|(i, o)| format!("{}. {o}\n", option_letter(i)))
        .collect()
}

pub fn cot_block(cot: Option<&str>) -> String {
    cot.map(|c| format!("Reasoning: {c}\n")).unwrap_or_default()
}

pub fn confidence_block(confidence: Option<f64>) -> String {
    confidence
        .map(|c| format!("Stated confidence: {c:.4}\n"))
        .unwrap_or_default()
}

/// Earlier (answer, feedback) exchanges, oldest first.
pub fn history_block(history: &[(char, String)]) -> String {
    history
        .iter()
        .map(|(a, f)| format!("Earlier answer: {a}\nEarlier feedback: {f}\n"))
        .collect()
}
