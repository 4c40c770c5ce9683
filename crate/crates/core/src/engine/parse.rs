//! Answer-letter extraction from free text.
//!
//! Patterns, tried in this order; the first in-range match of the first
//! pattern that matches wins:
//!
//! 1. a letter right after `answer is` or `answer:` (optionally wrapped in
//!    `(`/`[`, optionally preceded by `option`),
//! 2. a letter right after the word `option`,
//! 3. a letter at the start of a line, followed by `.`, `)`, `]`, `:` or the
//!    end of the line,
//! 4. a letter wrapped in parentheses or brackets anywhere.
//!
//! Keywords are case-insensitive. Upper-case letters need only a non
//! alphanumeric character (or end of text) after them; lower-case letters
//! must be followed by punctuation or end of text, so that `answer is a bit
//! unclear` does not read as option A.

use std::sync::OnceLock;

use regex::Regex;

use crate::backends::option_letter;

/// Ways an answer letter may be phrased; `{L}` stands for the letter.
/// [`parse_answer`] recovers the letter from every one of them.
pub const ANSWER_RENDERINGS: &[&str] = &[
    "{L}",
    "{L}.",
    "({L})",
    "The answer is {L}.",
    "The answer is ({L})",
    "Answer: {L}",
    "answer: {L}",
    "Final answer: {L}",
    "I believe option ({L}) is correct.",
    "Option {L} is the best fit.",
    "{L}) because the other options do not apply",
    "After reviewing the feedback, the answer is {L}.",
];

pub fn render_answer(rendering: &str, index: usize) -> String {
    rendering.replace("{L}", &option_letter(index).to_string())
}

struct Patterns {
    answer: Regex,
    option: Regex,
    line_start: Regex,
    wrapped: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        answer: Regex::new(r"(?i)\banswer\s*(?:is\b|:)\s*(?:option\b\s*)?[\(\[]?\s*([A-Za-z])").unwrap(),
        option: Regex::new(r"(?i)\boption\b\s*[\(\[]?\s*([A-Za-z])").unwrap(),
        line_start: Regex::new(r"(?m)^\s*[\(\[]?([A-Za-z])(?:[\.\)\]:]|\s*$)").unwrap(),
        wrapped: Regex::new(r"[\(\[]([A-Za-z])[\)\]]").unwrap(),
    })
}

fn letter_index(c: char, k_opts: usize) -> Option<usize> {
    let idx = (c.to_ascii_uppercase() as u8).checked_sub(b'A')? as usize;
    (idx < k_opts).then_some(idx)
}

fn boundary_ok(letter: char, next: Option<char>) -> bool {
    match next {
        None => true,
        Some(n) if letter.is_ascii_uppercase() => !n.is_ascii_alphanumeric(),
        Some(n) => matches!(n, '.' | ')' | ']' | ',' | ':' | ';' | '!' | '?' | '\n' | '\r'),
    }
}

fn first_match(re: &Regex, text: &str, k_opts: usize, check_boundary: bool) -> Option<usize> {
    re.captures_iter(text).find_map(|cap| {
        let m = cap.get(1)?;
        let letter = m.as_str().chars().next()?;
        let next = text[m.end()..].chars().next();
        if check_boundary && !boundary_ok(letter, next) {
            return None;
        }
        letter_index(letter, k_opts)
    })
}

/// Option index named in `text`, or `None` when no pattern matches.
pub fn parse_answer(text: &str, k_opts: usize) -> Option<usize> {
    let p = patterns();
    first_match(&p.answer, text, k_opts, true)
        .or_else(|| first_match(&p.option, text, k_opts, true))
        .or_else(|| first_match(&p.line_start, text, k_opts, false))
        .or_else(|| first_match(&p.wrapped, text, k_opts, false))
}
