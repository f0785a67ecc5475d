//! Parsers for the structured tails of model replies.
//!
//! Grammar, all matching case-insensitive and whitespace-tolerant:
//!
//! * purchase verdict: the text after the last `VERDICT:` must contain
//!   `Option <i>: <Buy|Pass>` for every option `1..=n`. The first line for a
//!   given index wins; indices above `n` are ignored.
//! * evaluation verdict: the last `Better answer from student <A|B>`.
//! * tagged answer: the body of the last `<answer>…</answer>` pair, trimmed.
//! * follow-ups: every line of the form `FOLLOW-UP QUESTION: <text>`, in
//!   order, allowing list bullets or bold markers around the prefix.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no VERDICT block")]
    MissingVerdictBlock,
    #[error("VERDICT block has no verdict for option {0}")]
    MissingOption(usize),
    #[error("no `Better answer from student A/B` line")]
    NoStudentVerdict,
    #[error("no <answer></answer> pair")]
    NoAnswerTags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Buy,
    Pass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Student {
    A,
    B,
}

impl Student {
    pub fn other(self) -> Self {
        match self {
            Student::A => Student::B,
            Student::B => Student::A,
        }
    }
}

macro_rules! regex {
    ($re:literal) => {{
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new($re).expect("valid regex"))
    }};
}

pub fn parse_verdict(text: &str, n_options: usize) -> Result<Vec<Verdict>, ParseError> {
    let block_start = regex!(r"(?i)verdict\s*\**\s*:")
        .find_iter(text)
        .last()
        .ok_or(ParseError::MissingVerdictBlock)?
        .end();
    let block = &text[block_start..];
    let mut verdicts: Vec<Option<Verdict>> = vec![None; n_options];
    for cap in regex!(r"(?i)option\s*(\d+)\s*[:.)\-]?\s*\**\s*(buy|pass)\b").captures_iter(block) {
        let Ok(index) = cap[1].parse::<usize>() else {
            continue;
        };
        if index == 0 || index > n_options || verdicts[index - 1].is_some() {
            continue;
        }
        verdicts[index - 1] = Some(if cap[2].eq_ignore_ascii_case("buy") {
            Verdict::Buy
        } else {
            Verdict::Pass
        });
    }
    verdicts
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or(ParseError::MissingOption(i + 1)))
        .collect()
}

pub fn parse_eval_verdict(text: &str) -> Result<Student, ParseError> {
    let cap = regex!(r"(?i)better\s+answer\s+from\s+student\s*:?\s*\**\s*([ab])\b")
        .captures_iter(text)
        .last()
        .ok_or(ParseError::NoStudentVerdict)?;
    Ok(if cap[1].eq_ignore_ascii_case("a") {
        Student::A
    } else {
        Student::B
    })
}

pub fn parse_tagged_answer(text: &str) -> Result<String, ParseError> {
    let close = text.rfind("</answer>").ok_or(ParseError::NoAnswerTags)?;
    let open = text[..close]
        .rfind("<answer>")
        .ok_or(ParseError::NoAnswerTags)?;
    Ok(text[open + "<answer>".len()..close].trim().to_owned())
}

/// Never fails: a reply without markers simply asks no follow-ups.
pub fn parse_followups(text: &str) -> Vec<String> {
    let re = regex!(r"(?i)^[\s>*•\-]*(?:\d+[.)]\s*)?[\s>*•\-]*follow[\s\-_]*up\s+question\s*\**\s*:\s*\**\s*(.*?)[\s*]*$");
    text.lines()
        .filter_map(|line| re.captures(line))
        .map(|cap| cap[1].trim().to_owned())
        .filter(|q| !q.is_empty() && q != "<follow up question goes here>" && q != "...")
        .collect()
}
