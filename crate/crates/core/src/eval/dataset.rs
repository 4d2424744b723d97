//! Line-delimited evaluation datasets.
//!
//! QA records follow the TOFU export shape: `question`, `answer`,
//! `paraphrased_answer`, `perturbed_answers` (the TOFU field name
//! `perturbed_answer` is accepted as an alias), plus a `split` label and
//! optional `entities`. MCQ records carry a question, exactly four choices,
//! the answer index, and a set name.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which side of the unlearning contract an item belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Forget,
    Retain,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
        }
    }
}

/// One question/answer evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub paraphrased_answer: String,
    /// Perturbed incorrect answers; must be non-empty for truth-ratio
    /// evaluation.
    #[serde(default, alias = "perturbed_answer")]
    pub perturbed_answers: Vec<String>,
    pub split: Split,
    #[serde(default)]
    pub entities: Vec<String>,
}

impl QAItem {
    /// Whether the record carries what the truth ratio needs.
    pub fn supports_truth_ratio(&self) -> bool {
        !self.perturbed_answers.is_empty() && !self.paraphrased_answer.is_empty()
    }
}

/// One multiple-choice evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCQItem {
    pub question: String,
    pub choices: Vec<String>,
    pub answer_index: usize,
    pub set_name: String,
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("io error reading dataset: {0}")]
    Io(#[from] std::io::Error),
}

fn parse_lines<T, F>(text: &str, validate: F) -> Result<Vec<T>, FormatError>
where
    T: serde::de::DeserializeOwned,
    F: Fn(&T) -> Result<(), String>,
{
    let mut items = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(line).map_err(|err| FormatError::Line {
            line: line_no,
            message: err.to_string(),
        })?;
        validate(&item).map_err(|message| FormatError::Line {
            line: line_no,
            message,
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Parse QA records from line-delimited JSON text. Any malformed line fails
/// the whole load: a silently partial dataset would skew accuracy.
pub fn parse_qa_records(text: &str) -> Result<Vec<QAItem>, FormatError> {
    parse_lines(text, |item: &QAItem| {
        if item.question.is_empty() {
            return Err("question must be non-empty".into());
        }
        Ok(())
    })
}

pub fn load_qa_dataset(path: impl AsRef<Path>) -> Result<Vec<QAItem>, FormatError> {
    parse_qa_records(&std::fs::read_to_string(path)?)
}

/// Parse MCQ records from line-delimited JSON text.
pub fn parse_mcq_records(text: &str) -> Result<Vec<MCQItem>, FormatError> {
    parse_lines(text, |item: &MCQItem| {
        if item.choices.len() != 4 {
            return Err(format!("expected 4 choices, found {}", item.choices.len()));
        }
        if item.answer_index > 3 {
            return Err(format!("answer_index {} out of range", item.answer_index));
        }
        for (i, a) in item.choices.iter().enumerate() {
            for b in item.choices.iter().skip(i + 1) {
                if a == b {
                    return Err(format!("duplicate choice {a:?}"));
                }
            }
        }
        Ok(())
    })
}

pub fn load_mcq_dataset(path: impl AsRef<Path>) -> Result<Vec<MCQItem>, FormatError> {
    parse_mcq_records(&std::fs::read_to_string(path)?)
}
