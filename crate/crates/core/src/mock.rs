//! Deterministic mock upstream, judge, and scorer for offline, reproducible
//! runs of the full pipeline and metrics.
//!
//! Behavior is a pure function of (table, request). Completions are
//! exact-match lookups on the joined user content, which is what lets tests
//! detect prefix injection: a prefixed request no longer matches the key for
//! the bare question and falls through to the default completion.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guardrails::{ClientError, JudgeClient, ScorerClient};
use crate::upstream::{
    validate_score_args, ChatClient, ChatRequest, ChatResponse, ScoredSequence, UpstreamError,
};

/// Keyword-triggered canned judge answer. The first rule whose keyword set
/// intersects the prompt fires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRule {
    pub keywords: Vec<String>,
    pub answer: String,
}

/// Keyword-triggered canned classifier score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierRule {
    pub keywords: Vec<String>,
    pub score: f64,
}

/// Canned behavior for the mock: completions, sequence scores, judge
/// answers, and classifier scores.
#[derive(Debug, Clone, Default)]
pub struct MockTable {
    completions: HashMap<String, String>,
    pub default_completion: String,
    scores: HashMap<(String, String), Vec<f64>>,
    pub default_score: Option<Vec<f64>>,
    judge_rules: Vec<JudgeRule>,
    pub default_judge_answer: String,
    classifier_rules: Vec<ClassifierRule>,
    pub default_classifier_score: f64,
}

#[derive(Debug, Error)]
pub enum MockError {
    #[error("no score configured for prompt {prompt:?} / continuation {continuation:?}")]
    MissingScore { prompt: String, continuation: String },
    #[error("duplicate table key: {0}")]
    DuplicateKey(String),
    #[error("invalid logprobs: {0}")]
    InvalidLogprobs(String),
    #[error("table format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("table io error: {0}")]
    Io(#[from] std::io::Error),
}

fn check_logprobs(logprobs: &[f64]) -> Result<(), MockError> {
    if logprobs.is_empty() {
        return Err(MockError::InvalidLogprobs("empty logprob list".into()));
    }
    for &lp in logprobs {
        if lp.is_nan() || lp > 0.0 {
            return Err(MockError::InvalidLogprobs(format!(
                "logprob {lp} must be a number <= 0"
            )));
        }
    }
    Ok(())
}

impl MockTable {
    pub fn new() -> Self {
        MockTable {
            default_completion: "I don't know.".into(),
            default_judge_answer: "No".into(),
            ..MockTable::default()
        }
    }

    pub fn add_completion(
        &mut self,
        request: impl Into<String>,
        completion: impl Into<String>,
    ) -> Result<(), MockError> {
        let key = request.into();
        if self.completions.contains_key(&key) {
            return Err(MockError::DuplicateKey(key));
        }
        self.completions.insert(key, completion.into());
        Ok(())
    }

    pub fn add_score(
        &mut self,
        prompt: impl Into<String>,
        continuation: impl Into<String>,
        token_logprobs: Vec<f64>,
    ) -> Result<(), MockError> {
        check_logprobs(&token_logprobs)?;
        let key = (prompt.into(), continuation.into());
        if self.scores.contains_key(&key) {
            return Err(MockError::DuplicateKey(format!("{key:?}")));
        }
        self.scores.insert(key, token_logprobs);
        Ok(())
    }

    pub fn set_default_score(&mut self, token_logprobs: Vec<f64>) -> Result<(), MockError> {
        check_logprobs(&token_logprobs)?;
        self.default_score = Some(token_logprobs);
        Ok(())
    }

    pub fn add_judge_rule(&mut self, keywords: Vec<String>, answer: impl Into<String>) {
        self.judge_rules.push(JudgeRule {
            keywords,
            answer: answer.into(),
        });
    }

    pub fn add_classifier_rule(&mut self, keywords: Vec<String>, score: f64) {
        self.classifier_rules.push(ClassifierRule { keywords, score });
    }

    /// Exact-match completion lookup on the joined user content; a miss
    /// answers the default completion.
    pub fn complete(&self, request: &ChatRequest) -> ChatResponse {
        let key = request.joined_user_content();
        let content = self
            .completions
            .get(&key)
            .unwrap_or(&self.default_completion)
            .clone();
        ChatResponse::stop(content)
    }

    /// First judge rule whose keyword set intersects the prompt fires;
    /// otherwise the default answer.
    pub fn judge(&self, prompt: &str) -> String {
        for rule in &self.judge_rules {
            if rule.keywords.iter().any(|kw| prompt.contains(kw)) {
                return rule.answer.clone();
            }
        }
        self.default_judge_answer.clone()
    }

    /// Configured logprobs for the pair, verbatim; falls back to the default
    /// score when configured.
    pub fn score(&self, prompt: &str, continuation: &str) -> Result<ScoredSequence, MockError> {
        let logprobs = self
            .scores
            .get(&(prompt.to_string(), continuation.to_string()))
            .or(self.default_score.as_ref())
            .ok_or_else(|| MockError::MissingScore {
                prompt: prompt.to_string(),
                continuation: continuation.to_string(),
            })?;
        Ok(ScoredSequence::new(prompt, continuation, logprobs.clone())
            .expect("table logprobs validated on insert"))
    }

    /// First classifier rule whose keyword set intersects the text fires.
    pub fn classify(&self, text: &str) -> f64 {
        for rule in &self.classifier_rules {
            if rule.keywords.iter().any(|kw| text.contains(kw)) {
                return rule.score;
            }
        }
        self.default_classifier_score
    }

    /// Load a table from line-delimited JSON records.
    pub fn from_jsonl(text: &str) -> Result<Self, MockError> {
        let mut table = MockTable::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: TableRecord =
                serde_json::from_str(line).map_err(|err| MockError::Format {
                    line: line_no,
                    message: err.to_string(),
                })?;
            table.apply(record).map_err(|err| MockError::Format {
                line: line_no,
                message: err.to_string(),
            })?;
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MockError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_jsonl(&text)
    }

    fn apply(&mut self, record: TableRecord) -> Result<(), MockError> {
        match record {
            TableRecord::Completion { request, response } => {
                self.add_completion(request, response)
            }
            TableRecord::DefaultCompletion { response } => {
                self.default_completion = response;
                Ok(())
            }
            TableRecord::Score {
                prompt,
                continuation,
                token_logprobs,
            } => self.add_score(prompt, continuation, token_logprobs),
            TableRecord::DefaultScore { token_logprobs } => {
                self.set_default_score(token_logprobs)
            }
            TableRecord::JudgeRule { keywords, answer } => {
                self.add_judge_rule(keywords, answer);
                Ok(())
            }
            TableRecord::DefaultJudge { answer } => {
                self.default_judge_answer = answer;
                Ok(())
            }
            TableRecord::ClassifierRule { keywords, score } => {
                self.add_classifier_rule(keywords, score);
                Ok(())
            }
            TableRecord::DefaultClassifier { score } => {
                self.default_classifier_score = score;
                Ok(())
            }
        }
    }
}

/// One line of a mock table file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TableRecord {
    Completion { request: String, response: String },
    DefaultCompletion { response: String },
    Score {
        prompt: String,
        continuation: String,
        token_logprobs: Vec<f64>,
    },
    DefaultScore { token_logprobs: Vec<f64> },
    JudgeRule { keywords: Vec<String>, answer: String },
    DefaultJudge { answer: String },
    ClassifierRule { keywords: Vec<String>, score: f64 },
    DefaultClassifier { score: f64 },
}

/// In-process mock upstream that records every request it serves, so tests
/// can assert on observed content and call counts.
pub struct MockUpstream {
    table: Arc<MockTable>,
    calls: Mutex<Vec<ChatRequest>>,
}

impl MockUpstream {
    pub fn new(table: Arc<MockTable>) -> Self {
        MockUpstream {
            table,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    /// Joined user content of each observed request, in arrival order.
    pub fn observed_contents(&self) -> Vec<String> {
        self.calls
            .lock()
            .unwrap()
            .iter()
            .map(ChatRequest::joined_user_content)
            .collect()
    }
}

impl ChatClient for MockUpstream {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, UpstreamError> {
        request.validate()?;
        self.calls.lock().unwrap().push(request.clone());
        Ok(self.table.complete(request))
    }

    fn score_sequence(
        &self,
        prompt: &str,
        continuation: &str,
    ) -> Result<ScoredSequence, UpstreamError> {
        validate_score_args(continuation)?;
        self.table
            .score(prompt, continuation)
            .map_err(|err| UpstreamError::Rejected(err.to_string()))
    }
}

/// In-process mock judge over the table's judge rules.
pub struct MockJudge {
    table: Arc<MockTable>,
    prompts: Mutex<Vec<String>>,
}

impl MockJudge {
    pub fn new(table: Arc<MockTable>) -> Self {
        MockJudge {
            table,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn observed_prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }
}

impl JudgeClient for MockJudge {
    fn ask(&self, prompt: &str) -> Result<String, ClientError> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        Ok(self.table.judge(prompt))
    }
}

/// In-process mock scorer over the table's classifier rules.
pub struct MockScorer {
    table: Arc<MockTable>,
}

impl MockScorer {
    pub fn new(table: Arc<MockTable>) -> Self {
        MockScorer { table }
    }
}

impl ScorerClient for MockScorer {
    fn score(&self, text: &str) -> Result<f64, ClientError> {
        Ok(self.table.classify(text))
    }
}
