//! Shared helpers for integration tests: scripted clients and independent
//! brute-force oracles that deliberately avoid the library's own matching
//! code paths.

#![allow(dead_code)]

use std::sync::Mutex;

use ggate_core::guardrails::{ClientError, JudgeClient, ScorerClient};

/// Judge that pops scripted answers front-to-back and then keeps returning
/// the default.
pub struct ScriptedJudge {
    answers: Mutex<Vec<String>>,
    default: String,
}

impl ScriptedJudge {
    pub fn new(answers: &[&str], default: &str) -> Self {
        ScriptedJudge {
            answers: Mutex::new(answers.iter().map(|s| s.to_string()).collect()),
            default: default.to_string(),
        }
    }
}

impl JudgeClient for ScriptedJudge {
    fn ask(&self, _prompt: &str) -> Result<String, ClientError> {
        let mut answers = self.answers.lock().unwrap();
        if answers.is_empty() {
            Ok(self.default.clone())
        } else {
            Ok(answers.remove(0))
        }
    }
}

pub struct FixedScorer(pub f64);

impl ScorerClient for FixedScorer {
    fn score(&self, _text: &str) -> Result<f64, ClientError> {
        Ok(self.0)
    }
}

/// Independent normalization: explicit char loop rather than the library's
/// split/join implementation.
pub fn naive_normalize(text: &str) -> String {
    let mut out = String::new();
    let mut pending_space = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !out.is_empty() {
                pending_space = true;
            }
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            for lower in ch.to_lowercase() {
                out.push(lower);
            }
        }
    }
    out
}

/// O(n*m) substring scan over char windows; no use of `str::contains`.
pub fn naive_contains(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return true;
    }
    let hay: Vec<char> = haystack.chars().collect();
    let pat: Vec<char> = needle.chars().collect();
    if pat.len() > hay.len() {
        return false;
    }
    for start in 0..=(hay.len() - pat.len()) {
        if hay[start..start + pat.len()] == pat[..] {
            return true;
        }
    }
    false
}

/// Brute-force keyword oracle: first target (names before keywords, list
/// order) whose normalized form occurs in the normalized text.
pub fn oracle_keyword_match<'a>(
    text: &str,
    entity_names: &'a [String],
    keywords: &'a [String],
) -> Option<&'a str> {
    let hay = naive_normalize(text);
    for needle in entity_names.iter().chain(keywords.iter()) {
        let norm = naive_normalize(needle);
        if !norm.is_empty() && naive_contains(&hay, &norm) {
            return Some(needle);
        }
    }
    None
}
