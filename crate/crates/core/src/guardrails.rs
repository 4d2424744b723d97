//! Filter and transform mechanisms: prefix injection, keyword matching,
//! judge filters, two-stage routing, classifier thresholding, and
//! forced-incorrect rewriting.
//!
//! Every operation is pure given its clients; judge and scorer
//! implementations must be safe for concurrent calls.

use std::time::Instant;

use thiserror::Error;

use crate::policy::{
    template, FailMode, ForgetTarget, GuardrailPolicy, StageKind, StageSpec, TraceEntry, Verdict,
};

/// Literal instruction prepended to questions routed to incorrect answering.
pub const FORCE_INCORRECT_PREFIX: &str = "Give a random incorrect answer";

/// A model used, via a fixed prompt, as a binary classifier over text.
/// Implementations pass the prompt through verbatim, without retry mutation.
pub trait JudgeClient: Send + Sync {
    fn ask(&self, prompt: &str) -> Result<String, ClientError>;
}

/// A trained classifier scoring how likely a text concerns the forget set.
/// Scores are probabilities in [0, 1].
pub trait ScorerClient: Send + Sync {
    fn score(&self, text: &str) -> Result<f64, ClientError>;
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),
    #[error("scorer unavailable: {0}")]
    ScorerUnavailable(String),
}

/// Where a two-stage screen routes a question.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// Forward the question untouched.
    Normal,
    /// Prefix the question with [`FORCE_INCORRECT_PREFIX`].
    ForceIncorrect,
}

/// A parsed one-word judge answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YesNo {
    Yes,
    No,
    Ambiguous,
}

/// Case-fold and collapse whitespace runs so keyword matching ignores
/// formatting differences.
pub fn normalize_for_match(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Prepend `prefix` to `user_text` with exactly one newline between them.
/// Not idempotent: applying twice double-prefixes.
pub fn apply_prompt_prefix(user_text: &str, prefix: &str) -> String {
    debug_assert!(!prefix.is_empty());
    format!("{prefix}\n{user_text}")
}

/// Prefix a question with the forced-incorrect instruction.
pub fn force_incorrect_rewrite(question: &str) -> String {
    format!("{FORCE_INCORRECT_PREFIX}\n{question}")
}

/// Block iff the normalized text contains any normalized entity name or
/// keyword as a substring. First match in target list order wins; entity
/// names are checked before keywords.
pub fn keyword_verdict(text: &str, targets: &ForgetTarget) -> Verdict {
    let haystack = normalize_for_match(text);
    for needle in targets.entity_names.iter().chain(targets.keywords.iter()) {
        let norm = normalize_for_match(needle);
        if !norm.is_empty() && haystack.contains(&norm) {
            return Verdict::block(format!("matched:{needle}"));
        }
    }
    Verdict::Pass
}

/// Classify a raw judge completion by its first token, case-insensitively,
/// with surrounding whitespace and punctuation stripped. Total: every string
/// maps to exactly one outcome.
pub fn parse_yes_no(raw: &str) -> YesNo {
    let first = raw.split_whitespace().next().unwrap_or("");
    let token = first.trim_matches(|c: char| c.is_ascii_punctuation());
    if token.eq_ignore_ascii_case("yes") {
        YesNo::Yes
    } else if token.eq_ignore_ascii_case("no") {
        YesNo::No
    } else {
        YesNo::Ambiguous
    }
}

fn resolve_uncertain(fail_mode: FailMode, reason: &str) -> Verdict {
    match fail_mode {
        FailMode::FailClosed => Verdict::block(reason),
        FailMode::FailOpen => Verdict::Pass,
    }
}

/// Ask the judge whether `answer` reveals information about the targets.
/// Yes blocks, No passes, anything else resolves per the stage's fail mode.
///
/// Name lists longer than `name_chunk_limit` are split across several judge
/// calls combined by OR: any Yes blocks.
pub fn judge_output_verdict(
    answer: &str,
    targets: &ForgetTarget,
    judge: &dyn JudgeClient,
    stage: &StageSpec,
    name_chunk_limit: usize,
) -> Verdict {
    debug_assert_eq!(stage.kind, StageKind::JudgeOutput);
    let template = stage.prompt_template.as_deref().unwrap_or_default();
    let chunk_limit = name_chunk_limit.max(1);

    let name_chunks: Vec<String> = if targets.entity_names.is_empty() {
        vec![String::new()]
    } else {
        targets
            .entity_names
            .chunks(chunk_limit)
            .map(|chunk| chunk.join(", "))
            .collect()
    };

    let mut uncertain_reason: Option<String> = None;
    for names in &name_chunks {
        let prompt = template::render_with_subject(
            template,
            &[("names", names), ("topic", &targets.topic_description)],
            "answer",
            answer,
        );
        match judge.ask(&prompt) {
            Ok(raw) => match parse_yes_no(&raw) {
                YesNo::Yes => return Verdict::block("judge said yes"),
                YesNo::No => {}
                YesNo::Ambiguous => {
                    uncertain_reason.get_or_insert_with(|| "ambiguous judge".to_string());
                }
            },
            Err(err) => {
                uncertain_reason.get_or_insert_with(|| err.to_string());
            }
        }
    }
    match uncertain_reason {
        Some(reason) => resolve_uncertain(stage.fail_mode, &reason),
        None => Verdict::Pass,
    }
}

/// Ask the judge whether `question` is appropriate. Pass-polarity is the
/// reverse of the output filter: Yes passes, No blocks, anything else
/// resolves per the stage's fail mode.
pub fn judge_input_verdict(
    question: &str,
    targets: &ForgetTarget,
    judge: &dyn JudgeClient,
    stage: &StageSpec,
) -> Verdict {
    debug_assert_eq!(stage.kind, StageKind::JudgeInput);
    let template = stage.prompt_template.as_deref().unwrap_or_default();
    let prompt = template::render_with_subject(
        template,
        &[
            ("names", &targets.entity_names.join(", ")),
            ("topic", &targets.topic_description),
        ],
        "question",
        question,
    );
    match judge.ask(&prompt) {
        Ok(raw) => match parse_yes_no(&raw) {
            YesNo::Yes => Verdict::Pass,
            YesNo::No => Verdict::block("judge said no"),
            YesNo::Ambiguous => resolve_uncertain(stage.fail_mode, "ambiguous judge"),
        },
        Err(err) => resolve_uncertain(stage.fail_mode, &err.to_string()),
    }
}

/// Two-stage screen: a topic pre-screen followed by an appropriateness
/// screen for on-topic questions.
///
/// Stage 1 No means the question is unrelated and always routes Normal, so
/// benign queries are never forced to answer incorrectly. Stage 1 Yes asks
/// stage 2: Yes routes Normal, No routes ForceIncorrect. Ambiguity or judge
/// failure resolves per the stage's fail mode, and fail-closed can route
/// ForceIncorrect only when stage 1 answered Yes.
pub fn two_stage_route(question: &str, judge: &dyn JudgeClient, stage: &StageSpec) -> Route {
    debug_assert_eq!(stage.kind, StageKind::TwoStageMcq);
    let ask = |template: &str| -> YesNo {
        let prompt = template::render_with_subject(template, &[], "question", question);
        match judge.ask(&prompt) {
            Ok(raw) => parse_yes_no(&raw),
            Err(_) => YesNo::Ambiguous,
        }
    };

    match ask(stage.prompt_template.as_deref().unwrap_or_default()) {
        YesNo::No | YesNo::Ambiguous => Route::Normal,
        YesNo::Yes => match ask(stage.second_prompt_template.as_deref().unwrap_or_default()) {
            YesNo::Yes => Route::Normal,
            YesNo::No => Route::ForceIncorrect,
            YesNo::Ambiguous => match stage.fail_mode {
                FailMode::FailClosed => Route::ForceIncorrect,
                FailMode::FailOpen => Route::Normal,
            },
        },
    }
}

/// Block iff the scorer's probability reaches the threshold. Ties block:
/// equality counts as reaching it.
pub fn classifier_verdict(
    text: &str,
    scorer: &dyn ScorerClient,
    threshold: f64,
) -> Result<Verdict, ClientError> {
    debug_assert!((0.0..=1.0).contains(&threshold));
    let score = scorer.score(text)?;
    if !(0.0..=1.0).contains(&score) {
        return Err(ClientError::ScorerUnavailable(format!(
            "score {score} outside [0, 1]"
        )));
    }
    if score >= threshold {
        Ok(Verdict::block(format!(
            "classifier score {score:.4} >= threshold {threshold:.4}"
        )))
    } else {
        Ok(Verdict::Pass)
    }
}

/// Judge and scorer handles a stage chain may call.
#[derive(Clone, Copy, Default)]
pub struct FilterClients<'a> {
    pub judge: Option<&'a dyn JudgeClient>,
    pub scorer: Option<&'a dyn ScorerClient>,
}

impl<'a> FilterClients<'a> {
    pub fn with_judge(judge: &'a dyn JudgeClient) -> Self {
        FilterClients {
            judge: Some(judge),
            scorer: None,
        }
    }
}

/// Result of running a stage chain over a text.
#[derive(Debug, Clone, PartialEq)]
pub struct StageChainOutcome {
    /// `Pass` when every stage passed, otherwise the first `Block`.
    pub verdict: Verdict,
    /// The working text after all transforms; meaningful only when not
    /// blocked.
    pub text: String,
    /// One entry per executed stage, in execution order.
    pub entries: Vec<TraceEntry>,
    /// Whether any stage rewrote the text.
    pub rewritten: bool,
}

impl StageChainOutcome {
    pub fn blocked(&self) -> bool {
        self.verdict.is_block()
    }
}

/// Run a stage chain in order. Rewrite stages transform the working text for
/// subsequent stages; the first Block short-circuits. An empty chain is the
/// identity on the text.
pub fn execute_stages(
    text: &str,
    stages: &[StageSpec],
    policy: &GuardrailPolicy,
    clients: &FilterClients,
) -> StageChainOutcome {
    let mut working = text.to_string();
    let mut entries = Vec::with_capacity(stages.len());
    let mut route = Route::Normal;
    let mut rewritten = false;

    for stage in stages {
        let started = Instant::now();
        let verdict = run_stage(&working, stage, policy, clients, &mut route);
        if let Verdict::Rewrite { new_text } = &verdict {
            working = new_text.clone();
            rewritten = true;
        }
        let blocked = verdict.is_block();
        entries.push(TraceEntry {
            stage_id: stage.stage_id.clone(),
            verdict: verdict.clone(),
            elapsed: started.elapsed(),
        });
        if blocked {
            return StageChainOutcome {
                verdict,
                text: working,
                entries,
                rewritten,
            };
        }
    }

    StageChainOutcome {
        verdict: Verdict::Pass,
        text: working,
        entries,
        rewritten,
    }
}

fn run_stage(
    text: &str,
    stage: &StageSpec,
    policy: &GuardrailPolicy,
    clients: &FilterClients,
    route: &mut Route,
) -> Verdict {
    match stage.kind {
        StageKind::PromptPrefix => {
            let prefix = template::render(
                stage.prompt_template.as_deref().unwrap_or_default(),
                &[
                    ("names", &policy.joined_names()),
                    ("topic", &policy.targets.topic_description),
                ],
            );
            Verdict::rewrite(apply_prompt_prefix(text, &prefix))
        }
        StageKind::KeywordInput | StageKind::KeywordOutput => {
            keyword_verdict(text, &policy.targets)
        }
        StageKind::JudgeInput => match clients.judge {
            Some(judge) => judge_input_verdict(text, &policy.targets, judge, stage),
            None => resolve_uncertain(stage.fail_mode, "judge unavailable: no client configured"),
        },
        StageKind::JudgeOutput => match clients.judge {
            Some(judge) => judge_output_verdict(
                text,
                &policy.targets,
                judge,
                stage,
                policy.name_chunk_limit,
            ),
            None => resolve_uncertain(stage.fail_mode, "judge unavailable: no client configured"),
        },
        StageKind::TwoStageMcq => {
            *route = match clients.judge {
                Some(judge) => two_stage_route(text, judge, stage),
                None => Route::Normal,
            };
            Verdict::Pass
        }
        StageKind::ClassifierInput => {
            let threshold = stage.threshold.unwrap_or(1.0);
            match clients.scorer {
                Some(scorer) => match classifier_verdict(text, scorer, threshold) {
                    Ok(verdict) => verdict,
                    Err(err) => resolve_uncertain(stage.fail_mode, &err.to_string()),
                },
                None => {
                    resolve_uncertain(stage.fail_mode, "scorer unavailable: no client configured")
                }
            }
        }
        StageKind::ForceIncorrectPrefix => match route {
            Route::ForceIncorrect => Verdict::rewrite(force_incorrect_rewrite(text)),
            Route::Normal => Verdict::Pass,
        },
    }
}
