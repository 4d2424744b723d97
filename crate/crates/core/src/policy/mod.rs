//! Policy data model shared by the gateway and the evaluation harness.
//!
//! A [`GuardrailPolicy`] declares what must be forgotten ([`ForgetTarget`]),
//! the ordered filter stages that enforce it, and the refusal text returned
//! when a stage blocks. Policies are immutable after [`load_policy`] and safe
//! to share read-only across concurrent requests.

pub mod template;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Neutral refusal used when a policy does not supply its own wording.
pub const DEFAULT_REFUSAL_TEMPLATE: &str =
    "I'm sorry, I don't have any information about that.";

/// Default maximum number of entity names rendered into a single judge
/// prompt; longer lists are split across multiple judge calls.
pub const DEFAULT_NAME_CHUNK_LIMIT: usize = 50;

/// What a policy is supposed to make the model forget.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgetTarget {
    /// Entity names matched as substrings after normalization and rendered
    /// into judge prompts via `{names}`.
    #[serde(default)]
    pub entity_names: Vec<String>,
    /// Additional substring patterns for keyword stages.
    #[serde(default)]
    pub keywords: Vec<String>,
    /// Free-text topic description rendered into prompts via `{topic}`.
    #[serde(default)]
    pub topic_description: String,
}

impl ForgetTarget {
    pub fn is_empty(&self) -> bool {
        self.entity_names.is_empty()
            && self.keywords.is_empty()
            && self.topic_description.is_empty()
    }
}

/// The filter and transform mechanisms a stage can apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Prepend a rendered prefix to the user text before the upstream call.
    PromptPrefix,
    /// Block the request when a target matches the user text.
    KeywordInput,
    /// Block the response when a target matches the upstream answer.
    KeywordOutput,
    /// Ask a judge model whether the question is appropriate; No blocks.
    JudgeInput,
    /// Ask a judge model whether the answer reveals forget targets; Yes blocks.
    JudgeOutput,
    /// Topic pre-screen followed by an exam-appropriateness screen; flagged
    /// questions are routed to forced-incorrect answering.
    TwoStageMcq,
    /// Block the request when a classifier score reaches the threshold.
    ClassifierInput,
    /// Prepend the forced-incorrect instruction when an earlier two-stage
    /// screen routed the request that way.
    ForceIncorrectPrefix,
}

impl StageKind {
    /// Stage kinds that operate on the request before the upstream call.
    pub fn is_input(self) -> bool {
        !self.is_output()
    }

    /// Stage kinds that operate on the upstream response.
    pub fn is_output(self) -> bool {
        matches!(self, StageKind::KeywordOutput | StageKind::JudgeOutput)
    }

    /// Kinds whose behavior is driven by a prompt template.
    pub fn uses_template(self) -> bool {
        matches!(
            self,
            StageKind::PromptPrefix
                | StageKind::JudgeInput
                | StageKind::JudgeOutput
                | StageKind::TwoStageMcq
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::PromptPrefix => "prompt_prefix",
            StageKind::KeywordInput => "keyword_input",
            StageKind::KeywordOutput => "keyword_output",
            StageKind::JudgeInput => "judge_input",
            StageKind::JudgeOutput => "judge_output",
            StageKind::TwoStageMcq => "two_stage_mcq",
            StageKind::ClassifierInput => "classifier_input",
            StageKind::ForceIncorrectPrefix => "force_incorrect_prefix",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a stage resolves judge or scorer uncertainty and client failures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailMode {
    /// Treat uncertainty as harmless and pass the text through.
    FailOpen,
    /// Treat uncertainty as a leak and block. The default: the forget
    /// guarantee is the safety property the filters protect.
    #[default]
    FailClosed,
}

/// One configured filter stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage_id: String,
    pub kind: StageKind,
    /// Prompt template for prefix and judge kinds. For `two_stage_mcq` this
    /// is the topic pre-screen prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_template: Option<String>,
    /// Exam-appropriateness prompt for `two_stage_mcq` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_prompt_template: Option<String>,
    /// Block threshold in [0, 1]; present iff kind is `classifier_input`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub fail_mode: FailMode,
}

impl StageSpec {
    pub fn new(stage_id: impl Into<String>, kind: StageKind) -> Self {
        StageSpec {
            stage_id: stage_id.into(),
            kind,
            prompt_template: None,
            second_prompt_template: None,
            threshold: None,
            fail_mode: FailMode::default(),
        }
    }

    pub fn with_template(mut self, template: impl Into<String>) -> Self {
        self.prompt_template = Some(template.into());
        self
    }

    pub fn with_second_template(mut self, template: impl Into<String>) -> Self {
        self.second_prompt_template = Some(template.into());
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = Some(threshold);
        self
    }

    pub fn with_fail_mode(mut self, fail_mode: FailMode) -> Self {
        self.fail_mode = fail_mode;
        self
    }
}

/// A complete declarative unlearning policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardrailPolicy {
    pub policy_id: String,
    pub targets: ForgetTarget,
    #[serde(default)]
    pub input_stages: Vec<StageSpec>,
    #[serde(default)]
    pub output_stages: Vec<StageSpec>,
    /// Hardcoded response returned whenever a stage blocks.
    #[serde(default = "default_refusal_template")]
    pub refusal_template: String,
    /// Chunk size for rendering long entity-name lists into judge prompts.
    #[serde(default = "default_name_chunk_limit")]
    pub name_chunk_limit: usize,
}

fn default_refusal_template() -> String {
    DEFAULT_REFUSAL_TEMPLATE.to_string()
}

fn default_name_chunk_limit() -> usize {
    DEFAULT_NAME_CHUNK_LIMIT
}

impl GuardrailPolicy {
    /// All stages in execution order: input chain then output chain.
    pub fn stages(&self) -> impl Iterator<Item = &StageSpec> {
        self.input_stages.iter().chain(self.output_stages.iter())
    }

    /// Comma-separated entity names as rendered into `{names}`.
    pub fn joined_names(&self) -> String {
        self.targets.entity_names.join(", ")
    }
}

/// Outcome of one filter stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    /// The text may proceed unchanged.
    Pass,
    /// Stop the pipeline and answer with the refusal template.
    Block { reason: String },
    /// Replace the working text for all subsequent stages.
    Rewrite { new_text: String },
}

impl Verdict {
    pub fn block(reason: impl Into<String>) -> Self {
        Verdict::Block {
            reason: reason.into(),
        }
    }

    pub fn rewrite(new_text: impl Into<String>) -> Self {
        Verdict::Rewrite {
            new_text: new_text.into(),
        }
    }

    pub fn is_block(&self) -> bool {
        matches!(self, Verdict::Block { .. })
    }

    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

/// Where the bytes of the final response came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalSource {
    Upstream,
    RefusalTemplate,
    Rewrite,
}

/// One executed stage in a [`DecisionTrace`].
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub stage_id: String,
    pub verdict: Verdict,
    pub elapsed: Duration,
}

/// Auditable end-to-end record of one request through the pipeline.
///
/// Append-only while the request is in flight: stages are recorded in
/// execution order and never removed.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTrace {
    request_id: String,
    entries: Vec<TraceEntry>,
    blocked: bool,
    final_source: FinalSource,
}

impl DecisionTrace {
    pub fn new(request_id: impl Into<String>) -> Self {
        DecisionTrace {
            request_id: request_id.into(),
            entries: Vec::new(),
            blocked: false,
            final_source: FinalSource::Upstream,
        }
    }

    pub fn record(&mut self, stage_id: impl Into<String>, verdict: Verdict, elapsed: Duration) {
        if verdict.is_block() {
            self.blocked = true;
        }
        self.entries.push(TraceEntry {
            stage_id: stage_id.into(),
            verdict,
            elapsed,
        });
    }

    pub fn record_entries(&mut self, entries: Vec<TraceEntry>) {
        for entry in entries {
            if entry.verdict.is_block() {
                self.blocked = true;
            }
            self.entries.push(entry);
        }
    }

    pub fn set_final_source(&mut self, source: FinalSource) {
        self.final_source = source;
    }

    pub fn request_id(&self) -> &str {
        &self.request_id
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn blocked(&self) -> bool {
        self.blocked
    }

    pub fn final_source(&self) -> FinalSource {
        self.final_source
    }
}

/// A single policy invariant violation. Violations are data, not failures:
/// [`validate_policy`] returns all of them at once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// The field or stage the violation names.
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy parse error: {0}")]
    Parse(String),
    #[error("policy validation failed: {}", format_violations(.0))]
    Validation(Vec<Violation>),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(Violation::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Parse and validate a policy document (YAML or JSON).
///
/// Entity names are deduplicated by their normalized form before validation;
/// the first spelling wins. Any remaining invariant violation fails the load.
pub fn load_policy(document: &str) -> Result<GuardrailPolicy, PolicyError> {
    let mut policy: GuardrailPolicy =
        serde_yaml::from_str(document).map_err(|e| PolicyError::Parse(e.to_string()))?;
    dedup_entity_names(&mut policy.targets.entity_names);
    let violations = validate_policy(&policy);
    if violations.is_empty() {
        Ok(policy)
    } else {
        Err(PolicyError::Validation(violations))
    }
}

/// Serialize a policy to its canonical JSON document form.
pub fn serialize_policy(policy: &GuardrailPolicy) -> String {
    serde_json::to_string_pretty(policy).expect("policy serialization cannot fail")
}

fn dedup_entity_names(names: &mut Vec<String>) {
    let mut seen = Vec::new();
    names.retain(|name| {
        let norm = crate::guardrails::normalize_for_match(name);
        if seen.contains(&norm) {
            false
        } else {
            seen.push(norm);
            true
        }
    });
}

/// Check every policy invariant. Returns an empty list iff the policy is
/// valid; violations name the offending field or stage.
pub fn validate_policy(policy: &GuardrailPolicy) -> Vec<Violation> {
    let mut violations = Vec::new();

    if policy.refusal_template.is_empty() {
        violations.push(Violation::new("refusal_template", "refusal_template empty"));
    }
    if policy.input_stages.is_empty() && policy.output_stages.is_empty() {
        violations.push(Violation::new("input_stages", "policy declares no stages"));
    }
    if policy.name_chunk_limit == 0 {
        violations.push(Violation::new("name_chunk_limit", "must be at least 1"));
    }

    validate_targets(&policy.targets, &mut violations);

    let mut seen_ids: Vec<&str> = Vec::new();
    for stage in policy.stages() {
        if seen_ids.contains(&stage.stage_id.as_str()) {
            violations.push(Violation::new(
                format!("stage '{}'", stage.stage_id),
                "duplicate stage_id",
            ));
        } else {
            seen_ids.push(&stage.stage_id);
        }
    }
    for stage in &policy.input_stages {
        if stage.kind.is_output() {
            violations.push(Violation::new(
                format!("stage '{}'", stage.stage_id),
                format!("output stage kind {} not allowed in input_stages", stage.kind),
            ));
        }
    }
    for stage in &policy.output_stages {
        if stage.kind.is_input() {
            violations.push(Violation::new(
                format!("stage '{}'", stage.stage_id),
                format!("input stage kind {} not allowed in output_stages", stage.kind),
            ));
        }
    }
    for stage in policy.stages() {
        validate_stage(stage, &mut violations);
    }

    violations
}

fn validate_targets(targets: &ForgetTarget, violations: &mut Vec<Violation>) {
    if targets.is_empty() {
        violations.push(Violation::new(
            "targets",
            "at least one of entity_names, keywords, topic_description must be non-empty",
        ));
    }
    for (field, entries) in [
        ("targets.entity_names", &targets.entity_names),
        ("targets.keywords", &targets.keywords),
    ] {
        for entry in entries.iter() {
            if crate::guardrails::normalize_for_match(entry).is_empty() {
                violations.push(Violation::new(field, "empty-string entry"));
            }
        }
    }
    let mut seen = Vec::new();
    for name in &targets.entity_names {
        let norm = crate::guardrails::normalize_for_match(name);
        if seen.contains(&norm) {
            violations.push(Violation::new(
                "targets.entity_names",
                format!("duplicate entity name '{name}' after normalization"),
            ));
        } else {
            seen.push(norm);
        }
    }
}

fn validate_stage(stage: &StageSpec, violations: &mut Vec<Violation>) {
    let field = format!("stage '{}'", stage.stage_id);

    if stage.stage_id.is_empty() {
        violations.push(Violation::new("stage", "empty stage_id"));
    }

    match (&stage.prompt_template, stage.kind.uses_template()) {
        (None, true) => violations.push(Violation::new(
            &field,
            format!("kind {} requires prompt_template", stage.kind),
        )),
        (Some(t), true) if t.is_empty() => {
            violations.push(Violation::new(&field, "prompt_template empty"));
        }
        (Some(_), false) => violations.push(Violation::new(
            &field,
            format!("kind {} does not take prompt_template", stage.kind),
        )),
        _ => {}
    }

    match (&stage.second_prompt_template, stage.kind) {
        (None, StageKind::TwoStageMcq) => violations.push(Violation::new(
            &field,
            "two_stage_mcq requires second_prompt_template",
        )),
        (Some(t), StageKind::TwoStageMcq) if t.is_empty() => {
            violations.push(Violation::new(&field, "second_prompt_template empty"));
        }
        (Some(_), kind) if kind != StageKind::TwoStageMcq => violations.push(Violation::new(
            &field,
            "second_prompt_template only allowed on two_stage_mcq",
        )),
        _ => {}
    }

    match (stage.threshold, stage.kind) {
        (None, StageKind::ClassifierInput) => violations.push(Violation::new(
            &field,
            "classifier_input requires threshold",
        )),
        (Some(t), StageKind::ClassifierInput) => {
            if !t.is_finite() || !(0.0..=1.0).contains(&t) {
                violations.push(Violation::new(&field, "threshold must be in [0, 1]"));
            }
        }
        (Some(_), _) => violations.push(Violation::new(
            &field,
            "threshold only allowed on classifier_input",
        )),
        (None, _) => {}
    }

    for template in [&stage.prompt_template, &stage.second_prompt_template]
        .into_iter()
        .flatten()
    {
        validate_template(template, stage, &field, violations);
    }
}

fn validate_template(
    template: &str,
    stage: &StageSpec,
    field: &str,
    violations: &mut Vec<Violation>,
) {
    let allowed: &[&str] = match stage.kind {
        StageKind::PromptPrefix => &["names", "topic"],
        StageKind::JudgeInput | StageKind::TwoStageMcq => &["names", "topic", "question"],
        StageKind::JudgeOutput => &["names", "topic", "answer"],
        _ => &[],
    };
    let found = template::placeholders(template);
    for name in &found {
        if !template::KNOWN_PLACEHOLDERS.contains(name) || !allowed.contains(name) {
            violations.push(Violation::new(
                field,
                format!("unknown placeholder {{{name}}} for kind {}", stage.kind),
            ));
        }
    }
    if stage.kind == StageKind::JudgeOutput && !found.contains(&"names") {
        violations.push(Violation::new(
            field,
            "judge_output template must reference {names}",
        ));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_doc() -> &'static str {
        r#"
policy_id: minimal
targets:
  keywords: ["forbidden"]
refusal_template: "I cannot answer that."
output_stages:
  - stage_id: kw
    kind: keyword_output
"#
    }

    #[test]
    fn loads_minimal_policy() {
        let policy = load_policy(minimal_doc()).unwrap();
        assert_eq!(policy.policy_id, "minimal");
        assert_eq!(policy.output_stages.len(), 1);
        assert_eq!(policy.refusal_template, "I cannot answer that.");
        assert!(policy.input_stages.is_empty());
    }

    #[test]
    fn duplicate_stage_id_names_the_id() {
        let doc = r#"
policy_id: dup
targets: { keywords: ["x"] }
input_stages:
  - { stage_id: same, kind: keyword_input }
  - { stage_id: same, kind: keyword_input }
"#;
        let err = load_policy(doc).unwrap_err();
        match err {
            PolicyError::Validation(violations) => {
                assert!(violations.iter().any(|v| {
                    v.field.contains("same") && v.message.contains("duplicate stage_id")
                }));
            }
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn malformed_document_is_parse_error() {
        let err = load_policy("policy_id: [unclosed").unwrap_err();
        assert!(matches!(err, PolicyError::Parse(_)));
    }

    #[test]
    fn unknown_field_is_parse_error() {
        let doc = r#"
policy_id: typo
targets: { keywords: ["x"] }
output_stages:
  - { stage_id: s, kind: keyword_output, promt_template: "oops" }
"#;
        assert!(matches!(load_policy(doc), Err(PolicyError::Parse(_))));
    }

    #[test]
    fn empty_refusal_template_is_violation() {
        let mut policy = load_policy(minimal_doc()).unwrap();
        policy.refusal_template.clear();
        let violations = validate_policy(&policy);
        assert!(violations
            .iter()
            .any(|v| v.field == "refusal_template" && v.message.contains("empty")));
    }

    #[test]
    fn classifier_without_threshold_names_stage() {
        let mut policy = load_policy(minimal_doc()).unwrap();
        policy
            .input_stages
            .push(StageSpec::new("clf", StageKind::ClassifierInput));
        let violations = validate_policy(&policy);
        assert!(violations
            .iter()
            .any(|v| v.field.contains("clf") && v.message.contains("threshold")));
    }

    #[test]
    fn threshold_outside_unit_interval_rejected() {
        let mut policy = load_policy(minimal_doc()).unwrap();
        policy.input_stages.push(
            StageSpec::new("clf", StageKind::ClassifierInput).with_threshold(1.5),
        );
        let violations = validate_policy(&policy);
        assert!(violations.iter().any(|v| v.message.contains("[0, 1]")));
    }

    #[test]
    fn output_kind_in_input_stages_rejected() {
        let mut policy = load_policy(minimal_doc()).unwrap();
        policy
            .input_stages
            .push(StageSpec::new("bad", StageKind::KeywordOutput));
        let violations = validate_policy(&policy);
        assert!(violations
            .iter()
            .any(|v| v.message.contains("not allowed in input_stages")));
    }

    #[test]
    fn unknown_placeholder_rejected_at_load() {
        let doc = r#"
policy_id: ph
targets: { entity_names: ["Jane Doe"] }
output_stages:
  - stage_id: judge
    kind: judge_output
    prompt_template: "Mentions {names} or {nonsense}?"
"#;
        let err = load_policy(doc).unwrap_err();
        match err {
            PolicyError::Validation(violations) => {
                assert!(violations.iter().any(|v| v.message.contains("{nonsense}")));
            }
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn judge_output_template_must_reference_names() {
        let doc = r#"
policy_id: ph
targets: { entity_names: ["Jane Doe"] }
output_stages:
  - stage_id: judge
    kind: judge_output
    prompt_template: "Any forget content here?"
"#;
        let err = load_policy(doc).unwrap_err();
        assert!(err.to_string().contains("{names}"));
    }

    #[test]
    fn entity_names_deduplicated_after_normalization() {
        let doc = r#"
policy_id: dedup
targets:
  entity_names: ["Jane Doe", "jane   DOE", "John Smith"]
output_stages:
  - { stage_id: kw, kind: keyword_output }
"#;
        let policy = load_policy(doc).unwrap();
        assert_eq!(policy.targets.entity_names, vec!["Jane Doe", "John Smith"]);
    }

    #[test]
    fn empty_targets_rejected() {
        let doc = r#"
policy_id: none
targets: {}
output_stages:
  - { stage_id: kw, kind: keyword_output }
"#;
        let err = load_policy(doc).unwrap_err();
        assert!(err.to_string().contains("at least one"));
    }

    #[test]
    fn json_documents_load_too() {
        let policy = load_policy(
            r#"{"policy_id":"j","targets":{"keywords":["k"]},
                "output_stages":[{"stage_id":"s","kind":"keyword_output"}]}"#,
        )
        .unwrap();
        assert_eq!(policy.policy_id, "j");
    }

    #[test]
    fn load_serialize_round_trip_is_identity() {
        let policy = load_policy(minimal_doc()).unwrap();
        let reloaded = load_policy(&serialize_policy(&policy)).unwrap();
        assert_eq!(policy, reloaded);
    }

    #[test]
    fn trace_blocked_iff_some_entry_blocks() {
        let mut trace = DecisionTrace::new("r1");
        trace.record("a", Verdict::Pass, Duration::ZERO);
        assert!(!trace.blocked());
        trace.record("b", Verdict::block("matched:x"), Duration::ZERO);
        assert!(trace.blocked());
        assert_eq!(trace.entries().len(), 2);
    }
}
