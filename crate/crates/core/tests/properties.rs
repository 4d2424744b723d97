//! Property tests for the policy model, filter operations, and metrics.

mod common;

use proptest::prelude::*;

use common::{oracle_keyword_match, FixedScorer, ScriptedJudge};
use ggate_core::eval::{
    forget_accuracy, normalized_seq_prob, retain_accuracy, truth_ratio, AbstentionDetector,
    QAItem, Split,
};
use ggate_core::guardrails::{
    classifier_verdict, execute_stages, keyword_verdict, parse_yes_no, two_stage_route,
    FilterClients, Route, YesNo,
};
use ggate_core::mock::{MockJudge, MockTable, MockUpstream};
use ggate_core::policy::{
    load_policy, serialize_policy, validate_policy, FailMode, ForgetTarget, GuardrailPolicy,
    StageKind, StageSpec, Verdict,
};
use std::sync::Arc;

fn arb_fail_mode() -> impl Strategy<Value = FailMode> {
    prop_oneof![Just(FailMode::FailOpen), Just(FailMode::FailClosed)]
}

prop_compose! {
    fn arb_targets()(
        names in prop::collection::btree_set("[a-z]{3,8}", 0..4),
        keywords in prop::collection::btree_set("[a-z]{3,8}", 0..4),
        topic in prop::option::of("[a-z]{3,12}"),
    ) -> ForgetTarget {
        let mut targets = ForgetTarget {
            entity_names: names.into_iter().collect(),
            keywords: keywords.into_iter().collect(),
            topic_description: topic.unwrap_or_default(),
        };
        if targets.is_empty() {
            targets.keywords.push("fallback".into());
        }
        targets
    }
}

const INPUT_KINDS: [StageKind; 6] = [
    StageKind::PromptPrefix,
    StageKind::KeywordInput,
    StageKind::JudgeInput,
    StageKind::TwoStageMcq,
    StageKind::ClassifierInput,
    StageKind::ForceIncorrectPrefix,
];
const OUTPUT_KINDS: [StageKind; 2] = [StageKind::KeywordOutput, StageKind::JudgeOutput];

fn build_stage(id: String, kind: StageKind, fail_mode: FailMode, threshold: f64) -> StageSpec {
    let mut stage = StageSpec::new(id, kind).with_fail_mode(fail_mode);
    match kind {
        StageKind::PromptPrefix => stage = stage.with_template("Consider {topic} forgotten."),
        StageKind::JudgeInput => {
            stage = stage.with_template("Is this question acceptable? {question}")
        }
        StageKind::JudgeOutput => {
            stage = stage.with_template("Does this mention {names}? Output one word only.")
        }
        StageKind::TwoStageMcq => {
            stage = stage
                .with_template("Is this on a screened topic?")
                .with_second_template("Is this exam-appropriate? Question:");
        }
        StageKind::ClassifierInput => stage = stage.with_threshold(threshold),
        _ => {}
    }
    stage
}

prop_compose! {
    fn arb_policy()(
        targets in arb_targets(),
        input_picks in prop::collection::vec((0usize..6, arb_fail_mode(), 0f64..=1.0), 0..5),
        output_picks in prop::collection::vec((0usize..2, arb_fail_mode(), 0f64..=1.0), 0..3),
        refusal in "[A-Z][a-z ]{0,18}",
        chunk_limit in 1usize..64,
    ) -> GuardrailPolicy {
        let input_stages: Vec<StageSpec> = input_picks
            .into_iter()
            .enumerate()
            .map(|(i, (kind, fail, threshold))| {
                build_stage(format!("in-{i}"), INPUT_KINDS[kind], fail, threshold)
            })
            .collect();
        let mut output_stages: Vec<StageSpec> = output_picks
            .into_iter()
            .enumerate()
            .map(|(i, (kind, fail, threshold))| {
                build_stage(format!("out-{i}"), OUTPUT_KINDS[kind], fail, threshold)
            })
            .collect();
        if input_stages.is_empty() && output_stages.is_empty() {
            output_stages.push(build_stage(
                "out-fallback".into(),
                StageKind::KeywordOutput,
                FailMode::FailClosed,
                0.5,
            ));
        }
        GuardrailPolicy {
            policy_id: "generated".into(),
            targets,
            input_stages,
            output_stages,
            refusal_template: refusal,
            name_chunk_limit: chunk_limit,
        }
    }
}

proptest! {
    #[test]
    fn generated_policies_validate(policy in arb_policy()) {
        prop_assert!(validate_policy(&policy).is_empty(), "{:?}", validate_policy(&policy));
    }

    /// load_policy after serialize_policy is the identity on valid policies,
    /// and everything load_policy returns passes validate_policy.
    #[test]
    fn load_serialize_round_trip(policy in arb_policy()) {
        let document = serialize_policy(&policy);
        let reloaded = load_policy(&document).expect("serialized policy must load");
        prop_assert_eq!(&reloaded, &policy);
        prop_assert!(validate_policy(&reloaded).is_empty());
    }

    /// Stage order in the loaded policy equals document order, whatever that
    /// order is.
    #[test]
    fn stage_order_preserved(policy in arb_policy()) {
        let document = serialize_policy(&policy);
        let reloaded = load_policy(&document).unwrap();
        let ids = |stages: &[StageSpec]| -> Vec<String> {
            stages.iter().map(|s| s.stage_id.clone()).collect()
        };
        prop_assert_eq!(ids(&reloaded.input_stages), ids(&policy.input_stages));
        prop_assert_eq!(ids(&reloaded.output_stages), ids(&policy.output_stages));
    }

    /// keyword_verdict is deterministic, idempotent, and agrees with a
    /// brute-force scan over all (target, normalized-substring) pairs.
    #[test]
    fn keyword_matches_brute_force_oracle(
        targets in arb_targets(),
        mut text in "[ a-zA-Z]{0,40}",
        plant in prop::option::of((0usize..4, 0usize..8, any::<bool>(), any::<bool>())),
    ) {
        // Optionally plant a case/whitespace-mutated target in the text.
        if let Some((target_idx, position, upper, pad)) = plant {
            let pool: Vec<&String> =
                targets.entity_names.iter().chain(targets.keywords.iter()).collect();
            if !pool.is_empty() {
                let mut planted = pool[target_idx % pool.len()].clone();
                if upper {
                    planted = planted.to_uppercase();
                }
                if pad {
                    planted = format!("  {planted} ");
                }
                let at = position.min(text.len());
                while !text.is_char_boundary(at) { /* ascii text: always a boundary */ }
                text.insert_str(at, &planted);
            }
        }

        let first = keyword_verdict(&text, &targets);
        let second = keyword_verdict(&text, &targets);
        prop_assert_eq!(&first, &second, "determinism");

        match oracle_keyword_match(&text, &targets.entity_names, &targets.keywords) {
            Some(name) => prop_assert_eq!(
                first,
                Verdict::Block { reason: format!("matched:{name}") }
            ),
            None => prop_assert!(first.is_pass()),
        }
    }

    /// Every string maps to exactly one of the three outcomes.
    #[test]
    fn parse_yes_no_is_total(raw in ".*") {
        let outcome = parse_yes_no(&raw);
        prop_assert!(matches!(outcome, YesNo::Yes | YesNo::No | YesNo::Ambiguous));
        prop_assert_eq!(outcome, parse_yes_no(&raw));
    }

    /// The trace never contains entries after the first Block.
    #[test]
    fn chain_short_circuits(
        policy in arb_policy(),
        text in "[ a-z]{0,30}",
        judge_answers in prop::collection::vec("(Yes|No|maybe)", 0..8),
        score in 0f64..=1.0,
    ) {
        let answers: Vec<&str> = judge_answers.iter().map(|s| s.as_str()).collect();
        let judge = ScriptedJudge::new(&answers, "No");
        let scorer = FixedScorer(score);
        let clients = FilterClients { judge: Some(&judge), scorer: Some(&scorer) };

        let outcome = execute_stages(&text, &policy.input_stages, &policy, &clients);
        let blocks: Vec<usize> = outcome
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.verdict.is_block())
            .map(|(i, _)| i)
            .collect();
        if let Some(first_block) = blocks.first() {
            prop_assert_eq!(*first_block, outcome.entries.len() - 1);
            prop_assert!(outcome.blocked());
        } else {
            prop_assert!(!outcome.blocked());
        }
    }

    /// An empty stage list is the identity on text.
    #[test]
    fn empty_chain_is_identity(policy in arb_policy(), text in ".{0,40}") {
        let outcome = execute_stages(&text, &[], &policy, &FilterClients::default());
        prop_assert_eq!(outcome.text, text);
        prop_assert!(outcome.verdict.is_pass());
        prop_assert!(outcome.entries.is_empty());
    }

    /// The routing never forces an incorrect answer when the topic screen
    /// answered No, whatever the second answer or fail mode.
    #[test]
    fn two_stage_never_forces_on_stage1_no(
        stage1_answer in ".{0,12}",
        stage2_answer in ".{0,12}",
        fail_mode in arb_fail_mode(),
    ) {
        let stage = StageSpec::new("ts", StageKind::TwoStageMcq)
            .with_template("Topic screen?")
            .with_second_template("Exam screen?")
            .with_fail_mode(fail_mode);
        let judge = ScriptedJudge::new(&[&stage1_answer, &stage2_answer], "No");
        let route = two_stage_route("question", &judge, &stage);
        if parse_yes_no(&stage1_answer) != YesNo::Yes {
            prop_assert_eq!(route, Route::Normal);
        }
        if parse_yes_no(&stage1_answer) == YesNo::Yes
            && parse_yes_no(&stage2_answer) == YesNo::No
        {
            prop_assert_eq!(route, Route::ForceIncorrect);
        }
    }

    /// Threshold zero always blocks, and raising the threshold never turns
    /// a Pass into a Block.
    #[test]
    fn classifier_monotone_in_threshold(
        score in 0f64..=1.0,
        low in 0f64..=1.0,
        high in 0f64..=1.0,
    ) {
        let scorer = FixedScorer(score);
        prop_assert!(classifier_verdict("text", &scorer, 0.0).unwrap().is_block());

        let (low, high) = if low <= high { (low, high) } else { (high, low) };
        let at_low = classifier_verdict("text", &scorer, low).unwrap();
        let at_high = classifier_verdict("text", &scorer, high).unwrap();
        if at_low.is_pass() {
            prop_assert!(at_high.is_pass());
        }
    }

    /// exp(mean of logprobs) equals the brute-force (prod p_i)^(1/n) within
    /// 1e-12.
    #[test]
    fn normalized_seq_prob_matches_brute_force(
        probs in prop::collection::vec(1e-6f64..=1.0, 1..=20),
    ) {
        let logprobs: Vec<f64> = probs.iter().map(|p| p.ln().min(0.0)).collect();
        let scored = ggate_core::upstream::ScoredSequence::new("p", "c", logprobs).unwrap();
        let fast = normalized_seq_prob(&scored);

        let product: f64 = scored.token_logprobs.iter().map(|lp| lp.exp()).product();
        let brute = product.powf(1.0 / scored.token_logprobs.len() as f64);
        prop_assert!((fast - brute).abs() <= 1e-12, "fast={fast} brute={brute}");
    }

    /// Scaling every probability by c > 0 leaves the truth ratio unchanged.
    #[test]
    fn truth_ratio_scale_consistent(
        perturbed in prop::collection::vec(0.05f64..=0.95, 1..5),
        paraphrase in 0.05f64..=0.95,
        scale in 0.05f64..=1.0,
    ) {
        let build = |factor: f64| -> (QAItem, MockUpstream) {
            let mut table = MockTable::new();
            let mut names = Vec::new();
            for (i, p) in perturbed.iter().enumerate() {
                let name = format!("wrong-{i}");
                table.add_score("q", &name, vec![(p * factor).ln()]).unwrap();
                names.push(name);
            }
            table.add_score("q", "para", vec![(paraphrase * factor).ln()]).unwrap();
            let item = QAItem {
                question: "q".into(),
                answer: "gold".into(),
                paraphrased_answer: "para".into(),
                perturbed_answers: names,
                split: Split::Forget,
                entities: vec![],
            };
            (item, MockUpstream::new(Arc::new(table)))
        };

        let (item, upstream) = build(1.0);
        let base = truth_ratio(&item, &upstream, None).unwrap().defined().unwrap();
        let (item, upstream) = build(scale);
        let scaled = truth_ratio(&item, &upstream, None).unwrap().defined().unwrap();
        prop_assert!(
            (base - scaled).abs() <= 1e-9 * base.abs().max(1.0),
            "base={base} scaled={scaled}"
        );
    }

    /// Accuracy aggregation is order-independent.
    #[test]
    fn accuracy_is_permutation_invariant(
        outcomes in prop::collection::vec((any::<bool>(), any::<bool>()), 1..30).prop_shuffle(),
    ) {
        let detector = AbstentionDetector::exact("REFUSED");
        let make = |split: Split, pairs: &[(bool, bool)]| -> Vec<(QAItem, String)> {
            pairs
                .iter()
                .enumerate()
                .map(|(i, (hit, _))| {
                    let item = QAItem {
                        question: format!("q{i}"),
                        answer: "gold".into(),
                        paraphrased_answer: String::new(),
                        perturbed_answers: vec![],
                        split,
                        entities: vec![],
                    };
                    let response = match (split, hit) {
                        (Split::Forget, true) => "REFUSED".to_string(),
                        (Split::Forget, false) => "some answer".to_string(),
                        (Split::Retain, true) => "gold".to_string(),
                        (Split::Retain, false) => "off".to_string(),
                    };
                    (item, response)
                })
                .collect()
        };

        for split in [Split::Forget, Split::Retain] {
            let pairs = make(split, &outcomes);
            let mut reversed = pairs.clone();
            reversed.reverse();
            let accuracy = |results: &[(QAItem, String)]| match split {
                Split::Forget => forget_accuracy(results, &detector).unwrap(),
                Split::Retain => retain_accuracy(results).unwrap(),
            };
            prop_assert_eq!(accuracy(&pairs), accuracy(&reversed));
        }
    }

    /// Familiarity's mean lies within the min and max of the parsed scores.
    #[test]
    fn familiarity_mean_bounded(scores in prop::collection::vec(0u8..=5, 1..12)) {
        let answers: Vec<String> = scores.iter().map(|s| format!("Score: {s}")).collect();
        let answer_refs: Vec<&str> = answers.iter().map(|s| s.as_str()).collect();
        let judge = ScriptedJudge::new(&answer_refs, "unparseable");
        let pairs: Vec<(String, String)> = scores
            .iter()
            .enumerate()
            .map(|(i, _)| (format!("p{i}"), format!("c{i}")))
            .collect();
        let summary = ggate_core::eval::familiarity(
            &pairs,
            &judge,
            "Rate 0-5. Prompt: {prompt} Completion: {completion}",
        )
        .unwrap();
        let min = *scores.iter().min().unwrap() as f64;
        let max = *scores.iter().max().unwrap() as f64;
        prop_assert!(summary.mean >= min && summary.mean <= max);
        prop_assert_eq!(summary.parsed_count, scores.len());
    }
}

/// Judge stages with a table-driven judge: Blocks exactly when a rule keyed
/// on the rendered prompt fires Yes.
#[test]
fn judge_chain_smoke_with_mock_table() {
    let policy = load_policy(
        r#"
policy_id: smoke
targets: { entity_names: ["Jane Doe"] }
output_stages:
  - stage_id: judge
    kind: judge_output
    prompt_template: "Does the following contain information about any of these people: {names}? Output yes or no. Output one word only."
"#,
    )
    .unwrap();
    let mut table = MockTable::new();
    table.add_judge_rule(vec!["Jane Doe's novels".into()], "Yes");
    let judge = MockJudge::new(Arc::new(table));
    let clients = FilterClients {
        judge: Some(&judge),
        scorer: None,
    };

    let hit = execute_stages(
        "A summary of Jane Doe's novels.",
        &policy.output_stages,
        &policy,
        &clients,
    );
    assert!(hit.blocked());

    let miss = execute_stages(
        "A summary of somebody else.",
        &policy.output_stages,
        &policy,
        &clients,
    );
    assert!(!miss.blocked());
}
