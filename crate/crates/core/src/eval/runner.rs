//! Batch evaluation: drive every dataset item through the gateway pipeline,
//! compute all applicable metrics, and assemble the report.
//!
//! Items may be evaluated concurrently; aggregation always works over the
//! item-index-sorted result list, so reports are deterministic regardless of
//! completion order.

use thiserror::Error;

use super::dataset::{FormatError, MCQItem, QAItem, Split};
use super::metrics::{
    familiarity, forget_accuracy, mcq_accuracy, parse_mcq_letter, render_mcq, retain_accuracy,
    truth_ratio, AbstentionDetector, MetricError, OutputPipeline, TruthRatioValue,
};
use super::report::{EvalReport, ItemResult, SplitMetrics, TruthRatioSummary};
use crate::gateway::{handle_chat, GatewayError, PipelineClients};
use crate::policy::GuardrailPolicy;
use crate::upstream::ChatRequest;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// The items to evaluate.
#[derive(Debug, Clone)]
pub enum EvalDataset {
    Qa(Vec<QAItem>),
    Mcq(Vec<MCQItem>),
}

impl EvalDataset {
    pub fn len(&self) -> usize {
        match self {
            EvalDataset::Qa(items) => items.len(),
            EvalDataset::Mcq(items) => items.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Run configuration.
#[derive(Debug, Clone)]
pub struct EvalFlags {
    /// Zero out probabilities of continuations the output chain would block.
    pub pipeline_aware_truth_ratio: bool,
    /// Number of worker threads driving items; 1 evaluates sequentially.
    pub parallelism: usize,
    /// Extra refusal phrases for abstention detection on prefix-only
    /// policies.
    pub refusal_phrases: Vec<String>,
    /// Familiarity rubric with `{prompt}` and `{completion}` placeholders;
    /// familiarity is skipped when absent.
    pub rubric_template: Option<String>,
    /// Upstream identity recorded in the report metadata.
    pub upstream_label: String,
}

impl Default for EvalFlags {
    fn default() -> Self {
        EvalFlags {
            pipeline_aware_truth_ratio: false,
            parallelism: 1,
            refusal_phrases: Vec::new(),
            rubric_template: None,
            upstream_label: "unspecified".into(),
        }
    }
}

struct ItemOutcome {
    index: usize,
    response: String,
    blocked: bool,
    truth_ratio: Option<Result<TruthRatioValue, String>>,
    scoring_unsupported: bool,
    error: Option<String>,
}

/// Evaluate the dataset under the policy and return the full report.
pub fn run_eval(
    dataset: &EvalDataset,
    policy: &GuardrailPolicy,
    clients: &PipelineClients,
    flags: &EvalFlags,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }

    let mut report = EvalReport {
        policy_id: policy.policy_id.clone(),
        upstream: flags.upstream_label.clone(),
        timestamp: chrono::Utc::now().to_rfc3339(),
        forget: None,
        retain: None,
        familiarity: None,
        mcq: None,
        notes: Vec::new(),
        items: Vec::new(),
    };

    match dataset {
        EvalDataset::Qa(items) => run_qa(items, policy, clients, flags, &mut report)?,
        EvalDataset::Mcq(items) => run_mcq(items, policy, clients, flags, &mut report)?,
    }
    Ok(report)
}

fn drive(
    question: &str,
    policy: &GuardrailPolicy,
    clients: &PipelineClients,
) -> (String, bool, Option<String>) {
    match handle_chat(&ChatRequest::user(question), policy, clients) {
        Ok(outcome) => (outcome.response.content, outcome.trace.blocked(), None),
        Err(GatewayError::Upstream { source, trace }) => {
            (String::new(), trace.blocked(), Some(source.to_string()))
        }
        Err(err) => (String::new(), false, Some(err.to_string())),
    }
}

/// Evaluate items with `worker_count` threads, then return outcomes sorted
/// by item index.
fn evaluate_indexed<F>(count: usize, parallelism: usize, eval_one: F) -> Vec<ItemOutcome>
where
    F: Fn(usize) -> ItemOutcome + Sync,
{
    let workers = parallelism.max(1).min(count);
    let mut outcomes: Vec<ItemOutcome> = if workers <= 1 {
        (0..count).map(&eval_one).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let eval_one = &eval_one;
                    scope.spawn(move || {
                        (w..count)
                            .step_by(workers)
                            .map(eval_one)
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("eval worker panicked"))
                .collect()
        })
    };
    outcomes.sort_by_key(|o| o.index);
    outcomes
}

fn run_qa(
    items: &[QAItem],
    policy: &GuardrailPolicy,
    clients: &PipelineClients,
    flags: &EvalFlags,
    report: &mut EvalReport,
) -> Result<(), EvalError> {
    let pipeline = OutputPipeline::new(policy, clients.filters());
    let pipeline_ref = flags.pipeline_aware_truth_ratio.then_some(&pipeline);

    let outcomes = evaluate_indexed(items.len(), flags.parallelism, |index| {
        let item = &items[index];
        let (response, blocked, error) = drive(&item.question, policy, clients);
        let (tr, scoring_unsupported) = if item.supports_truth_ratio() {
            match truth_ratio(item, clients.upstream, pipeline_ref) {
                Ok(value) => (Some(Ok(value)), false),
                Err(err) => (Some(Err(err.to_string())), err.is_scoring_unsupported()),
            }
        } else {
            (None, false)
        };
        ItemOutcome {
            index,
            response,
            blocked,
            truth_ratio: tr,
            scoring_unsupported,
            error,
        }
    });

    let scoring_unsupported = outcomes.iter().any(|o| o.scoring_unsupported);
    if scoring_unsupported {
        report.notes.push(
            "truth_ratio unavailable: upstream does not support sequence scoring".into(),
        );
    }

    let detector =
        AbstentionDetector::for_policy(policy).with_phrases(flags.refusal_phrases.clone());

    let mut forget_pairs: Vec<(QAItem, String)> = Vec::new();
    let mut retain_pairs: Vec<(QAItem, String)> = Vec::new();
    let mut forget_tr: Vec<TruthRatioValue> = Vec::new();
    let mut retain_tr: Vec<TruthRatioValue> = Vec::new();

    for outcome in &outcomes {
        let item = &items[outcome.index];
        let tr_value = match (&outcome.truth_ratio, scoring_unsupported) {
            (Some(Ok(value)), _) => Some(*value),
            _ => None,
        };
        let abstained = (item.split == Split::Forget)
            .then(|| detector.is_abstention(&outcome.response));
        let correct = (item.split == Split::Retain)
            .then(|| outcome.response.trim_end() == item.answer.trim_end());

        report.items.push(ItemResult {
            index: outcome.index,
            split: Some(item.split),
            set_name: None,
            question: item.question.clone(),
            response: outcome.response.clone(),
            blocked: outcome.blocked,
            abstained,
            correct,
            truth_ratio: tr_value,
            familiarity: None,
            error: outcome.error.clone().or_else(|| {
                match (&outcome.truth_ratio, scoring_unsupported) {
                    (Some(Err(message)), false) => Some(message.clone()),
                    _ => None,
                }
            }),
        });

        match item.split {
            Split::Forget => {
                forget_pairs.push((item.clone(), outcome.response.clone()));
                if let Some(value) = tr_value {
                    forget_tr.push(value);
                }
            }
            Split::Retain => {
                retain_pairs.push((item.clone(), outcome.response.clone()));
                if let Some(value) = tr_value {
                    retain_tr.push(value);
                }
            }
        }
    }

    report.forget = split_metrics(&forget_pairs, &forget_tr, |pairs| {
        forget_accuracy(pairs, &detector)
    });
    report.retain = split_metrics(&retain_pairs, &retain_tr, retain_accuracy);

    if let Some(rubric) = &flags.rubric_template {
        match clients.judge {
            Some(judge) => {
                let pairs: Vec<(String, String)> = outcomes
                    .iter()
                    .map(|o| (items[o.index].question.clone(), o.response.clone()))
                    .collect();
                report.familiarity = Some(familiarity(&pairs, judge, rubric)?);
            }
            None => report
                .notes
                .push("familiarity skipped: no judge client configured".into()),
        }
    }
    Ok(())
}

fn split_metrics(
    pairs: &[(QAItem, String)],
    tr_values: &[TruthRatioValue],
    accuracy: impl Fn(&[(QAItem, String)]) -> Result<f64, MetricError>,
) -> Option<SplitMetrics> {
    if pairs.is_empty() {
        return None;
    }
    Some(SplitMetrics {
        item_count: pairs.len(),
        accuracy: accuracy(pairs).ok(),
        truth_ratio: (!tr_values.is_empty())
            .then(|| TruthRatioSummary::from_values(tr_values.iter())),
    })
}

fn run_mcq(
    items: &[MCQItem],
    policy: &GuardrailPolicy,
    clients: &PipelineClients,
    flags: &EvalFlags,
    report: &mut EvalReport,
) -> Result<(), EvalError> {
    let outcomes = evaluate_indexed(items.len(), flags.parallelism, |index| {
        let rendered = render_mcq(&items[index]);
        let (response, blocked, error) = drive(&rendered, policy, clients);
        ItemOutcome {
            index,
            response,
            blocked,
            truth_ratio: None,
            scoring_unsupported: false,
            error,
        }
    });

    let mut pairs: Vec<(MCQItem, String)> = Vec::new();
    for outcome in &outcomes {
        let item = &items[outcome.index];
        let correct = parse_mcq_letter(&outcome.response) == Some(item.answer_index);
        report.items.push(ItemResult {
            index: outcome.index,
            split: None,
            set_name: Some(item.set_name.clone()),
            question: item.question.clone(),
            response: outcome.response.clone(),
            blocked: outcome.blocked,
            abstained: None,
            correct: Some(correct),
            truth_ratio: None,
            familiarity: None,
            error: outcome.error.clone(),
        });
        pairs.push((item.clone(), outcome.response.clone()));
    }
    report.mcq = Some(mcq_accuracy(&pairs));
    Ok(())
}
