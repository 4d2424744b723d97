//! Evaluation harness: dataset loading, unlearning metrics, batch runs
//! through the gateway pipeline, and report emission.

pub mod dataset;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod synthetic;

pub use dataset::{
    load_mcq_dataset, load_qa_dataset, parse_mcq_records, parse_qa_records, FormatError, MCQItem,
    QAItem, Split,
};
pub use metrics::{
    familiarity, forget_accuracy, mcq_accuracy, normalized_seq_prob, parse_familiarity_score,
    parse_mcq_letter, render_mcq, retain_accuracy, truth_ratio, AbstentionDetector,
    FamiliaritySummary, MetricError, OutputPipeline, SetAccuracy, TruthRatioValue,
};
pub use report::{
    emit_report, parse_report_json, EvalReport, ItemResult, ReportFormat, SplitMetrics,
    TruthRatioSummary,
};
pub use runner::{run_eval, EvalDataset, EvalError, EvalFlags};
