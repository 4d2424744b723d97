//! Evaluation report: per-split aggregates with undefined-value accounting,
//! per-item results, and emitters for JSON, markdown, and CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::dataset::Split;
use super::metrics::{FamiliaritySummary, SetAccuracy, TruthRatioValue};

/// Truth-ratio aggregate: the mean is over defined items only, and the
/// undefined count is reported rather than imputed, so the metric's failure
/// mode stays visible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRatioSummary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_defined: Option<f64>,
    pub defined_count: usize,
    pub undefined_count: usize,
}

impl TruthRatioSummary {
    pub fn from_values<'a>(values: impl Iterator<Item = &'a TruthRatioValue>) -> Self {
        let mut defined = Vec::new();
        let mut undefined_count = 0usize;
        for value in values {
            match value {
                TruthRatioValue::Defined(v) => defined.push(*v),
                TruthRatioValue::Undefined => undefined_count += 1,
            }
        }
        let mean_defined = if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        };
        TruthRatioSummary {
            mean_defined,
            defined_count: defined.len(),
            undefined_count,
        }
    }
}

/// Aggregates for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub item_count: usize,
    /// Abstention fraction on the forget split, exact-match fraction on the
    /// retain split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_ratio: Option<TruthRatioSummary>,
}

/// Result of one evaluated item, persisted alongside the aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub set_name: Option<String>,
    pub question: String,
    pub response: String,
    pub blocked: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstained: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_ratio: Option<TruthRatioValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub familiarity: Option<u8>,
    /// Pipeline error for this item, if any; failed items are recorded, not
    /// silently dropped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Full evaluation report with run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy_id: String,
    pub upstream: String,
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forget: Option<SplitMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retain: Option<SplitMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub familiarity: Option<FamiliaritySummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcq: Option<BTreeMap<String, SetAccuracy>>,
    #[serde(default)]
    pub notes: Vec<String>,
    pub items: Vec<ItemResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

/// Render the report. JSON is full fidelity and round-trips through
/// [`parse_report_json`]; markdown lays splits out as rows with metrics as
/// columns; CSV emits one row per (split, metric).
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).expect("report serialization cannot fail")
        }
        ReportFormat::Markdown => emit_markdown(report),
        ReportFormat::Csv => emit_csv(report),
    }
}

pub fn parse_report_json(text: &str) -> Result<EvalReport, serde_json::Error> {
    serde_json::from_str(text)
}

fn fmt_opt(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None => "-".into(),
    }
}

fn emit_markdown(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Evaluation report: {}", report.policy_id);
    let _ = writeln!(out);
    let _ = writeln!(out, "- upstream: {}", report.upstream);
    let _ = writeln!(out, "- timestamp: {}", report.timestamp);
    for note in &report.notes {
        let _ = writeln!(out, "- note: {note}");
    }
    let _ = writeln!(out);

    if report.forget.is_some() || report.retain.is_some() {
        let _ = writeln!(
            out,
            "| Split | Items | Accuracy | Truth ratio (mean) | Truth ratio undefined |"
        );
        let _ = writeln!(out, "|---|---|---|---|---|");
        for (name, metrics) in [("forget", &report.forget), ("retain", &report.retain)] {
            if let Some(m) = metrics {
                let (tr_mean, tr_undef) = match &m.truth_ratio {
                    Some(tr) => (fmt_opt(tr.mean_defined), tr.undefined_count.to_string()),
                    None => ("-".into(), "-".into()),
                };
                let _ = writeln!(
                    out,
                    "| {name} | {} | {} | {tr_mean} | {tr_undef} |",
                    m.item_count,
                    fmt_opt(m.accuracy),
                );
            }
        }
        let _ = writeln!(out);
    }

    if let Some(familiarity) = &report.familiarity {
        let _ = writeln!(
            out,
            "Familiarity: {:.4} (parsed {}, unparsed {})",
            familiarity.mean, familiarity.parsed_count, familiarity.unparsed_count
        );
        let _ = writeln!(out);
    }

    if let Some(mcq) = &report.mcq {
        let _ = writeln!(out, "| Question set | Items | Accuracy |");
        let _ = writeln!(out, "|---|---|---|");
        for (set, acc) in mcq {
            let _ = writeln!(out, "| {set} | {} | {:.4} |", acc.total, acc.accuracy);
        }
        let _ = writeln!(out);
    }
    out
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn emit_csv(report: &EvalReport) -> String {
    let mut rows: Vec<(String, String, String)> = Vec::new();
    for (name, metrics) in [("forget", &report.forget), ("retain", &report.retain)] {
        if let Some(m) = metrics {
            rows.push((name.into(), "item_count".into(), m.item_count.to_string()));
            if let Some(acc) = m.accuracy {
                rows.push((name.into(), "accuracy".into(), format!("{acc}")));
            }
            if let Some(tr) = &m.truth_ratio {
                rows.push((
                    name.into(),
                    "truth_ratio_mean".into(),
                    tr.mean_defined.map_or("undefined".into(), |v| format!("{v}")),
                ));
                rows.push((
                    name.into(),
                    "truth_ratio_undefined_count".into(),
                    tr.undefined_count.to_string(),
                ));
            }
        }
    }
    if let Some(familiarity) = &report.familiarity {
        rows.push((
            "all".into(),
            "familiarity_mean".into(),
            format!("{}", familiarity.mean),
        ));
    }
    if let Some(mcq) = &report.mcq {
        for (set, acc) in mcq {
            rows.push((set.clone(), "mcq_accuracy".into(), format!("{}", acc.accuracy)));
        }
    }

    let mut out = String::from("split,metric,value\n");
    for (split, metric, value) in rows {
        let _ = writeln!(
            out,
            "{},{},{}",
            csv_escape(&split),
            csv_escape(&metric),
            csv_escape(&value)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> EvalReport {
        EvalReport {
            policy_id: "p".into(),
            upstream: "mock".into(),
            timestamp: "2024-01-01T00:00:00Z".into(),
            forget: Some(SplitMetrics {
                item_count: 10,
                accuracy: Some(0.94),
                truth_ratio: Some(TruthRatioSummary {
                    mean_defined: Some(1.5),
                    defined_count: 7,
                    undefined_count: 3,
                }),
            }),
            retain: Some(SplitMetrics {
                item_count: 4,
                accuracy: Some(1.0),
                truth_ratio: None,
            }),
            familiarity: None,
            mcq: None,
            notes: vec!["scoring via mock".into()],
            items: vec![ItemResult {
                index: 0,
                split: Some(Split::Forget),
                set_name: None,
                question: "q".into(),
                response: "r".into(),
                blocked: true,
                abstained: Some(true),
                correct: None,
                truth_ratio: Some(TruthRatioValue::Undefined),
                familiarity: None,
                error: None,
            }],
        }
    }

    #[test]
    fn json_round_trips() {
        let report = sample_report();
        let json = emit_report(&report, ReportFormat::Json);
        let parsed = parse_report_json(&json).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn undefined_serialized_as_string_sentinel() {
        let json = emit_report(&sample_report(), ReportFormat::Json);
        assert!(json.contains("\"undefined\""));
        assert!(!json.contains("null"));
    }

    #[test]
    fn markdown_has_split_rows() {
        let md = emit_report(&sample_report(), ReportFormat::Markdown);
        assert!(md.contains("| Split | Items | Accuracy |"));
        assert!(md.contains("| forget | 10 | 0.9400 | 1.5000 | 3 |"));
        assert!(md.contains("| retain | 4 | 1.0000 | - | - |"));
    }

    #[test]
    fn csv_one_row_per_split_metric() {
        let csv = emit_report(&sample_report(), ReportFormat::Csv);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "split,metric,value");
        assert!(lines.contains(&"forget,accuracy,0.94"));
        assert!(lines.contains(&"forget,truth_ratio_undefined_count,3"));
        assert!(lines.contains(&"retain,accuracy,1"));
    }

    #[test]
    fn truth_ratio_summary_counts() {
        let values = [
            TruthRatioValue::Defined(1.0),
            TruthRatioValue::Undefined,
            TruthRatioValue::Defined(3.0),
        ];
        let summary = TruthRatioSummary::from_values(values.iter());
        assert_eq!(summary.defined_count, 2);
        assert_eq!(summary.undefined_count, 1);
        assert_eq!(summary.mean_defined, Some(2.0));
    }
}
