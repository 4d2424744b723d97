//! `ggate`: serve the guardrail gateway, run evaluations, or host the
//! deterministic mock upstream.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ggate_core::eval::{
    emit_report, load_mcq_dataset, load_qa_dataset, run_eval, EvalDataset, EvalFlags,
    ReportFormat,
};
use ggate_core::gateway::{FileAuditSink, PipelineClients};
use ggate_core::mock::MockTable;
use ggate_core::policy::{load_policy, GuardrailPolicy};
use ggate_core::upstream::{ChatJudge, HttpScorer, HttpUpstream};
use ggate_server::{serve_gateway, serve_mock, GatewayState};

#[derive(Parser)]
#[command(name = "ggate", version, about = "Policy-driven unlearning guardrail gateway")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the gateway: input filters, upstream call, output filters,
    /// audit log.
    Serve(ServeArgs),
    /// Evaluate a dataset through the pipeline and write a metrics report.
    Eval(EvalArgs),
    /// Serve the deterministic mock upstream from a table file.
    Mock(MockArgs),
}

#[derive(Args)]
struct ServeArgs {
    /// Policy document (YAML or JSON).
    #[arg(long)]
    policy: PathBuf,
    /// Base URL of the guarded chat-completion upstream.
    #[arg(long)]
    upstream_url: String,
    /// Base URL of the judge model endpoint (chat-completions protocol).
    #[arg(long)]
    judge_url: Option<String>,
    /// Base URL of the classifier scorer endpoint.
    #[arg(long)]
    scorer_url: Option<String>,
    /// Address to listen on, e.g. 127.0.0.1:8080.
    #[arg(long)]
    listen: SocketAddr,
    /// Append-only audit log path (line-delimited JSON).
    #[arg(long)]
    audit: PathBuf,
    /// Model name sent to the upstream when the client omits one.
    #[arg(long, default_value = "default")]
    upstream_model: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset file (line-delimited JSON records).
    #[arg(long)]
    dataset: PathBuf,
    /// Record kind in the dataset file.
    #[arg(long, value_enum)]
    kind: DatasetKind,
    /// Policy document (YAML or JSON).
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    upstream_url: String,
    #[arg(long)]
    judge_url: Option<String>,
    #[arg(long)]
    scorer_url: Option<String>,
    /// Zero out probabilities of continuations the output chain would block.
    #[arg(long)]
    pipeline_aware_truth_ratio: bool,
    /// Worker threads driving items.
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    /// Report output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: OutputFormat,
    /// Familiarity rubric file with {prompt} and {completion} placeholders.
    #[arg(long)]
    rubric: Option<PathBuf>,
    /// Extra abstention phrase for prefix-only policies; repeatable.
    #[arg(long = "refusal-phrase")]
    refusal_phrases: Vec<String>,
    #[arg(long, default_value = "default")]
    upstream_model: String,
}

#[derive(Args)]
struct MockArgs {
    /// Mock table file (line-delimited JSON records).
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    listen: SocketAddr,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Qa,
    Mcq,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Json,
    Markdown,
    Csv,
}

impl From<OutputFormat> for ReportFormat {
    fn from(format: OutputFormat) -> Self {
        match format {
            OutputFormat::Json => ReportFormat::Json,
            OutputFormat::Markdown => ReportFormat::Markdown,
            OutputFormat::Csv => ReportFormat::Csv,
        }
    }
}

fn read_policy(path: &PathBuf) -> Result<GuardrailPolicy> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading policy file {}", path.display()))?;
    load_policy(&text).with_context(|| format!("loading policy {}", path.display()))
}

fn main() -> Result<()> {
    tracing_subscriber::fmt::init();
    match Cli::parse().command {
        Command::Serve(args) => serve(args),
        Command::Eval(args) => eval(args),
        Command::Mock(args) => mock(args),
    }
}

fn serve(args: ServeArgs) -> Result<()> {
    let policy = read_policy(&args.policy)?;
    let audit = FileAuditSink::open(&args.audit)
        .with_context(|| format!("opening audit log {}", args.audit.display()))?;

    let state = Arc::new(GatewayState {
        policy: Arc::new(policy),
        upstream: Arc::new(HttpUpstream::new(&args.upstream_url, &args.upstream_model)),
        judge: args
            .judge_url
            .as_deref()
            .map(|url| -> Arc<dyn ggate_core::guardrails::JudgeClient> {
                Arc::new(ChatJudge::new(HttpUpstream::new(url, "judge")))
            }),
        scorer: args
            .scorer_url
            .as_deref()
            .map(|url| -> Arc<dyn ggate_core::guardrails::ScorerClient> {
                Arc::new(HttpScorer::new(url))
            }),
        audit: Arc::new(audit),
    });

    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(args.listen).await?;
        eprintln!("gateway listening on {}", args.listen);
        serve_gateway(listener, state).await
    })?;
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let policy = read_policy(&args.policy)?;
    let dataset = match args.kind {
        DatasetKind::Qa => EvalDataset::Qa(
            load_qa_dataset(&args.dataset)
                .with_context(|| format!("loading dataset {}", args.dataset.display()))?,
        ),
        DatasetKind::Mcq => EvalDataset::Mcq(
            load_mcq_dataset(&args.dataset)
                .with_context(|| format!("loading dataset {}", args.dataset.display()))?,
        ),
    };
    if dataset.is_empty() {
        bail!("dataset {} has no records", args.dataset.display());
    }

    let upstream = HttpUpstream::new(&args.upstream_url, &args.upstream_model);
    let judge = args
        .judge_url
        .as_deref()
        .map(|url| ChatJudge::new(HttpUpstream::with_timeout(url, "judge", Duration::from_secs(120))));
    let scorer = args.scorer_url.as_deref().map(HttpScorer::new);

    let mut clients = PipelineClients::new(&upstream);
    if let Some(judge) = &judge {
        clients = clients.with_judge(judge);
    }
    if let Some(scorer) = &scorer {
        clients = clients.with_scorer(scorer);
    }

    let rubric_template = match &args.rubric {
        Some(path) => Some(
            std::fs::read_to_string(path)
                .with_context(|| format!("reading rubric {}", path.display()))?,
        ),
        None => None,
    };

    let flags = EvalFlags {
        pipeline_aware_truth_ratio: args.pipeline_aware_truth_ratio,
        parallelism: args.parallelism,
        refusal_phrases: args.refusal_phrases.clone(),
        rubric_template,
        upstream_label: args.upstream_url.clone(),
    };

    let report = run_eval(&dataset, &policy, &clients, &flags)?;
    let rendered = emit_report(&report, args.format.into());
    std::fs::write(&args.out, &rendered)
        .with_context(|| format!("writing report {}", args.out.display()))?;
    // Human-readable summary on stdout regardless of the file format.
    print!("{}", emit_report(&report, ReportFormat::Markdown));
    eprintln!("report written to {}", args.out.display());
    Ok(())
}

fn mock(args: MockArgs) -> Result<()> {
    let table = MockTable::load(&args.table)
        .with_context(|| format!("loading mock table {}", args.table.display()))?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(args.listen).await?;
        eprintln!("mock upstream listening on {}", args.listen);
        serve_mock(listener, Arc::new(table)).await
    })?;
    Ok(())
}
