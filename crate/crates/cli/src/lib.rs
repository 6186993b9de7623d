//! Command-line front end for `consistok`.
//!
//! [`run`] parses arguments, executes one subcommand and returns the process
//! exit code: 0 success, 1 usage error, 2 data error, 3 I/O error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::Serialize;

use consistok::align::{codepoint_span_to_byte_span, TokenSpan};
use consistok::consist::{
    analyze_dataset, answer_variants, check_consistency, fix_dataset, fix_example, AnalyzeOptions,
    AnswerPolicy, FixError, FixSummary,
};
use consistok::metrics::{evaluate, paired_significance, MetricsReport, SignificanceResult};
use consistok::mrqa::{
    open_dataset, read_predictions, FixedDatasetWriter, PredictionError, ReadError, ReadOptions,
};
use consistok::{par, ConsistencyStats, ExtractiveExample, PredictionSet, SpanConvention, Tokenizer};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_IO: i32 = 3;

const MAX_LISTED_WARNINGS: usize = 20;

#[derive(Debug, Parser)]
#[command(name = "consistok", version, about = "Tokenization consistency analysis and repair for extractive QA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Measure how often gold answers are inconsistently tokenized.
    Analyze(CommonArgs),
    /// Write a copy of a dataset with consistent target token ids.
    Fix(CommonArgs),
    /// Score prediction files (EM, F1, out-of-context rate).
    Evaluate(CommonArgs),
    /// Show the tokenization trace for one question.
    Inspect(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Tokenizer vocabulary (vocab.json).
    #[arg(long, value_name = "PATH")]
    vocab: Option<PathBuf>,
    /// Tokenizer merge rules (merges.txt).
    #[arg(long, value_name = "PATH")]
    merges: Option<PathBuf>,
    /// MRQA dataset, plain or gzipped JSONL. Repeatable for analyze.
    #[arg(long = "dataset", value_name = "PATH")]
    datasets: Vec<PathBuf>,
    /// SQuAD-style predictions file. Give two to test significance.
    #[arg(long = "predictions", value_name = "PATH")]
    predictions: Vec<PathBuf>,
    /// Report destination (repaired dataset for fix). Defaults to stdout.
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Analyze a uniform random sample of N questions per dataset.
    #[arg(long = "sample", value_name = "N")]
    sample: Option<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PolicyArg::First)]
    answer_policy: PolicyArg,
    /// Input compression; auto sniffs the gzip magic bytes.
    #[arg(long, value_enum, default_value_t = GzipArg::Auto)]
    gzip: GzipArg,
    /// Whether MRQA char_spans end indices are inclusive.
    #[arg(long, value_enum, default_value_t = ConventionArg::Inclusive)]
    span_convention: ConventionArg,
    /// Worker threads. Defaults to the available parallelism.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Question id to trace (inspect only).
    #[arg(long)]
    qid: Option<String>,
    /// Sign-flip resamples for the significance test.
    #[arg(long, default_value_t = 10_000)]
    resamples: u64,
    /// Include per-question rows in the report.
    #[arg(long)]
    per_example: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Tsv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    First,
    Any,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GzipArg {
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConventionArg {
    Inclusive,
    Exclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SubcommandKind {
    Analyze,
    Fix,
    Evaluate,
    Inspect,
}

/// Validated settings for one invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub subcommand: SubcommandKind,
    pub vocab: Option<PathBuf>,
    pub merges: Option<PathBuf>,
    pub datasets: Vec<PathBuf>,
    pub predictions: Vec<PathBuf>,
    pub output: Option<PathBuf>,
    /// `None` means the subcommand default: JSON, or plain text for inspect.
    pub format: Option<Format>,
    pub sample_size: Option<usize>,
    pub seed: u64,
    pub policy: AnswerPolicy,
    pub gzip: Option<bool>,
    pub convention: SpanConvention,
    pub workers: usize,
    pub qid: Option<String>,
    pub resamples: u64,
    pub per_example: bool,
}

impl RunConfig {
    fn from_cli(cli: Cli) -> Result<Self, Failure> {
        let (subcommand, a) = match cli.command {
            Command::Analyze(a) => (SubcommandKind::Analyze, a),
            Command::Fix(a) => (SubcommandKind::Fix, a),
            Command::Evaluate(a) => (SubcommandKind::Evaluate, a),
            Command::Inspect(a) => (SubcommandKind::Inspect, a),
        };
        let workers = match a.workers {
            Some(0) => return Err(Failure::usage("--workers must be at least 1")),
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        let cfg = RunConfig {
            subcommand,
            vocab: a.vocab,
            merges: a.merges,
            datasets: a.datasets,
            predictions: a.predictions,
            output: a.output,
            format: a.format,
            sample_size: a.sample,
            seed: a.seed,
            policy: match a.answer_policy {
                PolicyArg::First => AnswerPolicy::First,
                PolicyArg::Any => AnswerPolicy::Any,
            },
            gzip: match a.gzip {
                GzipArg::Auto => None,
                GzipArg::On => Some(true),
                GzipArg::Off => Some(false),
            },
            convention: match a.span_convention {
                ConventionArg::Inclusive => SpanConvention::InclusiveEnd,
                ConventionArg::Exclusive => SpanConvention::ExclusiveEnd,
            },
            workers,
            qid: a.qid,
            resamples: a.resamples,
            per_example: a.per_example,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), Failure> {
        use SubcommandKind::*;
        let needs_tokenizer = matches!(self.subcommand, Analyze | Fix | Inspect);
        if needs_tokenizer && self.vocab.is_none() {
            return Err(Failure::usage("--vocab is required"));
        }
        if needs_tokenizer && self.merges.is_none() {
            return Err(Failure::usage("--merges is required"));
        }
        if self.datasets.is_empty() {
            return Err(Failure::usage("--dataset is required"));
        }
        if self.subcommand != Analyze && self.datasets.len() > 1 {
            return Err(Failure::usage("only analyze accepts more than one --dataset"));
        }
        match (self.subcommand, self.predictions.len()) {
            (Evaluate, 0) => return Err(Failure::usage("--predictions is required")),
            (Evaluate, n) if n > 2 => {
                return Err(Failure::usage("--predictions may be given at most twice"))
            }
            (Evaluate, _) | (_, 0) => {}
            _ => return Err(Failure::usage("--predictions is only valid for evaluate")),
        }
        if self.subcommand == Fix && self.output.is_none() {
            return Err(Failure::usage("fix requires --output for the repaired dataset"));
        }
        match (self.subcommand, &self.qid) {
            (Inspect, None) => return Err(Failure::usage("inspect requires --qid")),
            (Inspect, _) | (_, None) => {}
            _ => return Err(Failure::usage("--qid is only valid for inspect")),
        }
        if self.sample_size.is_some() && self.subcommand != Analyze {
            return Err(Failure::usage("--sample is only valid for analyze"));
        }
        if self.resamples == 0 {
            return Err(Failure::usage("--resamples must be at least 1"));
        }
        Ok(())
    }

    fn read_options(&self) -> ReadOptions {
        ReadOptions {
            gzip: self.gzip,
            convention: self.convention,
        }
    }

    /// The report's record of the settings. Worker count and output path
    /// are left out so reruns produce identical bytes.
    fn report_config(&self) -> ReportConfig {
        ReportConfig {
            subcommand: self.subcommand,
            vocab: self.vocab.as_deref().map(display_path),
            merges: self.merges.as_deref().map(display_path),
            datasets: self.datasets.iter().map(|p| display_path(p)).collect(),
            predictions: self.predictions.iter().map(|p| display_path(p)).collect(),
            sample_size: self.sample_size,
            seed: self.seed,
            answer_policy: self.policy,
            span_convention: match self.convention {
                SpanConvention::InclusiveEnd => "inclusive",
                SpanConvention::ExclusiveEnd => "exclusive",
            },
            resamples: (self.subcommand == SubcommandKind::Evaluate && self.predictions.len() == 2)
                .then_some(self.resamples),
            qid: self.qid.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ReportConfig {
    subcommand: SubcommandKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    vocab: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    merges: Option<String>,
    datasets: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    predictions: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sample_size: Option<usize>,
    seed: u64,
    answer_policy: AnswerPolicy,
    span_convention: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    resamples: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    qid: Option<String>,
}

fn display_path(p: &Path) -> String {
    p.display().to_string()
}

/// A failed run, tagged with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Io(anyhow::Error),
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Io(_) => EXIT_IO,
        }
    }

    fn read(path: &Path, e: ReadError) -> Self {
        let err = anyhow::Error::new(e).context(format!("reading {}", path.display()));
        match err.downcast_ref::<ReadError>() {
            Some(ReadError::Io(_)) => Failure::Io(err),
            _ => Failure::Data(err),
        }
    }

    fn io(what: impl std::fmt::Display, e: io::Error) -> Self {
        Failure::Io(anyhow::Error::new(e).context(what.to_string()))
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Data(e) | Failure::Io(e) => write!(f, "{e:#}"),
        }
    }
}

/// Runs the tool with `args` (including the program name) and returns the
/// exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    let result = RunConfig::from_cli(cli).and_then(|cfg| execute(&cfg, stdout, stderr));
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "error: {f}");
            if let Failure::Usage(_) = f {
                let _ = writeln!(stderr, "Run `consistok --help` for usage.");
            }
            f.exit_code()
        }
    }
}

/// Runs an already validated configuration.
pub fn execute(cfg: &RunConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), Failure> {
    match cfg.subcommand {
        SubcommandKind::Analyze => cmd_analyze(cfg, stdout, stderr),
        SubcommandKind::Fix => cmd_fix(cfg, stdout, stderr),
        SubcommandKind::Evaluate => cmd_evaluate(cfg, stdout, stderr),
        SubcommandKind::Inspect => cmd_inspect(cfg, stdout, stderr),
    }
}

fn load_tokenizer(cfg: &RunConfig) -> Result<Tokenizer, Failure> {
    let (vocab, merges) = match (&cfg.vocab, &cfg.merges) {
        (Some(v), Some(m)) => (v, m),
        _ => return Err(Failure::usage("--vocab and --merges are required")),
    };
    Tokenizer::from_files(vocab, merges).map_err(|e| {
        let io = matches!(e, consistok::bpe::LoadError::Io(_));
        let err = anyhow::Error::new(e).context("loading tokenizer");
        if io {
            Failure::Io(err)
        } else {
            Failure::Data(err)
        }
    })
}

/// Writes a finished report to `--output` or stdout.
fn emit(cfg: &RunConfig, stdout: &mut dyn Write, body: &str) -> Result<(), Failure> {
    match &cfg.output {
        Some(path) if cfg.subcommand != SubcommandKind::Fix => {
            std::fs::write(path, body).map_err(|e| Failure::io(format!("writing {}", path.display()), e))
        }
        _ => stdout
            .write_all(body.as_bytes())
            .and_then(|_| stdout.flush())
            .map_err(|e| Failure::io("writing report", e)),
    }
}

fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// Per-record problems seen while streaming a dataset.
#[derive(Default)]
struct ReadIssues {
    skipped: usize,
    messages: Vec<String>,
    fatal: Option<ReadError>,
}

impl ReadIssues {
    fn note(&mut self, e: ReadError) {
        self.skipped += 1;
        if self.messages.len() < MAX_LISTED_WARNINGS {
            self.messages.push(e.to_string());
        }
    }

    fn report(self, path: &Path, stderr: &mut dyn Write) -> Result<(), Failure> {
        for m in &self.messages {
            let _ = writeln!(stderr, "warning: {}: {m}", path.display());
        }
        if self.skipped > self.messages.len() {
            let _ = writeln!(
                stderr,
                "warning: {}: {} more skipped records not shown",
                path.display(),
                self.skipped - self.messages.len()
            );
        }
        match self.fatal {
            Some(e) => Err(Failure::read(path, e)),
            None => Ok(()),
        }
    }
}

/// Streams the examples of one dataset, setting aside bad records.
fn good_examples<'a>(
    reader: impl Iterator<Item = Result<ExtractiveExample, ReadError>> + 'a,
    issues: &'a mut ReadIssues,
) -> impl Iterator<Item = ExtractiveExample> + 'a {
    reader
        .map_while(move |item| match item {
            Ok(ex) => Some(Some(ex)),
            Err(e) if e.is_fatal() => {
                issues.fatal = Some(e);
                None
            }
            Err(e) => {
                issues.note(e);
                Some(None)
            }
        })
        .flatten()
}

#[derive(Serialize)]
struct Report<'a, T: Serialize, P: Serialize> {
    tool_version: &'static str,
    config: ReportConfig,
    #[serde(flatten)]
    body: T,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_example: Option<&'a [P]>,
}

// ---------------------------------------------------------------------------
// analyze

#[derive(Serialize)]
struct DatasetStats {
    dataset: String,
    source: String,
    #[serde(flatten)]
    stats: ConsistencyStats,
    /// Records rejected by the reader (bad spans, missing fields).
    rejected_records: usize,
}

#[derive(Serialize)]
struct AnalyzeBody {
    stats: Vec<DatasetStats>,
}

#[derive(Serialize)]
struct VerdictRow {
    dataset: String,
    qid: String,
    answer: String,
    status: &'static str,
}

fn cmd_analyze(cfg: &RunConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), Failure> {
    let tok = load_tokenizer(cfg)?;
    let options = AnalyzeOptions {
        sample_size: cfg.sample_size,
        seed: cfg.seed,
        policy: cfg.policy,
        keep_verdicts: cfg.per_example,
    };
    let mut all = Vec::new();
    let mut rows = Vec::new();
    for path in &cfg.datasets {
        let (header, reader) = open_dataset(path, cfg.read_options()).map_err(|e| Failure::read(path, e))?;
        let mut issues = ReadIssues::default();
        let mut stats = {
            let issues = &mut issues;
            let tok = &tok;
            par::with_workers(cfg.workers, move || {
                analyze_dataset(tok, good_examples(reader, issues), &options)
            })
        };
        let rejected = issues.skipped;
        issues.report(path, stderr)?;
        let _ = writeln!(
            stderr,
            "{}: {} questions, {:.1}% inconsistent raw, {:.1}% after prefix space",
            path.display(),
            stats.total,
            stats.pct_inconsistent_raw,
            stats.pct_inconsistent_after_prefix
        );
        for v in std::mem::take(&mut stats.verdicts) {
            rows.push(VerdictRow {
                dataset: header.dataset.clone(),
                qid: v.qid,
                answer: v.answer,
                status: v.status.as_str(),
            });
        }
        all.push(DatasetStats {
            dataset: header.dataset,
            source: display_path(path),
            stats,
            rejected_records: rejected,
        });
    }

    let body = match cfg.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&Report {
            tool_version: TOOL_VERSION,
            config: cfg.report_config(),
            body: AnalyzeBody { stats: all },
            per_example: cfg.per_example.then_some(rows.as_slice()),
        }),
        Format::Tsv => {
            let mut out = String::from(
                "dataset\tsource\ttotal\tconsistent_raw\tconsistent_prefix_only\tinconsistent\tskipped\trejected_records\tpct_inconsistent_raw\tpct_inconsistent_after_prefix\n",
            );
            for d in &all {
                let s = &d.stats;
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\n",
                    tsv(&d.dataset),
                    tsv(&d.source),
                    s.total,
                    s.consistent_raw,
                    s.consistent_prefix_only,
                    s.inconsistent,
                    s.skipped,
                    d.rejected_records,
                    s.pct_inconsistent_raw,
                    s.pct_inconsistent_after_prefix
                ));
            }
            out
        }
    };
    emit(cfg, stdout, &body)
}

fn tsv(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

// ---------------------------------------------------------------------------
// fix

#[derive(Serialize)]
struct FixBody {
    stats: FixStats,
}

#[derive(Serialize)]
struct FixStats {
    dataset: String,
    source: String,
    written: usize,
    #[serde(flatten)]
    summary: FixSummary,
}

enum Sink {
    Plain(BufWriter<File>),
    Gzip(GzEncoder<BufWriter<File>>),
}

impl Write for Sink {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Sink::Plain(w) => w.write(buf),
            Sink::Gzip(w) => w.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Sink::Plain(w) => w.flush(),
            Sink::Gzip(w) => w.flush(),
        }
    }
}

impl Sink {
    fn create(path: &Path) -> io::Result<Self> {
        let file = BufWriter::new(File::create(path)?);
        Ok(if path.extension().is_some_and(|e| e == "gz") {
            Sink::Gzip(GzEncoder::new(file, Compression::default()))
        } else {
            Sink::Plain(file)
        })
    }

    fn close(self) -> io::Result<()> {
        match self {
            Sink::Plain(mut w) => w.flush(),
            Sink::Gzip(w) => w.finish()?.flush(),
        }
    }
}

fn cmd_fix(cfg: &RunConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), Failure> {
    let tok = load_tokenizer(cfg)?;
    let path = &cfg.datasets[0];
    let out_path = cfg.output.as_ref().expect("validated");
    let (header, reader) = open_dataset(path, cfg.read_options()).map_err(|e| Failure::read(path, e))?;
    let out_err = |e| Failure::io(format!("writing {}", out_path.display()), e);
    let sink = Sink::create(out_path).map_err(out_err)?;
    let mut writer = FixedDatasetWriter::new(sink, &header).map_err(out_err)?;

    let result = {
        let tok = &tok;
        let writer = &mut writer;
        par::with_workers(cfg.workers, move || {
            fix_dataset(tok, reader, |ex, outcome| writer.write(ex, outcome))
        })
    };
    let summary = match result {
        Ok(s) => s,
        Err(FixError::Read(e)) => return Err(Failure::read(path, e)),
        Err(FixError::Io(e)) => return Err(out_err(e)),
    };
    let (written, sink) = writer.finish().map_err(out_err)?;
    sink.close().map_err(out_err)?;

    if summary.span_mismatches + summary.malformed > 0 {
        let _ = writeln!(
            stderr,
            "warning: {}: dropped {} records with mismatched spans and {} malformed records",
            path.display(),
            summary.span_mismatches,
            summary.malformed
        );
    }
    let _ = writeln!(stderr, "wrote {written} questions to {}", out_path.display());

    let stats = FixStats {
        dataset: header.dataset,
        source: display_path(path),
        written,
        summary,
    };
    let body = match cfg.format.unwrap_or(Format::Json) {
        Format::Json => to_json(&Report::<_, ()> {
            tool_version: TOOL_VERSION,
            config: cfg.report_config(),
            body: FixBody { stats },
            per_example: None,
        }),
        Format::Tsv => {
            let mut out = String::from("fix_method\tcount\n");
            for (m, n) in &stats.summary.methods {
                out.push_str(&format!("{m}\t{n}\n"));
            }
            out.push_str(&format!("span_mismatch\t{}\n", stats.summary.span_mismatches));
            out.push_str(&format!("malformed\t{}\n", stats.summary.malformed));
            out
        }
    };
    emit(cfg, stdout, &body)
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Serialize)]
struct EvaluateBody {
    metrics: Vec<PredictionMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    significance: Option<SignificanceResult>,
}

#[derive(Serialize)]
struct PredictionMetrics {
    predictions: String,
    #[serde(flatten)]
    report: MetricsReport,
}

fn load_predictions(path: &Path) -> Result<PredictionSet, Failure> {
    let file = File::open(path).map_err(|e| Failure::io(format!("opening {}", path.display()), e))?;
    read_predictions(io::BufReader::new(file)).map_err(|e| {
        let io = matches!(e, PredictionError::Io(_));
        let err = anyhow::Error::new(e).context(format!("reading {}", path.display()));
        if io {
            Failure::Io(err)
        } else {
            Failure::Data(err)
        }
    })
}

fn cmd_evaluate(cfg: &RunConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), Failure> {
    let path = &cfg.datasets[0];
    let (_header, reader) = open_dataset(path, cfg.read_options()).map_err(|e| Failure::read(path, e))?;
    let mut issues = ReadIssues::default();
    let examples: Vec<ExtractiveExample> = good_examples(reader, &mut issues).collect();
    issues.report(path, stderr)?;

    let mut reports = Vec::new();
    for pred_path in &cfg.predictions {
        let preds = load_predictions(pred_path)?;
        let report = par::with_workers(cfg.workers, || evaluate(&preds, examples.iter().cloned()));
        if !report.unknown_qids.is_empty() {
            let _ = writeln!(
                stderr,
                "warning: {}: {} predictions for unknown question ids ignored (first: {})",
                pred_path.display(),
                report.unknown_qids.len(),
                report.unknown_qids[0]
            );
        }
        if !report.duplicate_qids.is_empty() {
            let _ = writeln!(
                stderr,
                "warning: {}: {} repeated question ids scored once",
                path.display(),
                report.duplicate_qids.len()
            );
        }
        reports.push(PredictionMetrics {
            predictions: display_path(pred_path),
            report,
        });
    }

    let significance = match reports.as_slice() {
        [a, b] => {
            let fa: Vec<f64> = a.report.per_example.iter().map(|s| s.f1).collect();
            let fb: Vec<f64> = b.report.per_example.iter().map(|s| s.f1).collect();
            let r = par::with_workers(cfg.workers, || paired_significance(&fa, &fb, cfg.resamples, cfg.seed))
                .map_err(|e| Failure::Data(anyhow!(e)))?;
            Some(r)
        }
        _ => None,
    };

    let format = cfg.format.unwrap_or(Format::Json);
    if format == Format::Tsv {
        let mut out = String::from(
            "predictions\tn\tem\tf1\tmissing_predictions\thallucination_rate\thallucination_rate_normalized\n",
        );
        for r in &reports {
            let m = &r.report;
            out.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.4}\t{}\t{:.4}\t{:.4}\n",
                tsv(&r.predictions),
                m.n,
                m.em,
                m.f1,
                m.missing_predictions,
                m.hallucination_rate,
                m.hallucination_rate_normalized
            ));
        }
        if let Some(s) = &significance {
            out.push_str(&format!("# paired sign-flip on F1: mean diff {:.6}, p {:.6}\n", s.statistic, s.p_value));
        }
        return emit(cfg, stdout, &out);
    }

    if !cfg.per_example {
        for r in &mut reports {
            r.report.per_example.clear();
        }
    }
    let body = to_json(&Report::<_, ()> {
        tool_version: TOOL_VERSION,
        config: cfg.report_config(),
        body: EvaluateBody {
            metrics: reports,
            significance,
        },
        per_example: None,
    });
    emit(cfg, stdout, &body)
}

// ---------------------------------------------------------------------------
// inspect

#[derive(Serialize)]
struct TokenRow {
    index: usize,
    start: usize,
    end: usize,
    id: u32,
    piece: String,
    in_target: bool,
}

#[derive(Serialize)]
struct Pieces {
    pieces: Vec<String>,
    ids: Vec<u32>,
}

#[derive(Serialize)]
struct VerdictView {
    status: &'static str,
    location: Option<TokenSpan>,
}

#[derive(Serialize)]
struct FixView {
    method: String,
    context_span: Option<TokenSpan>,
    target: Pieces,
    decoded: String,
    note: String,
}

#[derive(Serialize)]
struct Trace {
    qid: String,
    question: String,
    answer: Option<String>,
    /// Gold span in codepoints, end exclusive.
    gold_chars: Option<[usize; 2]>,
    gold_bytes: Option<[usize; 2]>,
    standalone: Option<Pieces>,
    prefixed: Option<Pieces>,
    context_tokens: usize,
    window: Vec<TokenRow>,
    verdict: Option<VerdictView>,
    fix: Option<FixView>,
}

#[derive(Serialize)]
struct InspectBody {
    trace: Trace,
}

const WINDOW_RADIUS: usize = 4;

fn pieces(tok: &Tokenizer, ids: &[u32]) -> Pieces {
    Pieces {
        pieces: tok.pieces(ids),
        ids: ids.to_vec(),
    }
}

fn build_trace(tok: &Tokenizer, ex: &ExtractiveExample) -> Result<Trace, Failure> {
    let enc = tok.encode(&ex.context);
    let primary = ex.primary_answer().filter(|(a, _)| !a.is_empty());
    let gold_bytes = match primary.and_then(|(_, s)| s) {
        Some(span) => Some(
            codepoint_span_to_byte_span(&ex.context, span)
                .map_err(|e| Failure::Data(anyhow!("question {}: {e}", ex.qid)))?,
        ),
        None => None,
    };
    let (standalone, prefixed, verdict) = match primary {
        Some((answer, _)) => {
            let data = |e| Failure::Data(anyhow!("question {}: {e}", ex.qid));
            let (raw, pre) = answer_variants(tok, answer).map_err(data)?;
            let v = check_consistency(tok, &enc, answer).map_err(data)?;
            (
                Some(pieces(tok, &raw)),
                Some(pieces(tok, &pre)),
                Some(VerdictView {
                    status: v.status.as_str(),
                    location: v.location,
                }),
            )
        }
        None => (None, None, None),
    };
    let fix = fix_example(tok, &enc, ex).map_err(|e| Failure::Data(anyhow!("question {}: {e}", ex.qid)))?;

    let focus = fix
        .context_span
        .or(verdict.as_ref().and_then(|v| v.location))
        .or_else(|| {
            gold_bytes.map(|b| {
                let i = enc.offsets().partition_point(|o| o.end <= b.start);
                TokenSpan::new(i, (i + 1).min(enc.len()))
            })
        })
        .unwrap_or(TokenSpan::new(0, 0));
    let lo = focus.start.saturating_sub(WINDOW_RADIUS);
    let hi = (focus.end + WINDOW_RADIUS).min(enc.len());
    let target = fix.context_span;
    let window = (lo..hi)
        .map(|i| {
            let o = enc.offsets()[i];
            let id = enc.ids()[i];
            TokenRow {
                index: i,
                start: o.start,
                end: o.end,
                id,
                piece: tok.token_str(id).unwrap_or("?").to_owned(),
                in_target: target.is_some_and(|t| t.range().contains(&i)),
            }
        })
        .collect();

    let decoded = String::from_utf8_lossy(&tok.decode_bytes(&fix.target_ids).unwrap_or_default()).into_owned();
    Ok(Trace {
        qid: ex.qid.clone(),
        question: ex.question.clone(),
        answer: primary.map(|(a, _)| a.to_owned()),
        gold_chars: primary.and_then(|(_, s)| s).map(|s| [s.start, s.end_exclusive()]),
        gold_bytes: gold_bytes.map(|b| [b.start, b.end]),
        standalone,
        prefixed,
        context_tokens: enc.len(),
        window,
        verdict,
        fix: Some(FixView {
            method: fix.method.to_string(),
            context_span: fix.context_span,
            target: pieces(tok, &fix.target_ids),
            decoded,
            note: fix.note,
        }),
    })
}

fn quoted(items: &[String]) -> String {
    serde_json::to_string(items).expect("strings serialize")
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn span_text(span: Option<TokenSpan>) -> String {
    match span {
        Some(s) => format!("tokens [{}, {})", s.start, s.end),
        None => "no location".into(),
    }
}

fn render_trace(t: &Trace) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| out.push_str(&format!("{k:<12}{v}\n"));
    line("qid", t.qid.clone());
    line("question", t.question.clone());
    line("answer", t.answer.as_deref().map_or("(none)".into(), quote));
    if let (Some(c), Some(b)) = (t.gold_chars, t.gold_bytes) {
        line("gold span", format!("chars [{}, {}) bytes [{}, {})", c[0], c[1], b[0], b[1]));
    }
    if let Some(p) = &t.standalone {
        line("standalone", format!("{}  {:?}", quoted(&p.pieces), p.ids));
    }
    if let Some(p) = &t.prefixed {
        line("prefixed", format!("{}  {:?}", quoted(&p.pieces), p.ids));
    }
    let range = match (t.window.first(), t.window.last()) {
        (Some(a), Some(b)) => format!("; window [{}, {})", a.index, b.index + 1),
        _ => String::new(),
    };
    line("context", format!("{} tokens{range}", t.context_tokens));
    for r in &t.window {
        out.push_str(&format!(
            "  {} {:>5}  [{}, {})  {:>6}  {}\n",
            if r.in_target { '*' } else { ' ' },
            r.index,
            r.start,
            r.end,
            r.id,
            quote(&r.piece)
        ));
    }
    let mut line = |k: &str, v: String| out.push_str(&format!("{k:<12}{v}\n"));
    if let Some(v) = &t.verdict {
        line("verdict", format!("{} at {}", v.status, span_text(v.location)));
    }
    if let Some(f) = &t.fix {
        line("fix", format!("{} at {}", f.method, span_text(f.context_span)));
        line(
            "target",
            format!("{}  {:?}  decoded {}", quoted(&f.target.pieces), f.target.ids, quote(&f.decoded)),
        );
        if !f.note.is_empty() {
            line("note", f.note.clone());
        }
    }
    out
}

fn cmd_inspect(cfg: &RunConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), Failure> {
    let tok = load_tokenizer(cfg)?;
    let qid = cfg.qid.as_deref().expect("validated");
    let path = &cfg.datasets[0];
    let (_header, reader) = open_dataset(path, cfg.read_options()).map_err(|e| Failure::read(path, e))?;
    let mut found = None;
    for item in reader {
        match item {
            Ok(ex) if ex.qid == qid => {
                found = Some(ex);
                break;
            }
            Ok(_) => {}
            Err(e) if e.is_fatal() => return Err(Failure::read(path, e)),
            Err(e) => {
                if let ReadError::SpanMismatch { qid: q, .. } | ReadError::MissingField { qid: Some(q), .. } = &e {
                    if q == qid {
                        return Err(Failure::read(path, e));
                    }
                }
            }
        }
    }
    let Some(ex) = found else {
        return Err(Failure::Data(anyhow!("question id {qid:?} not found in {}", path.display())));
    };
    let trace = build_trace(&tok, &ex)?;
    let _ = writeln!(stderr, "traced {qid} in {}", path.display());

    let body = match cfg.format {
        None => render_trace(&trace),
        Some(Format::Json) => to_json(&Report::<_, ()> {
            tool_version: TOOL_VERSION,
            config: cfg.report_config(),
            body: InspectBody { trace },
            per_example: None,
        }),
        Some(Format::Tsv) => {
            let mut out = String::from("index\tstart\tend\tid\tpiece\tin_target\n");
            for r in &trace.window {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    r.index,
                    r.start,
                    r.end,
                    r.id,
                    tsv(&r.piece),
                    r.in_target
                ));
            }
            out
        }
    };
    emit(cfg, stdout, &body)
}
