//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage, validation or configuration error,
//! 2 transport error (a model or scorer could not be reached).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::corpus_model::{read_records, write_json_document, write_records, Clock, CorpusRecord, RecordError, Scenario, StageName};
use crate::curation::{filter_sensitive, histogram_csv, word_stats, Lexicon};
use crate::eval_harness::{build_report, compare, read_score_items, score_items, EvalError, EvalReport, HttpScorer, MockScorer, Scorer};
use crate::llm_gateway::{GatewayError, HttpBackend};
use crate::pipeline::{self, PipelineConfig, PipelineError, RunContext, RunMode};
use crate::prompt_kit::{grid_combinations, grid_samples, GridSpec, PromptKit};
use crate::suffix_dedup::{dedup, ConcatCorpus, DedupConfig, DedupMode};

#[derive(Parser, Debug)]
#[command(name = "empathy-corpus", version, about = "Build, deduplicate, curate and evaluate empathetic-dialogue corpora")]
pub struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Use the deterministic mock model / scorer instead of HTTP endpoints.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print errors to stderr as JSON objects.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the corpus pipeline.
    Run(RunArgs),
    /// Remove repeated substrings from one text field of a JSONL file.
    Dedup(DedupArgs),
    /// Drop corpus records that mention a lexicon term.
    Filter(FilterArgs),
    /// Word-count statistics of one text field of a JSONL file.
    Stats(StatsArgs),
    /// Score responses with an empathy scorer.
    Eval(EvalArgs),
    /// Compare two evaluation reports.
    Compare(CompareArgs),
    /// Emit hyperparameter grid combinations.
    Grid(GridArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Continue from the checkpoint, skipping completed stages.
    #[arg(long, conflicts_with = "stage")]
    pub resume: bool,
    /// Run only this stage (its predecessor must be complete).
    #[arg(long)]
    pub stage: Option<StageName>,
}

#[derive(Args, Debug)]
pub struct DedupArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Dotted path of the text field, e.g. `text` or `explanation.text`.
    #[arg(long, default_value = "text")]
    pub field: String,
    #[arg(long, default_value_t = 75)]
    pub threshold: usize,
    /// `excise` or `drop`.
    #[arg(long, default_value = "excise")]
    pub mode: DedupMode,
    /// Where to write the JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Deduplicated JSONL; standard output if omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    /// Corpus records (JSONL).
    #[arg(long)]
    pub input: PathBuf,
    /// One term per line.
    #[arg(long)]
    pub lexicon: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Where to write removed records.
    #[arg(long)]
    pub removed: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "text")]
    pub field: String,
    /// Also write the histogram as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// JSONL of `{id, response, context?}` items or corpus records.
    #[arg(long)]
    pub responses: PathBuf,
    /// Scorer endpoint; not needed with --mock.
    #[arg(long)]
    pub scorer_url: Option<String>,
    /// Environment variable holding the scorer's bearer token.
    #[arg(long)]
    pub auth_env: Option<String>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub candidate: PathBuf,
    /// Write the comparison as JSON; a table goes to standard output either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    /// `name=lo:hi:step`, repeatable. Only temperature and top_p.
    #[arg(long = "param", required = true, value_parser = parse_grid_spec)]
    pub params: Vec<GridSpec>,
    /// With scenarios, emit brainstorm requests for the first --sample of them.
    #[arg(long)]
    pub scenarios: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub sample: usize,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// JSONL output; standard output if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_grid_spec(s: &str) -> Result<GridSpec, String> {
    let (name, range) = s.split_once('=').ok_or("expected name=lo:hi:step")?;
    let parts: Vec<&str> = range.split(':').collect();
    let [lo, hi, step] = parts[..] else {
        return Err("expected name=lo:hi:step".into());
    };
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok(GridSpec::new(name.trim(), num(lo)?, num(hi)?, num(step)?))
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "invalid",
            message: message.into(),
        }
    }

    fn transport(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "transport",
            message: message.into(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Generation {
                source: GatewayError::Transport { .. },
                ..
            } => CliError::transport(e.to_string()),
            _ => CliError::invalid(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Transport { .. } => CliError::transport(e.to_string()),
            _ => CliError::invalid(e.to_string()),
        }
    }
}

impl From<RecordError> for CliError {
    fn from(e: RecordError) -> Self {
        CliError::invalid(e.to_string())
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("EMPATHY_CORPUS_LOG")
        .target(env_logger::Target::Stderr)
        .try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            if cli.json {
                let v = serde_json::json!({"error": e.kind, "message": e.message, "exit_code": e.code});
                eprintln!("{v}");
            } else {
                eprintln!("error: {}", e.message);
            }
            e.code
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(args) => cmd_run(cli, args),
        Command::Dedup(args) => cmd_dedup(args),
        Command::Filter(args) => cmd_filter(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Eval(args) => cmd_eval(cli, args),
        Command::Compare(args) => cmd_compare(args),
        Command::Grid(args) => cmd_grid(cli, args),
    }
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> Result<(), CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::invalid("`run` needs --config <file>"))?;
    let mut config = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let mock = config.mock_backend();
    let http = HttpBackend::new();
    let (backend, clock): (&dyn crate::llm_gateway::ChatBackend, Clock) = if cli.mock {
        (&mock, Clock::frozen())
    } else {
        (&http, Clock::System)
    };
    let ctx = RunContext::new(&config, backend, clock, cli.mock)?;
    let mode = match (args.resume, args.stage) {
        (_, Some(stage)) => RunMode::Single(stage),
        (true, None) => RunMode::Resume,
        (false, None) => RunMode::Fresh,
    };
    let summary = pipeline::run(&ctx, mode)?;
    for m in &summary.manifests {
        eprintln!(
            "{:<20} in {:>7}  out {:>7}  removed {:>6}",
            m.stage_name.as_str(),
            m.input_count,
            m.output_count,
            m.removed_count
        );
    }
    if summary.manifests.iter().any(|m| m.stage_name == StageName::Filter) {
        println!("{}", summary.corpus_path.display());
    }
    Ok(())
}

fn field<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(value, |v, key| v.get(key))
}

fn field_mut<'a>(value: &'a mut Value, path: &str) -> Option<&'a mut Value> {
    path.split('.').try_fold(value, |v, key| v.get_mut(key))
}

/// Reads a JSONL file as values, each with the string at `path`.
fn read_json_lines(input: &Path, path: &str) -> Result<Vec<(Value, String)>, CliError> {
    let text = std::fs::read_to_string(input).map_err(|e| CliError::invalid(format!("{}: {e}", input.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line)
            .map_err(|e| CliError::invalid(format!("{}:{}: malformed JSON: {e}", input.display(), i + 1)))?;
        let s = field(&value, path)
            .and_then(Value::as_str)
            .ok_or_else(|| CliError::invalid(format!("{}:{}: no string field `{path}`", input.display(), i + 1)))?
            .to_string();
        out.push((value, s));
    }
    Ok(out)
}

fn write_output(path: Option<&Path>, body: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, body).map_err(|e| CliError::invalid(format!("{}: {e}", p.display()))),
        None => std::io::stdout()
            .write_all(body.as_bytes())
            .map_err(|e| CliError::invalid(format!("stdout: {e}"))),
    }
}

fn cmd_dedup(args: &DedupArgs) -> Result<(), CliError> {
    let config = DedupConfig::new(args.threshold, args.mode);
    config.validate().map_err(|e| CliError::invalid(e.to_string()))?;
    let rows = read_json_lines(&args.input, &args.field)?;
    let corpus = ConcatCorpus::new(rows.iter().enumerate().map(|(i, (v, text))| {
        let id = v.get("id").and_then(Value::as_str).map_or_else(|| i.to_string(), str::to_string);
        (id, text.as_bytes())
    }))
    .map_err(|e| CliError::invalid(e.to_string()))?;
    let (kept, report) = dedup(&corpus, &config).map_err(|e| CliError::invalid(e.to_string()))?;
    let mut body = String::new();
    for doc in kept {
        let mut value = rows[doc.index].0.clone();
        if let Some(slot) = field_mut(&mut value, &args.field) {
            *slot = Value::String(String::from_utf8_lossy(&doc.bytes).into_owned());
        }
        body.push_str(&value.to_string());
        body.push('\n');
    }
    write_output(args.output.as_deref(), &body)?;
    if let Some(path) = &args.report {
        let doc = serde_json::json!({"config": config, "report": report});
        write_json_document(&doc, path)?;
    }
    eprintln!(
        "dedup: {} in, {} out, {} spans, {} bytes removed",
        report.documents_in, report.documents_out, report.spans_found, report.characters_removed
    );
    Ok(())
}

fn cmd_filter(args: &FilterArgs) -> Result<(), CliError> {
    let lexicon = Lexicon::from_file(&args.lexicon).map_err(|e| CliError::invalid(e.to_string()))?;
    let records: Vec<CorpusRecord> = read_records(&args.input)?;
    let outcome = filter_sensitive(records, &lexicon, "", &Clock::System);
    write_records(&outcome.kept, &args.output)?;
    if let Some(p) = &args.removed {
        write_records(&outcome.removed, p)?;
    }
    if let Some(p) = &args.manifest {
        write_json_document(&outcome.manifest, p)?;
    }
    eprintln!("filter: kept {}, removed {}", outcome.kept.len(), outcome.removed.len());
    Ok(())
}

fn cmd_stats(args: &StatsArgs) -> Result<(), CliError> {
    let rows = read_json_lines(&args.input, &args.field)?;
    let stats = word_stats(rows.iter().map(|(_, s)| s.as_str()));
    if let Some(p) = &args.csv {
        write_output(Some(p), &histogram_csv(&stats))?;
    }
    let body = serde_json::to_string_pretty(&stats).expect("stats serialize");
    write_output(None, &format!("{body}\n"))
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<(), CliError> {
    let items = read_score_items(&args.responses)?;
    let (scorer, name): (Box<dyn Scorer>, String) = if cli.mock {
        (Box::new(MockScorer::Hashed { seed: cli.seed.unwrap_or(0) }), "mock".into())
    } else {
        let url = args.scorer_url.clone().ok_or_else(|| CliError::invalid("eval needs --scorer-url <url> (or --mock)"))?;
        let mut scorer = HttpScorer::new(url.clone());
        scorer.auth_token_env = args.auth_env.clone();
        (Box::new(scorer), url)
    };
    let results = score_items(scorer.as_ref(), &items, args.batch_size)?;
    let report = build_report(&name, &items, results);
    write_json_document(&report, &args.out)?;
    eprintln!("eval: {} scored, {} failed", report.n_items - report.n_failed, report.n_failed);
    Ok(())
}

fn read_report(path: &Path) -> Result<EvalReport, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: not an evaluation report: {e}", path.display())))
}

fn cmd_compare(args: &CompareArgs) -> Result<(), CliError> {
    let base = read_report(&args.base)?;
    let candidate = read_report(&args.candidate)?;
    let agg = |r: &EvalReport, p: &Path| {
        r.aggregate
            .ok_or_else(|| CliError::invalid(format!("{}: report has no scored items", p.display())))
    };
    let report = compare(&agg(&base, &args.base)?, &agg(&candidate, &args.candidate)?);
    if let Some(p) = &args.out {
        write_json_document(&report, p)?;
    }
    write_output(None, &report.to_table())
}

fn cmd_grid(cli: &Cli, args: &GridArgs) -> Result<(), CliError> {
    let mut body = String::new();
    match &args.scenarios {
        None => {
            for combo in grid_combinations(&args.params).map_err(|e| CliError::invalid(e.to_string()))? {
                let obj: serde_json::Map<String, Value> = combo.into_iter().map(|(k, v)| (k, Value::from(v))).collect();
                body.push_str(&Value::Object(obj).to_string());
                body.push('\n');
            }
        }
        Some(path) => {
            let kit = match &cli.config {
                Some(c) => PipelineConfig::load(c)?.prompt_kit()?,
                None => PromptKit::builtin(),
            };
            let scenarios: Vec<Scenario> = read_records(path)?;
            let samples = grid_samples(&kit, &scenarios, &args.params, args.count, args.sample)
                .map_err(|e| CliError::invalid(e.to_string()))?;
            for s in samples {
                body.push_str(&serde_json::to_string(&s).expect("sample serialize"));
                body.push('\n');
            }
        }
    }
    write_output(args.out.as_deref(), &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_spec_parsing() {
        let g = parse_grid_spec("temperature=0:1:0.05").unwrap();
        assert_eq!(g, GridSpec::new("temperature", 0.0, 1.0, 0.05));
        assert!(parse_grid_spec("temperature=0:1").is_err());
        assert!(parse_grid_spec("0:1:2").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["empathy-corpus"]), 1);
        assert_eq!(main_with_args(["empathy-corpus", "frobnicate"]), 1);
        assert_eq!(main_with_args(["empathy-corpus", "--help"]), 0);
    }

    #[test]
    fn dotted_fields() {
        let v: Value = serde_json::json!({"a": {"b": "x"}});
        assert_eq!(field(&v, "a.b"), Some(&Value::from("x")));
        assert_eq!(field(&v, "a.c"), None);
    }
}
