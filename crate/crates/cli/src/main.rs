//! `kgrag` command line.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage or configuration error,
//! 3 store error, 4 provider error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use kgrag::config::{Config, ConfigError, QueryMode};
use kgrag::eval;
use kgrag::orchestrator::{Engine, PipelineError, PipelineEvent};
use kgrag::retrieval::RetrievalError;
use kgrag::store::{GraphStore, StoreError};

#[derive(Parser)]
#[command(name = "kgrag", version, about = "Knowledge-graph retrieval-augmented question answering")]
struct Cli {
    /// Configuration file (TOML). Environment variables override it.
    #[arg(long, global = true, env = "KGRAG_CONFIG")]
    config: Option<PathBuf>,
    /// Store directory, overriding the configuration.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract a knowledge graph from files or directories into the store.
    Ingest {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Answer a question; progress goes to stderr, the answer to stdout.
    Query {
        question: String,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<QueryMode>,
    },
    /// Serve the HTTP API.
    Serve {
        /// Listen address, overriding the configuration.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Inspect the store.
    Store {
        #[command(subcommand)]
        action: StoreAction,
    },
    /// Run a question set and report scores.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<QueryMode>,
        /// Where to write the full JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
    },
}

#[derive(Subcommand)]
enum StoreAction {
    /// Check integrity; fails when any issue is found.
    Verify,
    /// Node, edge and chunk counts.
    Stats,
}

fn parse_mode(s: &str) -> Result<QueryMode, String> {
    match s {
        "auto" => Ok(QueryMode::Auto),
        "dual" => Ok(QueryMode::Dual),
        "logic" => Ok(QueryMode::Logic),
        _ => Err(format!("unknown mode `{s}` (expected auto, dual or logic)")),
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Store(String),
    Provider(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Other(_) => 1,
            Self::Usage(_) => 2,
            Self::Store(_) => 3,
            Self::Provider(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Store(m) | Self::Provider(m) | Self::Other(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Gateway(_) => Self::Provider(e.to_string()),
            _ => Self::Usage(e.to_string()),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Gateway(_) => Self::Provider(e.to_string()),
            _ => Self::Store(e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Gateway(_) => Self::Provider(e.to_string()),
            PipelineError::Store(e) => e.into(),
            PipelineError::StoreNotLoaded => Self::Store(e.to_string()),
            PipelineError::Config(e) => e.into(),
            PipelineError::EmptyQuery => Self::Usage(e.to_string()),
            PipelineError::Retrieval(RetrievalError::Gateway(_)) => Self::Provider(e.to_string()),
            PipelineError::Retrieval(RetrievalError::Store(e)) => e.into(),
            PipelineError::Retrieval(RetrievalError::EmptyStore) => Self::Store(e.to_string()),
            _ => Self::Other(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("KGRAG_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let rendered = e.to_string();
            let line = rendered.lines().next().unwrap_or_default();
            eprintln!("{}", line.trim_end());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let mut config = Config::load(cli.config.as_deref())?;
    if let Some(store) = &cli.store {
        config.store.path = store.clone();
    }
    Ok(config)
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Other(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::Ingest { paths } => {
            let engine = Engine::open(config)?;
            let report = engine.ingest(paths)?;
            if cli.json {
                print_json(&report)?;
            } else {
                for w in &report.warnings {
                    eprintln!("warning: {}: {}", w.path, w.reason);
                }
                for f in &report.failed {
                    eprintln!("failed: {} ({}): {}", f.chunk_id, f.source_path, f.error);
                }
                println!(
                    "documents={} chunks={} ingested={} skipped={} failed={}",
                    report.documents,
                    report.chunks_total,
                    report.chunks_ingested,
                    report.chunks_skipped,
                    report.failed.len()
                );
                println!("nodes={} edges={} chunks={}", report.stats.nodes, report.stats.edges, report.stats.chunks);
            }
            Ok(())
        }
        Command::Query { question, mode } => {
            let mode = mode.unwrap_or(config.pipeline.mode);
            let engine = Engine::open(config)?;
            let mut stderr = std::io::stderr();
            let outcome = engine.answer(question, mode, &mut |event| {
                let line = match &event {
                    PipelineEvent::Stage { name, status, detail } if detail.is_empty() => {
                        format!("stage {}={}", name.as_str(), wire_name(status))
                    }
                    PipelineEvent::Stage { name, status, detail } => {
                        format!("stage {}={} ({detail})", name.as_str(), wire_name(status))
                    }
                    PipelineEvent::Verdict { stage, verdict, .. } => {
                        format!("verdict {}={}", stage.as_str(), wire_name(verdict))
                    }
                    PipelineEvent::Done { final_path, .. } => format!("final_path={}", final_path.as_str()),
                    PipelineEvent::Token { .. } | PipelineEvent::Error { .. } => return,
                };
                let _ = writeln!(stderr, "{line}");
            })?;
            if cli.json {
                print_json(&outcome)
            } else {
                println!("{}", outcome.answer);
                Ok(())
            }
        }
        Command::Serve { bind } => {
            let addr = bind.clone().unwrap_or_else(|| config.server.bind.clone());
            let engine = Arc::new(Engine::open(config)?);
            kgrag_server::run(engine, &addr).map_err(|e| Failure::Other(format!("server on {addr}: {e}")))
        }
        Command::Store { action } => {
            let store = open_store(&config.store.path)?;
            match action {
                StoreAction::Stats => {
                    let stats = store.stats();
                    if cli.json {
                        print_json(&stats)
                    } else {
                        println!("nodes={} edges={} chunks={}", stats.nodes, stats.edges, stats.chunks);
                        Ok(())
                    }
                }
                StoreAction::Verify => {
                    let report = store.verify();
                    if cli.json {
                        print_json(&report)?;
                    } else {
                        for issue in &report.issues {
                            println!("issue: {issue}");
                        }
                        println!(
                            "{} issue(s), {} vector(s), {} pending",
                            report.issues.len(),
                            report.vectors,
                            report.pending
                        );
                    }
                    if report.is_ok() {
                        Ok(())
                    } else {
                        Err(Failure::Store(format!("{} integrity issue(s)", report.issues.len())))
                    }
                }
            }
        }
        Command::Eval { dataset, mode, report, concurrency } => {
            let mode = mode.unwrap_or(config.pipeline.mode);
            let items = eval::load_dataset(dataset).map_err(|e| Failure::Usage(e.to_string()))?;
            let engine = Engine::open(config)?;
            if engine.snapshot().is_empty() {
                return Err(PipelineError::StoreNotLoaded.into());
            }
            let result = eval::run_eval(&engine, &items, mode, *concurrency);
            if let Some(path) = report {
                let text = serde_json::to_string_pretty(&result).map_err(|e| Failure::Other(e.to_string()))?;
                std::fs::write(path, text).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))?;
            }
            if cli.json {
                print_json(&result.metrics)
            } else {
                let m = &result.metrics;
                match m.accuracy {
                    Some(a) => {
                        println!("count={} mean_score={:.4} accuracy={a:.4} errors={}", m.count, m.mean_score, m.errors)
                    }
                    None => println!("count={} mean_score={:.4} errors={}", m.count, m.mean_score, m.errors),
                }
                for (path, n) in &m.final_paths {
                    println!("final_path {path}={n}");
                }
                Ok(())
            }
        }
    }
}

/// The serialized name of a unit enum variant.
fn wire_name(value: impl serde::Serialize) -> String {
    serde_json::to_value(value).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn open_store(path: &Path) -> Result<GraphStore, Failure> {
    if !GraphStore::exists(path) {
        return Err(Failure::Store(format!("no store at {}", path.display())));
    }
    Ok(GraphStore::load(path)?)
}
