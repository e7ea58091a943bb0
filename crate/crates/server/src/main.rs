use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use gmem_core::engine::{Engine, EngineError};
use gmem_core::eval::{generate_dataset, run_experiment, EvalError, ExperimentId, ExperimentSpec, MetricsReport, DEFAULT_SEED};
use gmem_core::extraction::{ContentMode, MemorizeRequest};
use gmem_core::governance::RouteMode;
use gmem_core::model::CrmKeys;
use gmem_core::retrieval::RetrievalRequest;
use gmem_core::store::RetrievalFilter;
use gmem_server::config::{ConfigError, ServerConfig};
use gmem_server::http::{serve, AppState};
use gmem_server::oplog::OpLog;
use serde_json::{json, Value};

const EXIT_FAILURE: u8 = 1;
const EXIT_BAND_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "gmem", version, about = "Governed memory service")]
struct Cli {
    /// TOML or JSON config; defaults to $GMEM_CONFIG, then ./gmem.toml.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// 0 picks a free port; the bound address is printed either way.
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Extract and store memories from a file or stdin.
    Memorize {
        #[arg(long)]
        org: String,
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        record_id: Option<String>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<ContentMode>,
    },
    Retrieve {
        #[arg(long)]
        org: String,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        record_id: Option<String>,
        #[arg(long)]
        reflect: bool,
        #[arg(long)]
        no_decay: bool,
    },
    /// Route a task over the org's governance variables.
    Govern {
        #[arg(long)]
        org: String,
        #[arg(long)]
        task: String,
        #[arg(long, value_parser = parse_route_mode, default_value = "auto")]
        mode: RouteMode,
    },
    Consolidate {
        #[arg(long)]
        org: String,
        #[arg(long)]
        dry_run: bool,
    },
    #[command(subcommand)]
    Schema(SchemaCommand),
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Subcommand)]
enum SchemaCommand {
    /// Draft a schema from a plain-language intent.
    Author {
        #[arg(long)]
        org: String,
        #[arg(long)]
        intent: String,
    },
    Enhance {
        #[arg(long)]
        org: String,
        #[arg(long)]
        property: String,
        #[arg(long)]
        feedback: String,
        #[arg(long)]
        schema_id: Option<String>,
    },
    Refine {
        #[arg(long)]
        org: String,
        #[arg(long)]
        schema_id: String,
        /// Sample text; stdin when absent.
        #[arg(long)]
        sample: Option<PathBuf>,
        /// JSON object of expected property values.
        #[arg(long)]
        expected: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Run one experiment (or `all`) and print its metrics table.
    Run(EvalArgs),
    /// Print the generated fixture for an experiment.
    Dataset(EvalArgs),
}

#[derive(Args)]
struct EvalArgs {
    /// e2, e4, e6, e11, e14, routing or all.
    id: String,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Write the canonical JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Fixture size override, e.g. `--size entities=50`.
    #[arg(long = "size", value_parser = parse_size)]
    sizes: Vec<(String, usize)>,
}

fn parse_mode(s: &str) -> Result<ContentMode, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown mode {s:?} (document, transcript, dialogue)"))
}

fn parse_route_mode(s: &str) -> Result<RouteMode, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown routing mode {s:?} (fast, full, auto)"))
}

fn parse_size(s: &str) -> Result<(String, usize), String> {
    let (k, v) = s.split_once('=').ok_or("expected key=value")?;
    Ok((k.trim().to_string(), v.trim().parse().map_err(|e| format!("{v}: {e}"))?))
}

struct CliError {
    kind: String,
    message: String,
    code: u8,
}

impl CliError {
    fn new(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.to_string(),
            message: message.into(),
            code: EXIT_FAILURE,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        let v = e.to_json();
        Self::new(v["error"]["kind"].as_str().unwrap_or("internal"), e.message)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::new("eval_error", e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io_error", e.to_string())
    }
}

type CliResult = Result<(), CliError>;

fn print_json(v: &impl serde::Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::new("internal", e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn read_input(path: Option<&Path>) -> Result<String, CliError> {
    match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::new("io_error", format!("{}: {e}", p.display()))),
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

fn require_completer(cfg: &ServerConfig) -> CliResult {
    if cfg.has_completer() {
        Ok(())
    } else {
        Err(CliError::new(
            "provider_unconfigured",
            "no completion provider: set GMEM_PROVIDER_ENDPOINT or provider.script",
        ))
    }
}

fn engine(cfg: &ServerConfig) -> Result<Engine, CliError> {
    Ok(cfg.build_engine()?)
}

fn run_eval(args: &EvalArgs, dataset: bool) -> Result<bool, CliError> {
    let ids: Vec<ExperimentId> = if args.id.eq_ignore_ascii_case("all") {
        ExperimentId::ALL.to_vec()
    } else {
        vec![args.id.parse()?]
    };
    let spec = |id| {
        args.sizes
            .iter()
            .fold(ExperimentSpec::new(id).with_seed(args.seed), |s, (k, n)| s.with_size(k, *n))
    };
    if dataset {
        let sets: BTreeMap<String, Value> = ids
            .iter()
            .map(|&id| Ok((id.to_string(), generate_dataset(&spec(id))?)))
            .collect::<Result<_, EvalError>>()?;
        let out = if sets.len() == 1 { sets.into_values().next().unwrap_or_default() } else { json!(sets) };
        if let Some(p) = &args.report {
            std::fs::write(p, serde_json::to_string_pretty(&out).unwrap_or_default())?;
        } else {
            print_json(&out)?;
        }
        return Ok(true);
    }
    let mut reports: Vec<MetricsReport> = Vec::new();
    for id in ids {
        let r = run_experiment(&spec(id))?;
        print!("{}", r.table());
        std::io::stdout().flush()?;
        reports.push(r);
    }
    if let Some(p) = &args.report {
        let text = match reports.as_slice() {
            [one] => one.to_canonical_json(),
            many => serde_json::to_string_pretty(many).unwrap_or_default() + "\n",
        };
        std::fs::write(p, text)?;
    }
    Ok(reports.iter().all(|r| r.pass))
}

async fn run_server(cfg: ServerConfig, host: &str, port: u16) -> CliResult {
    let engine = Arc::new(engine(&cfg)?);
    let oplog = match &cfg.op_log {
        Some(p) => OpLog::open(p).map_err(|e| CliError::new("io_error", format!("{}: {e}", p.display())))?,
        None => OpLog::disabled(),
    };
    let state = AppState::new(engine, cfg.tokens.clone(), oplog, cfg.masked());
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    let addr = listener.local_addr()?;
    println!("listening on http://{addr}");
    std::io::stdout().flush()?;
    tracing::info!(%addr, "serving");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    serve(listener, state, shutdown).await?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool, CliError> {
    if let Command::Eval(cmd) = &cli.command {
        return match cmd {
            EvalCommand::Run(a) => run_eval(a, false),
            EvalCommand::Dataset(a) => run_eval(a, true),
        };
    }
    let cfg = ServerConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Eval(_) => unreachable!("handled above"),
        Command::Serve { host, port } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(run_server(cfg, &host, port))?;
        }
        Command::Memorize { org, file, record_id, mode } => {
            require_completer(&cfg)?;
            let content = read_input(file.as_deref())?;
            let mut req = MemorizeRequest::new(&org, &content);
            req.crm_keys = record_id.map(CrmKeys::record);
            req.options.mode = mode;
            print_json(&engine(&cfg)?.memorize(&req)?)?;
        }
        Command::Retrieve { org, query, k, record_id, reflect, no_decay } => {
            let mut req = RetrievalRequest::new(&org, &query, k);
            if let Some(id) = record_id {
                req.filter = RetrievalFilter::record(id);
            }
            req.reflect = reflect;
            req.recency_decay = !no_decay;
            print_json(&engine(&cfg)?.retrieve(&req)?)?;
        }
        Command::Govern { org, task, mode } => {
            print_json(&engine(&cfg)?.govern(&org, &task, mode, None, false)?)?;
        }
        Command::Consolidate { org, dry_run } => {
            print_json(&engine(&cfg)?.consolidate(&org, dry_run)?)?;
        }
        Command::Schema(cmd) => {
            require_completer(&cfg)?;
            let e = engine(&cfg)?;
            match cmd {
                SchemaCommand::Author { org, intent } => print_json(&e.author_schema(&org, &intent)?)?,
                SchemaCommand::Enhance { org, property, feedback, schema_id } => {
                    let (schema, property) = e.enhance_property(&org, &property, &feedback, schema_id.as_deref())?;
                    print_json(&json!({"schema": schema, "property": property}))?;
                }
                SchemaCommand::Refine { org, schema_id, sample, expected } => {
                    let sample = read_input(sample.as_deref())?;
                    let expected: Option<BTreeMap<String, Value>> = match expected {
                        Some(p) => Some(
                            serde_json::from_str(&read_input(Some(&p))?)
                                .map_err(|e| CliError::new("bad_request", format!("{}: {e}", p.display())))?,
                        ),
                        None => None,
                    };
                    print_json(&e.refine_schema(&org, &schema_id, &sample, expected.as_ref())?)?;
                }
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_BAND_FAILED),
        Err(e) => {
            eprintln!("{}", json!({"error": {"kind": e.kind, "message": e.message}}));
            ExitCode::from(e.code)
        }
    }
}
