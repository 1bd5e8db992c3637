//! Command-line front end: `eval` and `forge` subcommand trees.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 run-level
//! failure (quarantined tasks, unreachable backend, broken sandbox),
//! 3 internal error.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::codeblock::SignatureTable;
use crate::config::{BackendLayer, ConfigError, ConfigLayer, HarnessConfig};
use crate::digest::{file_digest, write_atomic};
use crate::forge::{self, CorpusItem, DatasetSample, DialogueItem, DialogueLimits, ForgeError, StageReport};
use crate::gateway::{BackendConfig, Gateway, GatewayError};
use crate::library::PlotLibrary;
use crate::metrics::{render_report, JudgeScores, ReportArtifact, ReportFormat};
use crate::prompts::PromptSet;
use crate::sandbox::{Executor, FakeExecutor, ProcessExecutor, SandboxError};
use crate::selfdebug::{run_protocol, EngineConfig, EngineError};
use crate::task_store::{load_run, load_tasks, RunStore, StoreError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUN_FAILURE: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "plotbench", version, propagate_version = true, about = "Evaluate plotting-code generators and build plotting datasets")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parallel workers for backend calls and executions
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Per-execution wall-clock limit in seconds
    #[arg(long, global = true)]
    timeout: Option<f64>,
    #[arg(short, long, global = true)]
    verbose: bool,
    /// Scripted executor table (JSON) used instead of the runner
    #[arg(long, global = true, value_name = "SCRIPT")]
    fake_executor: Option<PathBuf>,
    /// Command line that starts the runner shim
    #[arg(long, global = true)]
    runner: Option<String>,
    /// Do not save figures that were shown but never saved
    #[arg(long, global = true)]
    no_autocapture: bool,
    /// Directory of prompt template overrides
    #[arg(long, global = true)]
    prompts: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Benchmark evaluation
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Dataset construction stages
    #[command(subcommand)]
    Forge(ForgeCommand),
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Default evaluation: one generation per task
    Run {
        #[arg(long)]
        tasks: PathBuf,
        /// Backend: scripted:<file>, replay:<dir>, or an http(s) URL
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Self-debug rounds to run right away
        #[arg(long, default_value_t = 0)]
        rounds: u32,
        /// Print the plan without executing
        #[arg(long)]
        dry_run: bool,
    },
    /// Run or resume self-debug rounds on an existing run
    Selfdebug {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        rounds: Option<u32>,
        /// Task file the run was created from (checked against the run)
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Render metrics for a run
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "text")]
        format: String,
        /// Per-task judge scores (JSON)
        #[arg(long)]
        judge: Option<PathBuf>,
        /// Output file (json, text) or directory (csv); stdout if absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct StageIo {
    #[arg(long = "in", value_name = "JSONL")]
    input: PathBuf,
    #[arg(long, value_name = "JSONL")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum ForgeCommand {
    /// Keep corpus items that import a wanted library
    Filter {
        #[command(flatten)]
        io: StageIo,
        /// Comma-separated library tags
        #[arg(long, value_delimiter = ',', default_value = "matplotlib,seaborn,plotly,bokeh,altair")]
        libraries: Vec<String>,
    },
    /// Extract standalone blocks from edu items with the extraction prompt
    Extract {
        #[command(flatten)]
        io: StageIo,
        #[arg(long)]
        backend: Option<String>,
    },
    /// Rebuild runnable scripts for table-backed items
    Reconstruct {
        #[command(flatten)]
        io: StageIo,
    },
    /// Execute samples and keep those that render a plot
    Validate {
        #[command(flatten)]
        io: StageIo,
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
    /// Subsample matplotlib to the largest other library
    Balance {
        #[command(flatten)]
        io: StageIo,
    },
    /// Generate and assemble instructions for accepted samples
    Instructions {
        #[command(flatten)]
        io: StageIo,
        #[arg(long)]
        backend: Option<String>,
        /// Validation work root, for attaching rendered images
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
    /// Drop over-long dialogues
    Dialogues {
        #[command(flatten)]
        io: StageIo,
        #[arg(long)]
        max_turns: Option<usize>,
        #[arg(long)]
        max_chars: Option<usize>,
    },
}

/// An error with the exit code it maps to.
#[derive(Debug)]
struct Exit {
    code: i32,
    message: String,
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn fail(code: i32, message: impl Into<String>) -> anyhow::Error {
    Exit {
        code,
        message: message.into(),
    }
    .into()
}

fn gateway_code(e: &GatewayError) -> i32 {
    match e {
        GatewayError::Config(_) => EXIT_USAGE,
        GatewayError::InvalidDialogue(_) | GatewayError::Cache(_) => EXIT_INTERNAL,
        _ => EXIT_RUN_FAILURE,
    }
}

fn store_code(e: &StoreError) -> i32 {
    match e {
        StoreError::Conflict { .. } | StoreError::Corruption(_) => EXIT_RUN_FAILURE,
        StoreError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
        StoreError::Io { .. } => EXIT_INTERNAL,
        _ => EXIT_USAGE,
    }
}

/// Exit code for an error chain: the first recognised cause decides.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if cause.is::<ConfigError>() || cause.is::<clap::Error>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<GatewayError>() {
            return gateway_code(e);
        }
        if let Some(e) = cause.downcast_ref::<StoreError>() {
            return store_code(e);
        }
        if let Some(e) = cause.downcast_ref::<EngineError>() {
            return match e {
                EngineError::Backend { source, .. } => gateway_code(source),
                EngineError::TaskDrift { .. } | EngineError::ProtocolMisuse(_) => EXIT_USAGE,
                EngineError::Store(s) => store_code(s),
                EngineError::Sandbox(_) => EXIT_RUN_FAILURE,
            };
        }
        if let Some(e) = cause.downcast_ref::<ForgeError>() {
            return match e {
                ForgeError::Backend { source, .. } => gateway_code(source),
                ForgeError::Sandbox(_) => EXIT_RUN_FAILURE,
                ForgeError::WrongProvenance { .. } | ForgeError::Io { .. } => EXIT_USAGE,
                _ => EXIT_INTERNAL,
            };
        }
        if let Some(e) = cause.downcast_ref::<SandboxError>() {
            return match e {
                SandboxError::InvalidRequest(_) => EXIT_USAGE,
                _ => EXIT_RUN_FAILURE,
            };
        }
    }
    EXIT_INTERNAL
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let level = if cli.global.verbose { "debug" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    }
}

fn flag_layer(global: &GlobalArgs, backend: Option<&str>) -> ConfigLayer {
    let mut layer = ConfigLayer {
        seed: global.seed,
        workers: global.workers,
        runner: global.runner.clone(),
        fake_executor: global.fake_executor.clone(),
        autocapture: global.no_autocapture.then_some(false),
        backend: BackendLayer {
            spec: backend.map(str::to_string),
            ..Default::default()
        },
        ..Default::default()
    };
    layer.limits.timeout_s = global.timeout;
    layer.paths.prompts = global.prompts.clone();
    layer
}

fn resolve_config(global: &GlobalArgs, backend: Option<&str>) -> Result<HarnessConfig> {
    let mut layers = Vec::new();
    if let Some(path) = &global.config {
        layers.push(ConfigLayer::from_file(path)?);
    }
    layers.push(ConfigLayer::from_env(|k| std::env::var(k).ok()));
    layers.push(flag_layer(global, backend));
    Ok(HarnessConfig::resolve(&layers)?)
}

fn prompts(config: &HarnessConfig) -> Result<PromptSet> {
    match &config.paths.prompts {
        Some(dir) => PromptSet::load_overrides(dir)
            .with_context(|| format!("loading prompt overrides from {}", dir.display()))
            .map_err(|e| fail(EXIT_USAGE, format!("{e:#}"))),
        None => Ok(PromptSet::default()),
    }
}

fn gateway(config: &HarnessConfig) -> Result<Gateway> {
    let backend = config
        .backend
        .clone()
        .ok_or_else(|| fail(EXIT_USAGE, "no backend configured (use --backend or MODEL_BASE_URL)"))?;
    Ok(Gateway::from_config(backend)?)
}

fn executor(config: &HarnessConfig) -> Result<Arc<dyn Executor>> {
    if let Some(script) = &config.fake_executor {
        let fake = FakeExecutor::from_file(script)
            .map_err(|e| fail(EXIT_USAGE, format!("loading fake executor: {e}")))?;
        return Ok(Arc::new(fake));
    }
    if let Some(line) = &config.runner {
        let process = ProcessExecutor::from_command_line(line)
            .map_err(|e| fail(EXIT_USAGE, format!("runner command: {e}")))?
            .with_autocapture(config.autocapture);
        return Ok(Arc::new(process));
    }
    Err(fail(EXIT_USAGE, "no executor configured (use --runner or --fake-executor)"))
}

fn engine_config(config: &HarnessConfig, rounds: u32) -> Result<EngineConfig> {
    Ok(EngineConfig {
        rounds,
        workers: config.workers,
        limits: config.limits,
        prompts: prompts(config)?,
        ..EngineConfig::default()
    })
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Eval(cmd) => eval(&cli.global, cmd),
        Command::Forge(cmd) => forge_stage(&cli.global, cmd),
    }
}

fn describe_backend(backend: Option<&BackendConfig>) -> String {
    match backend {
        Some(b) => format!("{:?}", b.kind).to_lowercase(),
        None => "none".into(),
    }
}

fn print_plan(tasks: usize, rounds: u32, config: &HarnessConfig) {
    println!("tasks: {tasks}");
    println!("rounds: {rounds}");
    println!("backend: {}", describe_backend(config.backend.as_ref()));
    println!(
        "limits: timeout {}s, grace {}s, max output {} bytes",
        config.limits.timeout_s, config.limits.grace_s, config.limits.max_output_bytes
    );
    println!("workers: {}", config.workers);
}

/// Run the protocol and print a one-line summary; quarantine means exit 2.
fn drive(store: &mut RunStore, tasks_digest: &str, config: &HarnessConfig, rounds: u32) -> Result<i32> {
    let tasks = store.tasks()?;
    let gateway = gateway(config)?;
    let executor = executor(config)?;
    let engine = engine_config(config, rounds)?;
    let run = run_protocol(&tasks, tasks_digest, &gateway, executor.as_ref(), store, &engine)?;
    let frontier: Vec<String> = run.state.failed_sets.iter().map(|s| s.len().to_string()).collect();
    println!(
        "run {}: {} task(s), {} round(s), unsolved after each round: [{}]",
        store.dir().display(),
        tasks.len(),
        rounds,
        frontier.join(", ")
    );
    if run.quarantined.is_empty() {
        Ok(EXIT_OK)
    } else {
        for q in &run.quarantined {
            eprintln!("quarantined {} (attempt {}): {}", q.task_id, q.attempt_index, q.reason);
        }
        Ok(EXIT_RUN_FAILURE)
    }
}

fn eval(global: &GlobalArgs, cmd: EvalCommand) -> Result<i32> {
    match cmd {
        EvalCommand::Run {
            tasks,
            backend,
            out,
            rounds,
            dry_run,
        } => {
            let config = resolve_config(global, backend.as_deref())?;
            if dry_run {
                let loaded = load_tasks(&tasks)?;
                print_plan(loaded.len(), rounds, &config);
                return Ok(EXIT_OK);
            }
            let backend_digest = config
                .backend
                .as_ref()
                .map(BackendConfig::digest)
                .ok_or_else(|| fail(EXIT_USAGE, "no backend configured (use --backend or MODEL_BASE_URL)"))?;
            let (mut store, _) = RunStore::create(&out, &tasks, backend_digest, config.limits)?;
            let digest = store.manifest()?.task_file_digest;
            drive(&mut store, &digest, &config, rounds)
        }
        EvalCommand::Selfdebug {
            run,
            rounds,
            tasks,
            backend,
            dry_run,
        } => {
            let config = resolve_config(global, backend.as_deref())?;
            let rounds = rounds.unwrap_or(config.rounds);
            let mut store = RunStore::open(&run)?;
            let manifest = store.manifest()?;
            let digest = match &tasks {
                Some(path) => file_digest(path).with_context(|| format!("reading {}", path.display()))?,
                None => manifest.task_file_digest.clone(),
            };
            if dry_run {
                print_plan(store.tasks()?.len(), rounds, &config);
                println!("rounds completed: {}", manifest.rounds_completed);
                return Ok(EXIT_OK);
            }
            if let Some(b) = &config.backend {
                if b.digest() != manifest.backend_config_digest {
                    return Err(fail(
                        EXIT_USAGE,
                        "backend generation settings differ from the ones this run was started with",
                    ));
                }
            }
            drive(&mut store, &digest, &config, rounds)
        }
        EvalCommand::Report {
            run,
            format,
            judge,
            out,
        } => {
            let format: ReportFormat = format.parse().map_err(|e| fail(EXIT_USAGE, format!("{e}")))?;
            let state = load_run(&run)?;
            let scores = match &judge {
                Some(path) => Some(JudgeScores::from_file(path).map_err(|e| fail(EXIT_USAGE, e.to_string()))?),
                None => None,
            };
            let artifact = render_report(&state, scores.as_ref(), format)?;
            write_artifact(&artifact, out.as_deref())?;
            Ok(EXIT_OK)
        }
    }
}

fn write_artifact(artifact: &ReportArtifact, out: Option<&Path>) -> Result<()> {
    match (artifact, out) {
        (_, None) => print!("{}", artifact.to_text()),
        (ReportArtifact::Document(text), Some(path)) => {
            write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?
        }
        (ReportArtifact::Tables(tables), Some(dir)) => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, body) in tables {
                let path = dir.join(name);
                write_atomic(&path, body.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}

fn emit_report(report: &StageReport) {
    println!("{}", serde_json::to_string(report).expect("stage report serializes"));
}

fn forge_stage(global: &GlobalArgs, cmd: ForgeCommand) -> Result<i32> {
    let needs_backend = match &cmd {
        ForgeCommand::Extract { backend, .. } | ForgeCommand::Instructions { backend, .. } => backend.as_deref(),
        _ => None,
    };
    let config = resolve_config(global, needs_backend)?;
    let report = match cmd {
        ForgeCommand::Filter { io, libraries } => {
            let wanted = libraries
                .iter()
                .map(|t| t.parse::<PlotLibrary>())
                .collect::<Result<BTreeSet<_>, _>>()
                .map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
            let table = SignatureTable::default();
            if let Some(unknown) = wanted.iter().find(|l| !table.libraries().any(|k| k == *l)) {
                return Err(fail(EXIT_USAGE, format!("no import signatures for library {:?}", unknown.tag())));
            }
            let items: Vec<CorpusItem> = forge::read_jsonl(&io.input)?;
            let (kept, report) = forge::filter_by_library(items, &wanted, &table);
            forge::write_jsonl(&io.out, &kept)?;
            report
        }
        ForgeCommand::Extract { io, .. } => {
            let items: Vec<CorpusItem> = forge::read_jsonl(&io.input)?;
            let gateway = gateway(&config)?;
            let (samples, report) = forge::extract_all(&items, &gateway, &prompts(&config)?, config.workers)?;
            forge::write_jsonl(&io.out, &samples)?;
            report
        }
        ForgeCommand::Reconstruct { io } => {
            let items: Vec<CorpusItem> = forge::read_jsonl(&io.input)?;
            let (samples, report) = forge::reconstruct_all(&items)?;
            forge::write_jsonl(&io.out, &samples)?;
            report
        }
        ForgeCommand::Validate { io, workdir } => {
            let samples: Vec<DatasetSample> = forge::read_jsonl(&io.input)?;
            let root = workdir
                .or_else(|| config.paths.workdir.clone())
                .ok_or_else(|| fail(EXIT_USAGE, "validate needs --workdir"))?;
            let executor = executor(&config)?;
            let (kept, report) = forge::validate_all(&samples, executor.as_ref(), &root, config.limits, config.workers)?;
            forge::write_jsonl(&io.out, &kept)?;
            report
        }
        ForgeCommand::Balance { io } => {
            let samples: Vec<DatasetSample> = forge::read_jsonl(&io.input)?;
            let kept = forge::balance_corpus(samples.clone(), config.seed);
            forge::write_jsonl(&io.out, &kept)?;
            forge::balance_report(&samples, &kept)
        }
        ForgeCommand::Instructions { io, workdir, .. } => {
            let samples: Vec<DatasetSample> = forge::read_jsonl(&io.input)?;
            let gateway = gateway(&config)?;
            let image_root = workdir
                .or_else(|| config.paths.workdir.clone())
                .filter(|_| gateway.config().supports_images);
            let (records, report) = forge::instructions_all(
                &samples,
                &gateway,
                &prompts(&config)?,
                image_root.as_deref(),
                config.workers,
            )?;
            forge::write_jsonl(&io.out, &records)?;
            report
        }
        ForgeCommand::Dialogues {
            io,
            max_turns,
            max_chars,
        } => {
            let limits = DialogueLimits {
                max_turns: max_turns.unwrap_or(config.dialogue.max_turns),
                max_chars: max_chars.unwrap_or(config.dialogue.max_chars),
            };
            if limits.max_turns == 0 || limits.max_chars == 0 {
                return Err(fail(EXIT_USAGE, "dialogue limits must be positive"));
            }
            let items: Vec<DialogueItem> = forge::read_jsonl(&io.input)?;
            let (kept, report) = forge::filter_dialogues(items, limits);
            forge::write_jsonl(&io.out, &kept)?;
            report
        }
    };
    emit_report(&report);
    Ok(EXIT_OK)
}
