//! Command-line lifecycle (prepare, train, evaluate, ablate, chat) and the
//! HTTP chat service.

pub mod commands;
pub mod config;
mod error;
pub mod server;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use nepqa_core::dialogue::load_backend;
use nepqa_core::{DialogueManager, ModelKind, RulesFile, TurnLog};

pub use error::CliError;

use commands::{Cell, Part};
use config::{require, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "nepqa", version, about = "Nepali FAQ chatbot")]
pub struct Cli {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for the split, initialization, shuffling and dropout.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Deduplicate, normalize and split a raw dataset.
    Prepare {
        /// JSON-lines or `.csv` dataset.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a CSV dataset to JSON-lines.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train one backend on prepared splits.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        model: Option<ModelKind>,
        #[arg(long, overrides_with = "no_stem")]
        stem: bool,
        #[arg(long)]
        no_stem: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Score a checkpoint on one prepared split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        part: Part,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every (model, stemming) combination.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Interactive terminal chat; `/quit` exits.
    Chat {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Append turns as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// HTTP chat API.
    Serve {
        /// Repeat to load both backends.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Backend used when a request names none; retrieval if loaded.
        #[arg(long)]
        default_backend: Option<ModelKind>,
        /// Static chat page directory served under `/ui`.
        #[arg(long)]
        ui: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn rules_file(path: Option<&Path>) -> Result<RulesFile, CliError> {
    match path {
        Some(p) => Ok(RulesFile::load(p)?),
        None => Ok(RulesFile::default()),
    }
}

fn turn_log(path: Option<&Path>) -> Result<Option<Arc<TurnLog>>, CliError> {
    path.map(|p| TurnLog::open(p).map(Arc::new).map_err(|e| CliError::io(p.display(), e)))
        .transpose()
}

fn manager(checkpoint: &Path, rules: &RulesFile, log: Option<&Arc<TurnLog>>) -> Result<DialogueManager, CliError> {
    let backend = load_backend(checkpoint)?;
    let dm = DialogueManager::new(rules, backend)?;
    Ok(match log {
        Some(l) => dm.with_log(Arc::clone(l)),
        None => dm,
    })
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json<T: serde::Serialize>(value: &T) {
    emit(&format!("{}\n", serde_json::to_string_pretty(value).expect("report serializes")));
}

/// Executes a parsed command.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Prepare { input, out } => {
            let input = require(input.or(cfg.dataset.clone()), "--input")?;
            let out = require(out.or(cfg.data_dir.clone()), "--out")?;
            let m = commands::prepare(&input, &out, &cfg)?;
            print_json(&m);
        }
        Command::Convert { input, output } => {
            let n = commands::convert(&input, &output)?;
            eprintln!("wrote {n} records to {}", output.display());
        }
        Command::Train {
            data,
            out,
            model,
            stem,
            no_stem,
            epochs,
            lr,
            batch_size,
        } => {
            if let Some(k) = model {
                cfg.model_kind = k;
            }
            if stem {
                cfg.pipeline.apply_stemming = true;
            }
            if no_stem {
                cfg.pipeline.apply_stemming = false;
            }
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            if let Some(l) = lr {
                cfg.training.learning_rate = l;
            }
            if let Some(b) = batch_size {
                cfg.training.batch_size = b;
            }
            cfg.training.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let data = require(data.or(cfg.data_dir.clone()), "--data")?;
            let out = require(out.or(cfg.output_dir.clone()), "--out")?;
            let summary = commands::train(&data, &out, &cfg)?;
            print_json(&summary);
        }
        Command::Evaluate {
            checkpoint,
            data,
            part,
            out,
        } => {
            let data = require(data.or(cfg.data_dir.clone()), "--data")?;
            let report = commands::evaluate(&checkpoint, &data, part, cfg.bleu_max_n)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Some(path) = out {
                std::fs::write(&path, format!("{text}\n")).map_err(|e| CliError::io(path.display(), e))?;
            }
            emit(&format!("{text}\n"));
        }
        Command::Ablate { data, out, epochs } => {
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            cfg.training.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let data = require(data.or(cfg.data_dir.clone()), "--data")?;
            let out = require(out.or(cfg.output_dir.clone()), "--out")?;
            let cells: Vec<Cell> = [ModelKind::Retrieval, ModelKind::Generative]
                .into_iter()
                .flat_map(|model_kind| [false, true].map(|stemming| Cell { model_kind, stemming }))
                .collect();
            let report = commands::ablate(&data, &out, &cfg, &cells)?;
            emit(&commands::render_ablation(&report));
        }
        Command::Chat { checkpoint, rules, log } => {
            let rules = rules_file(rules.as_deref().or(cfg.rules.as_deref()))?;
            let log = turn_log(log.as_deref())?;
            let dm = manager(&checkpoint, &rules, log.as_ref())?;
            let stdin = std::io::stdin();
            commands::chat_loop(&dm, stdin.lock(), std::io::stdout()).map_err(|e| CliError::io("terminal", e))?;
        }
        Command::Serve {
            checkpoint,
            rules,
            addr,
            default_backend,
            ui,
            log,
        } => {
            let rules = rules_file(rules.as_deref().or(cfg.rules.as_deref()))?;
            let log = turn_log(log.as_deref())?;
            let mut managers = BTreeMap::new();
            let mut first = None;
            for path in &checkpoint {
                let dm = manager(path, &rules, log.as_ref())?;
                let kind = dm.backend().kind();
                first.get_or_insert(kind);
                if managers.insert(kind, dm).is_some() {
                    return Err(CliError::Usage(format!("two {kind} checkpoints given")));
                }
            }
            let fallback_kind = if managers.contains_key(&ModelKind::Retrieval) {
                ModelKind::Retrieval
            } else {
                first.expect("at least one checkpoint")
            };
            let default_kind = default_backend.unwrap_or(fallback_kind);
            let state = server::AppState::new(managers, default_kind)?;
            server::serve(state, addr, ui)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
