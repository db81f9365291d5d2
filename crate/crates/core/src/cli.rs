//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for bad input (unreadable or invalid files,
//! bad flags), 2 for internal failures.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::{info, warn};

use crate::data::load_episodes;
use crate::encoder::load_static_embeddings;
use crate::model::{load_model, save_model, EncoderState, ModelState, TrainConfig};
use crate::trainer::train;

#[derive(Debug, Parser)]
#[command(
    name = "fewshot-nlu",
    version,
    about = "Few-shot joint intent detection and slot filling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on source-domain episodes and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        /// Dev episodes for best-epoch selection; without them the final epoch is kept.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSON-lines log [default: <out>.log.jsonl]
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint on episodes, building prototypes from each support set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        /// Embedding sidecar, for models trained on precomputed embeddings.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Decode every query sample and write one JSON line per sample.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        episodes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Show the learned transition weights.
    InspectTransitions {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug)]
pub enum CliError {
    User(anyhow::Error),
    Internal(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::User(e)
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let (CliError::User(err) | CliError::Internal(err)) = &e;
            eprintln!("error: {err:#}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            train,
            dev,
            out,
            log,
        } => run_train(&config, &train, dev.as_deref(), &out, log.as_deref()),
        Command::Eval {
            model,
            episodes,
            embeddings,
            json,
        } => run_eval(&model, &episodes, embeddings.as_deref(), json),
        Command::Predict {
            model,
            episodes,
            out,
            embeddings,
        } => run_predict(&model, &episodes, &out, embeddings.as_deref()),
        Command::InspectTransitions { model, json } => run_inspect(&model, json),
    }
}

fn read_config(path: &Path) -> anyhow::Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut cfg = TrainConfig::from_json(&text)
        .with_context(|| format!("invalid config {}", path.display()))?;
    // A relative sidecar path is taken relative to the config file.
    if let Some(emb) = &cfg.embeddings {
        if emb.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.embeddings = Some(dir.join(emb));
            }
        }
    }
    Ok(cfg)
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".log.jsonl");
    PathBuf::from(name)
}

pub fn run_train(
    config: &Path,
    train_path: &Path,
    dev_path: Option<&Path>,
    out: &Path,
    log_path: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = read_config(config)?;
    let train_eps = load_episodes(train_path).map_err(anyhow::Error::from)?;
    if train_eps.is_empty() {
        return Err(anyhow::anyhow!("{} contains no episodes", train_path.display()).into());
    }
    let dev_eps = match dev_path {
        Some(p) if p.exists() => load_episodes(p).map_err(anyhow::Error::from)?,
        Some(p) => {
            warn!(
                "dev file {} not found; training without dev selection",
                p.display()
            );
            Vec::new()
        }
        None => Vec::new(),
    };

    let log_path = log_path.map_or_else(|| default_log_path(out), Path::to_path_buf);
    let mut log_file = fs::File::create(&log_path)
        .with_context(|| format!("cannot create log {}", log_path.display()))?;
    let mut log_err = None;

    let model = ModelState::new(cfg, &train_eps).map_err(anyhow::Error::from)?;
    info!(
        "training on {} episodes ({} dev) for {} epochs",
        train_eps.len(),
        dev_eps.len(),
        model.config.epochs
    );
    let outcome = train(model, &train_eps, &dev_eps, |record| {
        let line = serde_json::to_string(record).expect("record serializes");
        if let Err(e) = writeln!(log_file, "{line}") {
            log_err.get_or_insert(e);
        }
    })
    .map_err(anyhow::Error::from)?;
    if let Some(e) = log_err {
        return Err(anyhow::Error::from(e)
            .context(format!("cannot write log {}", log_path.display()))
            .into());
    }
    if outcome.history.iter().any(|r| !r.train_loss.is_finite()) {
        return Err(CliError::Internal(anyhow::anyhow!(
            "training diverged (non-finite loss)"
        )));
    }
    save_model(&outcome.model, out).map_err(anyhow::Error::from)?;
    info!(
        "wrote {} (epoch {}), log {}",
        out.display(),
        outcome.best_epoch,
        log_path.display()
    );
    Ok(())
}

/// Writes machine output to stdout; a reader that hung up early is not an error.
fn emit(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(anyhow::Error::from(e)
            .context("cannot write to stdout")
            .into()),
        _ => Ok(()),
    }
}

fn load_for_inference(model_path: &Path, embeddings: Option<&Path>) -> anyhow::Result<ModelState> {
    let model = load_model(model_path)?;
    match (&model.encoder, embeddings) {
        (EncoderState::Static { dim }, Some(path)) => {
            let sidecar = load_static_embeddings(path, *dim)?;
            Ok(model.with_embeddings(sidecar))
        }
        (EncoderState::Static { .. }, None) => {
            bail!(
                "{} was trained on precomputed embeddings; pass --embeddings",
                model_path.display()
            )
        }
        (EncoderState::Toy(_), Some(_)) => {
            bail!(
                "{} uses its own encoder; --embeddings does not apply",
                model_path.display()
            )
        }
        (EncoderState::Toy(_), None) => Ok(model),
    }
}

pub fn run_eval(
    model_path: &Path,
    episodes: &Path,
    embeddings: Option<&Path>,
    json: bool,
) -> Result<(), CliError> {
    let model = load_for_inference(model_path, embeddings)?;
    let eps = load_episodes(episodes).map_err(anyhow::Error::from)?;
    let report = model.evaluate(&eps).map_err(anyhow::Error::from)?;
    if json {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        emit(&format!("{text}\n"))
    } else {
        emit(&report.to_string())
    }
}

pub fn run_predict(
    model_path: &Path,
    episodes: &Path,
    out: &Path,
    embeddings: Option<&Path>,
) -> Result<(), CliError> {
    let model = load_for_inference(model_path, embeddings)?;
    let eps = load_episodes(episodes).map_err(anyhow::Error::from)?;
    let mut text = String::new();
    for ep in &eps {
        for p in model.predict_episode(ep).map_err(anyhow::Error::from)? {
            text.push_str(&serde_json::to_string(&p).expect("prediction serializes"));
            text.push('\n');
        }
    }
    fs::write(out, text).with_context(|| format!("cannot write {}", out.display()))?;
    Ok(())
}

pub fn run_inspect(model_path: &Path, json: bool) -> Result<(), CliError> {
    let model = load_model(model_path).map_err(anyhow::Error::from)?;
    if json {
        let text = serde_json::to_string_pretty(&model.transitions).expect("table serializes");
        emit(&format!("{text}\n"))
    } else {
        emit(&model.transitions.to_string())
    }
}
