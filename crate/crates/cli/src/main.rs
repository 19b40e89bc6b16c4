//! `hee`: synthesise training mixtures, train the extractor, diarise, score.
//!
//! Exit status is 0 on success, 1 for user errors (bad flags, config or
//! inputs) and 2 for internal failures.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigBuilder, Resolved, Source};

/// An error caused by the invocation rather than by the program.
#[derive(Debug)]
pub struct UserError(String);

impl UserError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

#[derive(Debug, Parser)]
#[command(name = "hee", version, about = "High-resolution speaker embeddings for diarisation")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Directory for outputs, logs and the run manifest.
    #[arg(long, global = true, default_value = "hee-run")]
    pub run_dir: PathBuf,
    /// Override any configuration key, e.g. `--set train.lr=5e-4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic toy corpus and evaluation sessions.
    Toy(commands::ToyArgs),
    /// Synthesise training mixtures into shard files.
    Synth(commands::SynthArgs),
    /// Train the pooled backbone on single-speaker crops.
    Pretrain(commands::CorpusArgs),
    /// Train the high-resolution extractor on synthetic mixtures.
    Train(commands::TrainArgs),
    /// Diarise sessions given audio and voiced segments.
    Diarize(commands::DiarizeArgs),
    /// Score hypothesis RTTM against a reference.
    Score(commands::ScoreArgs),
    /// Summarise a reference RTTM.
    Stats(commands::StatsArgs),
    /// Run data-preparation ablations or the enhancer study on toy data.
    Ablate(commands::AblateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Toy(_) => "toy",
            Command::Synth(_) => "synth",
            Command::Pretrain(_) => "pretrain",
            Command::Train(_) => "train",
            Command::Diarize(_) => "diarize",
            Command::Score(_) => "score",
            Command::Stats(_) => "stats",
            Command::Ablate(_) => "ablate",
        }
    }

    /// Configuration keys set by this command's own flags.
    fn overrides(&self) -> Vec<(&'static str, String)> {
        match self {
            Command::Train(a) => a.overrides(),
            Command::Diarize(a) => a.overrides(),
            Command::Synth(a) => a.overrides(),
            _ => Vec::new(),
        }
    }
}

/// Defaults, then the file, the environment, and finally flags.
pub fn resolve(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<Resolved> {
    let mut b = ConfigBuilder::new();
    if let Some(path) = &cli.global.config {
        b.apply_file(path)?;
    }
    b.apply_env(env)?;
    if let Some(seed) = cli.global.seed {
        b.set("seed", seed.into(), Source::Flag)?;
    }
    if let Some(w) = cli.global.workers {
        b.set("workers", w.into(), Source::Flag)?;
    }
    for (key, raw) in cli.command.overrides() {
        b.set_raw(key, &raw, Source::Flag)?;
    }
    for s in &cli.global.set {
        b.apply_assignment(s)?;
    }
    b.build()
}

fn is_user_error(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        if c.is::<UserError>() {
            return true;
        }
        if let Some(io) = c.downcast_ref::<std::io::Error>() {
            return matches!(io.kind(), std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied);
        }
        match c.downcast_ref::<hee::Error>() {
            Some(hee::Error::Io(io)) => matches!(io.kind(), std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied),
            Some(e) => !matches!(e, hee::Error::NonFinite { .. } | hee::Error::Linalg(_) | hee::Error::Shape(_)),
            None => false,
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = resolve(&cli, std::env::vars()).and_then(|resolved| commands::run(&cli, &resolved));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = if is_user_error(&err) { 1 } else { 2 };
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("hee").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_beat_environment_which_beats_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        std::fs::write(&file, "train.epochs = 5\ntrain.lr = 0.1\nseed = 3\n").unwrap();
        let f = file.to_str().unwrap();
        let env = || vec![("HEE_TRAIN__EPOCHS".to_string(), "6".to_string()), ("HEE_SEED".into(), "4".into())];
        let r = resolve(&parse(&["--config", f, "train", "--pretrain"]), env()).unwrap();
        assert_eq!((r.settings.train.epochs, r.settings.train.lr, r.settings.seed), (6, 0.1, 4));
        let r = resolve(&parse(&["--config", f, "--seed", "9", "train", "--pretrain", "--epochs", "8"]), env()).unwrap();
        assert_eq!((r.settings.train.epochs, r.settings.seed), (8, 9));
        let r = resolve(&parse(&["--config", f, "--set", "train.epochs=12", "train", "--pretrain", "--epochs", "8"]), env()).unwrap();
        assert_eq!(r.settings.train.epochs, 12);
    }

    #[test]
    fn ablation_flags_are_single_key_deltas() {
        let base = resolve(&parse(&["train", "--pretrain"]), []).unwrap();
        let cut = resolve(&parse(&["train", "--pretrain", "--no-shuffle", "--no-specaug"]), []).unwrap();
        let changed: Vec<&String> = base.values.keys().filter(|k| base.values[*k] != cut.values[*k]).collect();
        assert_eq!(changed, vec!["synth.shuffle", "synth.spec_augment"]);
    }

    #[test]
    fn error_classes() {
        assert!(is_user_error(&anyhow::Error::new(UserError::new("x"))));
        assert!(is_user_error(&anyhow::Error::new(hee::Error::Config("x".into()))));
        assert!(!is_user_error(&anyhow::Error::new(hee::Error::NonFinite { step: 1, detail: "nan".into() })));
        assert!(!is_user_error(&anyhow::anyhow!("bug")));
    }
}
