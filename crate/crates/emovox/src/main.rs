use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use emovox::commands::{self, TrainOptions, Variant};
use emovox::config::RunConfigFile;
use emovox::{CliError, Result};

/// Emotion transfer text-to-speech on a synthetic mel corpus.
#[derive(Parser)]
#[command(name = "emovox", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    M2,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Run configuration file; the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed. Precedence: flag, then EMOVOX_SEED, then file.
    #[arg(long, env = "EMOVOX_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, manifest and side table.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train a model and write checkpoints plus a metrics log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        /// Overrides train.total_steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Progress line interval in steps; 0 is silent.
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Synthesize a mel spectrogram from phoneme ids.
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        /// Phoneme ids separated by spaces or commas.
        #[arg(long)]
        text: String,
        #[arg(long)]
        speaker: usize,
        /// Emotion name or id.
        #[arg(long)]
        emotion: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint with the oracle classifiers.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = commands::DEFAULT_TARGET_SPEAKER)]
        speaker: usize,
    },
    /// Print token norms, pairwise cosines and emotion names.
    InspectTokens {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfigFile> {
    match &args.config {
        Some(path) => RunConfigFile::load(path),
        None => RunConfigFile::parse(emovox::config::DESK_PRESET),
    }
}

fn dir_or(flag: Option<PathBuf>, fallback: &str) -> PathBuf {
    flag.unwrap_or_else(|| Path::new(fallback).to_path_buf())
}

fn run(cli: Cli) -> Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Gen { cfg, out_dir } => {
            let mut config = load_config(&cfg)?;
            if let Some(seed) = cfg.seed {
                config.corpus.seed = seed;
            }
            let dir = dir_or(out_dir, &config.paths.data_dir);
            commands::gen(&config, &dir, &mut out)?;
        }
        Command::Train {
            cfg,
            data_dir,
            out_dir,
            resume,
            variant,
            steps,
            log_every,
        } => {
            let mut config = load_config(&cfg)?;
            if let Some(seed) = cfg.seed {
                config.train.seed = seed;
            }
            if let Some(steps) = steps {
                config.train.total_steps = steps;
            }
            let opts = TrainOptions {
                data_dir: dir_or(data_dir, &config.paths.data_dir),
                out_dir: dir_or(out_dir, &config.paths.out_dir),
                config,
                resume,
                variant: match variant {
                    Some(VariantArg::M2) => Variant::M2,
                    None => Variant::Base,
                },
                log_every,
            };
            commands::train(&opts, &mut out)?;
        }
        Command::Synth {
            ckpt,
            text,
            speaker,
            emotion,
            out: path,
        } => {
            let phonemes = commands::parse_phonemes(&text)?;
            let emotion = commands::parse_emotion(&emotion)?;
            commands::synth(&ckpt, &phonemes, speaker, emotion, &path, &mut out)?;
        }
        Command::Eval {
            ckpt,
            data_dir,
            report,
            speaker,
        } => {
            commands::eval(&ckpt, &data_dir, &report, speaker, &mut out)?;
        }
        Command::InspectTokens { ckpt } => {
            commands::inspect_tokens(&ckpt, &mut out)?;
        }
    }
    out.flush().map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("emovox: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
