//! Subcommand implementations. Each writes human-readable progress to `log`
//! and returns a typed result so the binary and the tests share one path.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use emovox_core::corpus::{fixture_texts, generate_corpus, SideTable, EMOTION_NAMES, TARGET_SPEAKER};
use emovox_core::eval::{transfer_eval, EvalContext, TransferReport};
use emovox_core::model::{synthesize, Model, ModelConfig, Synthesis};
use emovox_core::training::{Checkpoint, StepMetrics, TrainConfig, Trainer};

use crate::checkpoint::{check_resume_compatible, load_checkpoint, save_checkpoint};
use crate::config::RunConfigFile;
use crate::error::{CliError, IoContext, Result};
use crate::format::{read_corpus, write_corpus, write_mel};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.evx";
pub const RUN_CONFIG_FILE: &str = "config.toml";

/// Fixture texts per emotion in the transfer evaluation.
pub const FIXTURES_PER_EMOTION: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenSummary {
    pub train: usize,
    pub validation: usize,
    pub side_table: usize,
}

pub fn gen(cfg: &RunConfigFile, out_dir: &Path, log: &mut dyn Write) -> Result<GenSummary> {
    let corpus_cfg = cfg.corpus_config();
    let (corpus, side) = generate_corpus(&corpus_cfg)?;
    write_corpus(out_dir, &corpus, &side, &corpus_cfg)?;
    let summary = GenSummary {
        train: corpus.train.len(),
        validation: corpus.validation.len(),
        side_table: side.len(),
    };
    let _ = writeln!(
        log,
        "wrote {} utterances ({} train, {} validation) and {} side-table entries to {}",
        corpus.len(),
        summary.train,
        summary.validation,
        summary.side_table,
        out_dir.display()
    );
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Base,
    /// Ten tokens, four attention heads, no emotion classifier loss.
    M2,
}

impl Variant {
    pub fn apply(self, model: &mut ModelConfig, train: &mut TrainConfig) {
        if self == Variant::M2 {
            model.num_tokens = 10;
            model.attention_heads_token = 4;
            train.alpha = 0.0;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub config: RunConfigFile,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub variant: Variant,
    /// Progress line interval; 0 disables progress output.
    pub log_every: usize,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("checkpoint-{step:07}.evx"))
}

/// Keeps the metrics lines up to and including `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<String> {
    if !path.exists() {
        return Ok(String::new());
    }
    let text = fs::read_to_string(path).at(path)?;
    let mut kept = String::new();
    for line in text.lines() {
        let s: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CliError::data(path, format!("bad metrics line `{line}`")))?;
        if s <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

pub fn train(opts: &TrainOptions, log: &mut dyn Write) -> Result<Checkpoint> {
    let mut model_cfg = opts.config.model_config();
    let mut train_cfg = opts.config.train_config();
    opts.variant.apply(&mut model_cfg, &mut train_cfg);
    model_cfg.validate()?;
    train_cfg.validate()?;

    let data = read_corpus(&opts.data_dir)?;
    if data.config.num_phonemes > model_cfg.num_phonemes {
        return Err(CliError::Config(format!(
            "corpus has {} phonemes but model.num_phonemes = {}",
            data.config.num_phonemes, model_cfg.num_phonemes
        )));
    }
    if data.config.mel_bins != model_cfg.mel_bins {
        return Err(CliError::Config(format!(
            "corpus has {} mel bins but model.mel_bins = {}",
            data.config.mel_bins, model_cfg.mel_bins
        )));
    }

    let mut trainer = match &opts.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            check_resume_compatible(&ckpt, &model_cfg, &train_cfg)?;
            Trainer::resume(&ckpt, train_cfg.clone())?
        }
        None => Trainer::new(Model::new(model_cfg.clone(), train_cfg.seed)?, train_cfg.clone())?,
    };

    fs::create_dir_all(&opts.out_dir).at(&opts.out_dir)?;
    let mut effective = opts.config.clone();
    effective.model = model_cfg.into();
    effective.train = train_cfg.clone().into();
    let cfg_path = opts.out_dir.join(RUN_CONFIG_FILE);
    fs::write(&cfg_path, effective.to_toml()?).at(&cfg_path)?;

    let metrics_path = opts.out_dir.join(METRICS_FILE);
    let kept = truncate_metrics(&metrics_path, trainer.step())?;
    let file = File::create(&metrics_path).at(&metrics_path)?;
    let mut metrics = BufWriter::new(file);
    metrics.write_all(kept.as_bytes()).at(&metrics_path)?;

    let _ = writeln!(
        log,
        "training {} items from step {} to {}",
        data.corpus.train.len(),
        trainer.step(),
        train_cfg.total_steps
    );
    let mut failure: Option<CliError> = None;
    let mut observe = |m: &StepMetrics, t: &Trainer| -> emovox_core::Result<()> {
        let result = (|| -> Result<()> {
            writeln!(metrics, "{}", m.csv_line()).at(&metrics_path)?;
            if opts.log_every > 0 && m.step.is_multiple_of(opts.log_every) {
                let _ = writeln!(
                    log,
                    "step {} total {:.4} reco {:.4} l_ec {:.4} l_dur {:.4}",
                    m.step, m.total, m.reco_sum, m.l_ec, m.l_dur
                );
            }
            let every = t.config().checkpoint_every;
            if every > 0 && m.step.is_multiple_of(every) && m.step < t.config().total_steps {
                metrics.flush().at(&metrics_path)?;
                save_checkpoint(&checkpoint_path(&opts.out_dir, t.step()), &t.checkpoint())?;
            }
            Ok(())
        })();
        result.map_err(|e| {
            failure = Some(e);
            emovox_core::Error::input("training aborted")
        })
    };
    let outcome = trainer.run(&data.corpus.train, &mut observe);
    if let Some(e) = failure {
        return Err(e);
    }
    outcome?;
    metrics.flush().at(&metrics_path)?;

    let ckpt = trainer.checkpoint();
    let final_path = opts.out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_path, &ckpt)?;
    let _ = writeln!(log, "wrote {}", final_path.display());
    Ok(ckpt)
}

/// Phoneme ids separated by whitespace or commas.
pub fn parse_phonemes(text: &str) -> Result<Vec<usize>> {
    let ids = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| CliError::Usage(format!("`{t}` is not a phoneme id")))
        })
        .collect::<Result<Vec<usize>>>()?;
    if ids.is_empty() {
        return Err(CliError::Usage("no phoneme ids given".into()));
    }
    Ok(ids)
}

/// An emotion name or a numeric token id.
pub fn parse_emotion(text: &str) -> Result<usize> {
    if let Ok(id) = text.parse() {
        return Ok(id);
    }
    let lower = text.to_ascii_lowercase();
    emovox_core::corpus::emotion_id(&lower).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown emotion `{text}`; valid names are {}",
            EMOTION_NAMES.join(", ")
        ))
    })
}

pub fn synth(
    ckpt: &Path,
    phonemes: &[usize],
    speaker: usize,
    emotion: usize,
    out: &Path,
    log: &mut dyn Write,
) -> Result<Synthesis> {
    let model = load_checkpoint(ckpt)?.to_model()?;
    let syn = synthesize(&model, phonemes, speaker, emotion)?;
    write_mel(out, &syn.mel)?;
    let _ = writeln!(log, "{} frames", syn.mel.rows());
    Ok(syn)
}

pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_CSV: &str = "transfer.csv";
pub const CALIBRATION_CSV: &str = "calibration.csv";
pub const CONFUSION_CSV: &str = "confusion.csv";

fn rows_csv(rows: &[emovox_core::eval::TransferRow]) -> String {
    let mut out = String::from("emotion,emo_acc,spk_acc,n\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            EMOTION_NAMES[r.emotion],
            r.emotion_accuracy(),
            r.speaker_accuracy(),
            r.n
        );
    }
    out
}

pub fn confusion_csv(report: &TransferReport) -> String {
    let n = report.confusion.counts.first().map_or(0, Vec::len);
    let mut out = String::from("emotion");
    for t in 0..n {
        let _ = write!(out, ",token{t}");
    }
    out.push('\n');
    for (e, row) in report.confusion.counts.iter().enumerate() {
        out.push_str(EMOTION_NAMES[e]);
        for c in row {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

pub fn eval(
    ckpt_path: &Path,
    data_dir: &Path,
    report_dir: &Path,
    target_speaker: usize,
    log: &mut dyn Write,
) -> Result<TransferReport> {
    let ckpt = load_checkpoint(ckpt_path)?;
    let model = ckpt.to_model()?;
    let data = read_corpus(data_dir)?;
    let missing_side = data.side_table.is_none();
    let side = data.side_table.unwrap_or_else(SideTable::default);
    let fixtures = fixture_texts(&data.config, FIXTURES_PER_EMOTION)?;
    let ctx = EvalContext {
        validation: &data.corpus.validation,
        side_table: &side,
        trained_steps: ckpt.step,
    };
    let report = transfer_eval(&model, &fixtures, target_speaker, &ctx)?;

    let mut text = String::new();
    if missing_side {
        text.push_str("WARNING: no side table; calibration rows for unlabeled speakers are unavailable\n");
    }
    text.push_str(&report.to_text());
    fs::create_dir_all(report_dir).at(report_dir)?;
    for (name, body) in [
        (REPORT_TEXT, text.clone()),
        (REPORT_CSV, report.to_csv()),
        (CALIBRATION_CSV, rows_csv(&report.calibration)),
        (CONFUSION_CSV, confusion_csv(&report)),
    ] {
        let path = report_dir.join(name);
        fs::write(&path, body).at(&path)?;
    }
    let _ = write!(log, "{text}");
    Ok(report)
}

/// Effective token embeddings (`tanh` of the stored table).
pub fn token_table(model: &Model) -> Vec<Vec<f64>> {
    let id = model.layout().tokens;
    let t = model.params().get(id);
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|x| x.tanh()).collect())
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn inspect_tokens(ckpt: &Path, log: &mut dyn Write) -> Result<String> {
    let model = load_checkpoint(ckpt)?.to_model()?;
    let tokens = token_table(&model);
    let mut out = String::new();
    let _ = writeln!(out, "{} tokens of width {}", tokens.len(), tokens.first().map_or(0, Vec::len));
    let _ = write!(out, "{:>3} {:<9} {:>8} ", "id", "emotion", "norm");
    for j in 0..tokens.len() {
        let _ = write!(out, " {:>6}", format!("cos{j}"));
    }
    out.push('\n');
    for (i, a) in tokens.iter().enumerate() {
        let name = EMOTION_NAMES.get(i).copied().unwrap_or("-");
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let _ = write!(out, "{i:>3} {name:<9} {norm:>8.4} ");
        for b in &tokens {
            let _ = write!(out, " {:>6.3}", cosine(a, b));
        }
        out.push('\n');
    }
    let _ = write!(log, "{out}");
    Ok(out)
}

pub const DEFAULT_TARGET_SPEAKER: usize = TARGET_SPEAKER;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phoneme_lists() {
        assert_eq!(parse_phonemes("3 1 4").unwrap(), [3, 1, 4]);
        assert_eq!(parse_phonemes("3,1, 4\n").unwrap(), [3, 1, 4]);
        assert!(matches!(parse_phonemes(""), Err(CliError::Usage(_))));
        assert!(matches!(parse_phonemes("3 x"), Err(CliError::Usage(_))));
        assert!(matches!(parse_phonemes("-1"), Err(CliError::Usage(_))));
    }

    #[test]
    fn emotion_names_and_ids() {
        for (i, name) in EMOTION_NAMES.iter().enumerate() {
            assert_eq!(parse_emotion(name).unwrap(), i);
            assert_eq!(parse_emotion(&i.to_string()).unwrap(), i);
        }
        assert_eq!(parse_emotion("Angry").unwrap(), 3);
        let err = parse_emotion("joyful").unwrap_err().to_string();
        assert!(err.contains("neutral, happy, sad, angry, surprise, scare, hate"), "{err}");
    }

    #[test]
    fn m2_variant_settings() {
        let mut m = ModelConfig::desk();
        let mut t = TrainConfig::desk();
        Variant::Base.apply(&mut m, &mut t);
        assert_eq!((m.num_tokens, t.alpha), (7, 0.1));
        Variant::M2.apply(&mut m, &mut t);
        assert_eq!((m.num_tokens, m.attention_heads_token, t.alpha), (10, 4, 0.0));
    }

    #[test]
    fn metrics_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        assert_eq!(truncate_metrics(&p, 3).unwrap(), "");
        fs::write(&p, "1,a\n2,b\n3,c\n4,d\n").unwrap();
        assert_eq!(truncate_metrics(&p, 2).unwrap(), "1,a\n2,b\n");
        fs::write(&p, "junk\n").unwrap();
        assert!(matches!(truncate_metrics(&p, 2), Err(CliError::Data { .. })));
    }

    #[test]
    fn cosine_of_parallel_and_orthogonal() {
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
    }
}
