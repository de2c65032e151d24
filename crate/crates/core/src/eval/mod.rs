//! Oracle-scored evaluation of a trained model and the gradient-check suite.

mod suite;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::corpus::{
    oracle_emotion_classify, oracle_speaker_classify, SideTable, Utterance, EMOTION_NAMES,
    NUM_EMOTIONS,
};
use crate::error::{Error, Result};
use crate::model::{emotion_attention, reference_encoder, synthesize, Model};
use crate::tape::Tape;
use crate::training::argmax;

pub use suite::{grad_check_suite, GradCheckEntry, GradCheckReport, SUITE_TOLERANCE};

/// Token weights the model assigns to a reference mel.
pub fn token_weights(model: &Model, mel: &crate::Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new(model.params());
    let mel = tape.constant(mel.clone());
    let r = reference_encoder(&mut tape, model, mel)?;
    let out = emotion_attention(&mut tape, model, r)?;
    Ok(tape.value(out.weights).to_vec())
}

/// Counts of (true emotion, argmax token) over labeled items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    /// `NUM_EMOTIONS` rows of `num_tokens` counts.
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| row.get(i).copied().unwrap_or(0))
            .sum()
    }

    /// `trace / total`.
    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

pub fn token_confusion(model: &Model, items: &[Utterance]) -> Result<ConfusionMatrix> {
    let n = model.config().num_tokens;
    let mut counts = vec![vec![0usize; n]; NUM_EMOTIONS];
    let mut labeled = 0;
    for utt in items {
        let Some(e) = utt.emotion.id() else { continue };
        if e >= NUM_EMOTIONS {
            return Err(Error::data(format!("emotion label {e} out of range")).with_utterance(&utt.utt_id));
        }
        let w = token_weights(model, &utt.mel)?;
        counts[e][argmax(&w)] += 1;
        labeled += 1;
    }
    if labeled == 0 {
        return Err(Error::input("token confusion needs at least one labeled item"));
    }
    Ok(ConfusionMatrix { counts })
}

/// Oracle hit counts for one emotion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferRow {
    pub emotion: usize,
    pub emotion_hits: usize,
    pub speaker_hits: usize,
    pub n: usize,
}

impl TransferRow {
    fn new(emotion: usize) -> Self {
        TransferRow {
            emotion,
            emotion_hits: 0,
            speaker_hits: 0,
            n: 0,
        }
    }

    pub fn emotion_accuracy(&self) -> f64 {
        ratio(self.emotion_hits, self.n)
    }

    pub fn speaker_accuracy(&self) -> f64 {
        ratio(self.speaker_hits, self.n)
    }
}

fn ratio(hits: usize, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        hits as f64 / n as f64
    }
}

/// Reference material that accompanies every transfer evaluation.
pub struct EvalContext<'a> {
    /// Held-out utterances; labeled ones feed the confusion matrix and
    /// target-speaker ones the calibration rows.
    pub validation: &'a [Utterance],
    /// True emotions of unlabeled utterances.
    pub side_table: &'a SideTable,
    /// Optimizer steps behind the parameters; zero flags the report.
    pub trained_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub target_speaker: usize,
    /// Synthesized target-speaker speech, one row per emotion.
    pub rows: Vec<TransferRow>,
    /// The same oracles on ground-truth target-speaker recordings.
    pub calibration: Vec<TransferRow>,
    pub confusion: ConfusionMatrix,
    pub untrained: bool,
}

impl TransferReport {
    fn pooled(rows: &[TransferRow]) -> TransferRow {
        rows.iter().fold(TransferRow::new(usize::MAX), |mut acc, r| {
            acc.emotion_hits += r.emotion_hits;
            acc.speaker_hits += r.speaker_hits;
            acc.n += r.n;
            acc
        })
    }

    pub fn emotion_accuracy(&self) -> f64 {
        Self::pooled(&self.rows).emotion_accuracy()
    }

    pub fn speaker_accuracy(&self) -> f64 {
        Self::pooled(&self.rows).speaker_accuracy()
    }

    /// Source-speaker validation token accuracy.
    pub fn token_accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }

    /// `emotion,emo_acc,spk_acc,n` with a header and one line per emotion.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("emotion,emo_acc,spk_acc,n\n");
        for r in &self.rows {
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

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if self.untrained {
            let _ = writeln!(out, "WARNING: parameters are untrained; scores are not meaningful");
        }
        let table = |out: &mut String, title: &str, rows: &[TransferRow]| {
            let _ = writeln!(out, "{title}");
            let _ = writeln!(out, "  {:<10} {:>8} {:>8} {:>5}", "emotion", "emo_acc", "spk_acc", "n");
            for r in rows {
                let _ = writeln!(
                    out,
                    "  {:<10} {:>8.3} {:>8.3} {:>5}",
                    EMOTION_NAMES[r.emotion],
                    r.emotion_accuracy(),
                    r.speaker_accuracy(),
                    r.n
                );
            }
            let all = Self::pooled(rows);
            let _ = writeln!(
                out,
                "  {:<10} {:>8.3} {:>8.3} {:>5}",
                "overall",
                all.emotion_accuracy(),
                all.speaker_accuracy(),
                all.n
            );
        };
        table(&mut out, &format!("transfer to speaker {}", self.target_speaker), &self.rows);
        table(&mut out, "calibration (ground-truth recordings)", &self.calibration);
        let _ = writeln!(out, "token confusion (rows: true emotion, cols: argmax token)");
        for (e, row) in self.confusion.counts.iter().enumerate() {
            let _ = write!(out, "  {:<10}", EMOTION_NAMES[e]);
            for c in row {
                let _ = write!(out, " {c:>4}");
            }
            let _ = writeln!(out);
        }
        let _ = writeln!(
            out,
            "token accuracy {:.3} ({}/{})",
            self.token_accuracy(),
            self.confusion.trace(),
            self.confusion.total()
        );
        out
    }
}

/// Synthesizes every fixture text with every emotion for `target_speaker`
/// and scores the output with both oracles. `fixtures` holds `N` texts per
/// emotion in emotion-major order; emotion `e` is rendered on its own `N`.
pub fn transfer_eval(
    model: &Model,
    fixtures: &[Vec<usize>],
    target_speaker: usize,
    ctx: &EvalContext<'_>,
) -> Result<TransferReport> {
    if fixtures.is_empty() || !fixtures.len().is_multiple_of(NUM_EMOTIONS) {
        return Err(Error::input(format!(
            "{} fixture texts do not split evenly over {NUM_EMOTIONS} emotions",
            fixtures.len()
        )));
    }
    let per_emotion = fixtures.len() / NUM_EMOTIONS;
    let mut rows = Vec::with_capacity(NUM_EMOTIONS);
    for e in 0..NUM_EMOTIONS {
        let mut row = TransferRow::new(e);
        for text in &fixtures[e * per_emotion..(e + 1) * per_emotion] {
            let syn = synthesize(model, text, target_speaker, e)?;
            row.emotion_hits += usize::from(oracle_emotion_classify(&syn.mel)? == e);
            row.speaker_hits += usize::from(oracle_speaker_classify(&syn.mel)? == target_speaker);
            row.n += 1;
        }
        rows.push(row);
    }

    let mut calibration: Vec<TransferRow> = (0..NUM_EMOTIONS).map(TransferRow::new).collect();
    for utt in ctx.validation.iter().filter(|u| u.speaker_id == target_speaker) {
        let Some(e) = utt.emotion.id().or_else(|| ctx.side_table.true_emotion(&utt.utt_id)) else {
            continue;
        };
        let row = &mut calibration[e];
        row.emotion_hits += usize::from(oracle_emotion_classify(&utt.mel)? == e);
        row.speaker_hits += usize::from(oracle_speaker_classify(&utt.mel)? == target_speaker);
        row.n += 1;
    }

    Ok(TransferReport {
        target_speaker,
        rows,
        calibration,
        confusion: token_confusion(model, ctx.validation)?,
        untrained: ctx.trained_steps == 0,
    })
}
