use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{EmotionLabel, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor applied to token weights inside the classifier log.
pub const WEIGHT_FLOOR: f64 = 1e-8;

/// Cross-entropy between one-hot labels and token weights, averaged over the
/// labeled items only. With no labeled item the result is a constant zero.
pub fn emotion_classifier_loss(
    tape: &mut Tape<'_>,
    weights: &[Var],
    labels: &[EmotionLabel],
) -> Result<Var> {
    if weights.len() != labels.len() {
        return Err(Error::Shape {
            op: "classifier loss batch",
            left: vec![weights.len()],
            right: vec![labels.len()],
        });
    }
    let mut terms = Vec::new();
    for (&w, label) in weights.iter().zip(labels) {
        let Some(id) = label.id() else { continue };
        let n = tape.value(w).len();
        if n != NUM_EMOTIONS {
            return Err(Error::config(format!(
                "{n} token weights cannot be scored against {NUM_EMOTIONS} emotion labels"
            )));
        }
        if id >= n {
            return Err(Error::Index {
                what: "emotion label",
                index: id,
                bound: n,
            });
        }
        let log_w = tape.ln_clamped(w, WEIGHT_FLOOR);
        let mut one_hot = Tensor::zeros(tape.shape(w));
        one_hot.data_mut()[id] = 1.0;
        let one_hot = tape.constant(one_hot);
        let picked = tape.mul(log_w, one_hot)?;
        terms.push(tape.sum_all(picked));
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let count = terms.len() as f64;
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t)?;
    }
    Ok(tape.scale(sum, -1.0 / count))
}

/// Mean squared error between predicted log durations and `ln(durations)`.
pub fn duration_loss(tape: &mut Tape<'_>, pred_log_durations: Var, durations: &[usize]) -> Result<Var> {
    let len = tape.value(pred_log_durations).len();
    if len != durations.len() {
        return Err(Error::Shape {
            op: "duration loss",
            left: vec![len],
            right: vec![durations.len()],
        });
    }
    if durations.contains(&0) {
        return Err(Error::input("duration targets must be at least one frame"));
    }
    let target: Vec<f64> = durations.iter().map(|&d| libm::log(d as f64)).collect();
    let target = tape.constant(Tensor::new(tape.shape(pred_log_durations).to_vec(), target)?);
    let diff = tape.sub(pred_log_durations, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

/// Mean absolute error of each stack's prediction against one target.
pub fn reconstruction_loss(tape: &mut Tape<'_>, mel_preds: &[Var], target: Var) -> Result<Vec<Var>> {
    mel_preds
        .iter()
        .map(|&p| {
            if tape.shape(p) != tape.shape(target) {
                return Err(Error::Shape {
                    op: "reconstruction loss",
                    left: tape.shape(p).to_vec(),
                    right: tape.shape(target).to_vec(),
                });
            }
            let diff = tape.sub(p, target)?;
            let abs = tape.abs(diff);
            Ok(tape.mean_all(abs))
        })
        .collect()
}

/// `Σ reco + alpha·l_ec + beta·l_dur`.
pub fn total_loss(
    tape: &mut Tape<'_>,
    reco: &[Var],
    l_ec: Var,
    l_dur: Var,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let ec = tape.scale(l_ec, alpha);
    let dur = tape.scale(l_dur, beta);
    let mut total = tape.add(ec, dur)?;
    for &r in reco {
        total = tape.add(total, r)?;
    }
    Ok(total)
}
