use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{EmotionLabel, Utterance};
use crate::error::{Error, Result};
use crate::nn::{
    attend_values, attention, embedding_lookup, layer_norm, lconv, scln, sinusoidal_positions,
    LAYER_NORM_EPS,
};
use crate::tape::{ConvGeom, Tape, Var};
use crate::tensor::Tensor;

use super::{Gru, Model};

pub struct EmotionOutput {
    /// `[num_tokens]`, averaged over heads.
    pub weights: Var,
    pub head_weights: Vec<Var>,
    /// `[token_dim]`
    pub embedding: Var,
}

pub struct DurationOutput {
    /// `[L × d_model]`, the representation that gets upsampled.
    pub u: Var,
    /// `[L]`
    pub log_durations: Var,
}

pub struct TrainOutputs {
    /// One `[F × mel_bins]` prediction per decoder stack.
    pub mel_preds: Vec<Var>,
    pub log_durations: Var,
    pub token_weights: Var,
}

/// How decoder normalization is conditioned.
#[derive(Debug, Clone, Copy)]
pub enum DecoderConditioning {
    /// Speaker-conditional layer norm on the given `[d_spk]` embedding.
    Speaker(Var),
    /// Plain standardization with no affine terms.
    Unconditional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    /// Last stack's prediction, `[F × mel_bins]`.
    pub mel: Tensor,
    pub durations: Vec<usize>,
}

/// `[L]` phoneme ids → `[L × d_model]`.
pub fn text_encoder(tape: &mut Tape<'_>, model: &Model, phoneme_ids: &[usize]) -> Result<Var> {
    if phoneme_ids.is_empty() {
        return Err(Error::input("text encoder needs at least one phoneme"));
    }
    let d = model.config.d_model;
    let emb = embedding_lookup(tape, phoneme_ids, model.layout.phonemes)?;
    let pos = tape.constant(sinusoidal_positions(phoneme_ids.len(), d)?);
    let mut h = tape.add(emb, pos)?;
    for block in &model.layout.encoder {
        h = block.forward(tape, h)?;
    }
    Ok(h)
}

/// `[F × mel_bins]` → `[token_dim]`, for any `F ≥ 1`.
pub fn reference_encoder(tape: &mut Tape<'_>, model: &Model, mel: Var) -> Result<Var> {
    let bins = model.config.mel_bins;
    let frames = match tape.shape(mel) {
        [f, b] if *b == bins => *f,
        other => {
            return Err(Error::Shape {
                op: "reference encoder mel",
                left: other.to_vec(),
                right: vec![0, bins],
            })
        }
    };
    if frames == 0 {
        return Err(Error::input("reference mel has no frames"));
    }
    let (mut height, mut width, mut channels) = (frames, bins, 1);
    let mut x = tape.reshape(mel, &[frames * bins, 1])?;
    for conv in &model.layout.reference.convs {
        let geom = ConvGeom {
            height,
            width,
            channels,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let cols = tape.im2col(x, geom)?;
        let y = conv.forward(tape, cols)?;
        x = tape.relu(y);
        height = geom.out_height();
        width = geom.out_width();
        channels = tape.shape(x)[1];
    }
    let seq = tape.reshape(x, &[height, width * channels])?;
    let state = gru_final_state(tape, &model.layout.reference.gru, seq)?;
    let out = model.layout.reference.proj.forward(tape, state)?;
    tape.reshape(out, &[model.config.token_dim])
}

/// Runs the GRU over the rows of `seq` from a zero state; returns `[1 × h]`.
fn gru_final_state(tape: &mut Tape<'_>, gru: &Gru, seq: Var) -> Result<Var> {
    let steps = tape.shape(seq)[0];
    let w = gru.width;
    let xs = gru.input.forward(tape, seq)?;
    let mut h = tape.constant(Tensor::zeros(&[1, w]));
    for t in 0..steps {
        let xt = tape.slice_rows(xs, t, 1)?;
        let hh = gru.hidden.forward(tape, h)?;
        let gate = |tape: &mut Tape<'_>, k: usize| -> Result<(Var, Var)> {
            Ok((tape.slice_cols(xt, k * w, w)?, tape.slice_cols(hh, k * w, w)?))
        };
        let (xz, hz) = gate(tape, 0)?;
        let (xr, hr) = gate(tape, 1)?;
        let (xn, hn) = gate(tape, 2)?;
        let z = tape.add(xz, hz)?;
        let z = tape.sigmoid(z);
        let r = tape.add(xr, hr)?;
        let r = tape.sigmoid(r);
        let rn = tape.mul(r, hn)?;
        let n = tape.add(xn, rn)?;
        let n = tape.tanh(n);
        let diff = tape.sub(h, n)?;
        let keep = tape.mul(z, diff)?;
        h = tape.add(n, keep)?;
    }
    Ok(h)
}

fn token_values(tape: &mut Tape<'_>, model: &Model) -> Var {
    let tokens = tape.param(model.layout.tokens);
    tape.tanh(tokens)
}

/// Attention of the reference embedding over `tanh(tokens)`.
pub fn emotion_attention(tape: &mut Tape<'_>, model: &Model, ref_emb: Var) -> Result<EmotionOutput> {
    let values = token_values(tape, model);
    let out = attention(tape, ref_emb, values, &model.layout.token_attention)?;
    Ok(EmotionOutput {
        weights: out.weights,
        head_weights: out.head_weights,
        embedding: out.context,
    })
}

/// The attention value path with every head's weights replaced by `weights`.
pub fn emotion_attention_forced(tape: &mut Tape<'_>, model: &Model, weights: &Tensor) -> Result<Var> {
    let n = model.config.num_tokens;
    if weights.numel() != n {
        return Err(Error::Shape {
            op: "forced token weights",
            left: weights.shape().to_vec(),
            right: vec![n],
        });
    }
    let values = token_values(tape, model);
    let w = tape.constant(weights.clone());
    let heads = vec![w; model.config.attention_heads_token];
    attend_values(tape, &heads, values)
}

/// `one_hot(id) · tanh(tokens)`.
pub fn emotion_from_id(tape: &mut Tape<'_>, model: &Model, label: EmotionLabel) -> Result<Var> {
    let n = model.config.num_tokens;
    let id = label
        .id()
        .ok_or_else(|| Error::Usage("synthesis needs an explicit emotion id".into()))?;
    if id >= n {
        return Err(Error::Index {
            what: "emotion id",
            index: id,
            bound: n,
        });
    }
    let mut one_hot = Tensor::zeros(&[1, n]);
    one_hot.data_mut()[id] = 1.0;
    let one_hot = tape.constant(one_hot);
    let values = token_values(tape, model);
    let e = tape.matmul(one_hot, values)?;
    tape.reshape(e, &[model.config.token_dim])
}

/// Row `id` of the speaker table as `[d_spk]`.
pub fn speaker_embedding(tape: &mut Tape<'_>, model: &Model, speaker_id: usize) -> Result<Var> {
    let row = embedding_lookup(tape, &[speaker_id], model.layout.speakers).map_err(|e| match e {
        Error::Index { index, bound, .. } => Error::Index {
            what: "speaker id",
            index,
            bound,
        },
        other => other,
    })?;
    tape.reshape(row, &[model.config.d_spk])
}

/// `U` is computed before the speaker enters; only the log durations see it.
pub fn duration_predictor(
    tape: &mut Tape<'_>,
    model: &Model,
    h: Var,
    emotion: Var,
    speaker: Var,
) -> Result<DurationOutput> {
    let p = &model.layout.duration;
    let (len, d) = (tape.shape(h)[0], model.config.d_model);
    let x = tape.add(h, emotion)?;
    let pos = tape.constant(sinusoidal_positions(len, d)?);
    let x = tape.add(x, pos)?;
    let u = p.block.forward(tape, x)?;

    let d_spk = tape.value(speaker).len();
    let s = tape.reshape(speaker, &[1, d_spk])?;
    let s = p.speaker_proj.forward(tape, s)?;
    let z = tape.add(u, s)?;
    let n = layer_norm(tape, z, &p.lconv_norm)?;
    let c = lconv(tape, n, &p.lconv)?;
    let y = tape.add(z, c)?;
    let n = layer_norm(tape, y, &p.out_norm)?;
    let out = p.out.forward(tape, n)?;
    let log_durations = tape.reshape(out, &[len])?;
    Ok(DurationOutput { u, log_durations })
}

/// Repeats row `i` of `u` `durations[i]` times and adds frame positions.
pub fn upsample(tape: &mut Tape<'_>, u: Var, durations: &[usize]) -> Result<Var> {
    let (len, d) = (tape.shape(u)[0], tape.shape(u)[1]);
    if durations.len() != len {
        return Err(Error::Shape {
            op: "upsample durations",
            left: vec![len],
            right: vec![durations.len()],
        });
    }
    if let Some(i) = durations.iter().position(|&n| n == 0) {
        return Err(Error::input(format!("duration of phoneme {i} is zero")));
    }
    let frames: usize = durations.iter().sum();
    let x = tape.repeat_rows(u, durations)?;
    let pos = tape.constant(sinusoidal_positions(frames, d)?);
    tape.add(x, pos)
}

pub fn decoder(tape: &mut Tape<'_>, model: &Model, frames: Var, speaker: Var) -> Result<Vec<Var>> {
    decoder_with(tape, model, frames, DecoderConditioning::Speaker(speaker))
}

pub fn decoder_with(
    tape: &mut Tape<'_>,
    model: &Model,
    frames: Var,
    cond: DecoderConditioning,
) -> Result<Vec<Var>> {
    let norm = |tape: &mut Tape<'_>, x: Var, p| -> Result<Var> {
        match cond {
            DecoderConditioning::Speaker(s) => scln(tape, x, s, p),
            DecoderConditioning::Unconditional => Ok(tape.normalize_rows(x, LAYER_NORM_EPS)),
        }
    };
    let mut h = frames;
    let mut preds = Vec::with_capacity(model.layout.decoder.len());
    for stack in &model.layout.decoder {
        let a = lconv(tape, h, &stack.lconv)?;
        let a = norm(tape, a, &stack.lconv_scln)?;
        h = tape.add(h, a)?;
        let f = stack.ff.forward(tape, h)?;
        let f = norm(tape, f, &stack.ff_scln)?;
        h = tape.add(h, f)?;
        preds.push(stack.mel_head.forward(tape, h)?);
    }
    Ok(preds)
}

/// Teacher-forced pass: ground-truth durations drive upsampling.
pub fn forward_train(tape: &mut Tape<'_>, model: &Model, utt: &Utterance) -> Result<TrainOutputs> {
    utt.validate()?;
    let tag = |e: Error| e.with_utterance(&utt.utt_id);
    let h = text_encoder(tape, model, &utt.phoneme_ids)?;
    let mel = tape.constant(utt.mel.clone());
    let ref_emb = reference_encoder(tape, model, mel)?;
    let emotion = emotion_attention(tape, model, ref_emb)?;
    let speaker = speaker_embedding(tape, model, utt.speaker_id).map_err(tag)?;
    let dur = duration_predictor(tape, model, h, emotion.embedding, speaker)?;
    let frames = upsample(tape, dur.u, &utt.durations)?;
    let mel_preds = decoder(tape, model, frames, speaker)?;
    Ok(TrainOutputs {
        mel_preds,
        log_durations: dur.log_durations,
        token_weights: emotion.weights,
    })
}

/// Rounded predicted duration, at least one frame and at most `max` frames.
pub fn round_duration(log_duration: f64, max: usize) -> usize {
    let frames = libm::round(libm::exp(log_duration));
    if frames.is_nan() || frames < 1.0 {
        1
    } else if frames >= max as f64 {
        max
    } else {
        frames as usize
    }
}

/// Inference from text, speaker, and emotion id; no reference audio.
pub fn synthesize(model: &Model, phoneme_ids: &[usize], speaker_id: usize, emotion_id: usize) -> Result<Synthesis> {
    let mut tape = Tape::new(model.params());
    let tape = &mut tape;
    let h = text_encoder(tape, model, phoneme_ids)?;
    let emotion = emotion_from_id(tape, model, EmotionLabel::Present(emotion_id))?;
    let speaker = speaker_embedding(tape, model, speaker_id)?;
    let dur = duration_predictor(tape, model, h, emotion, speaker)?;
    let max = model.config.max_duration_frames;
    let durations: Vec<usize> = tape
        .value(dur.log_durations)
        .iter()
        .map(|&ld| round_duration(ld, max))
        .collect();
    let frames = upsample(tape, dur.u, &durations)?;
    let preds = decoder(tape, model, frames, speaker)?;
    let last = *preds.last().ok_or_else(|| Error::config("model has no decoder stacks"))?;
    Ok(Synthesis {
        mel: tape.tensor(last),
        durations,
    })
}
