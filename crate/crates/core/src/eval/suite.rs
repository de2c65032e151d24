use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{EmotionLabel, Utterance};
use crate::error::Result;
use crate::gradcheck::{check_gradients, GradCheckOptions, GradCheckResult};
use crate::model::{
    decoder, duration_predictor, emotion_attention, emotion_from_id, forward_train,
    reference_encoder, text_encoder, upsample, Model, ModelConfig,
};
use crate::nn::{
    attention, layer_norm, lconv, scln, AttentionParams, LConvParams, LayerNormParams,
    SclnParams, SelfAttention, TransformerBlock,
};
use crate::params::{ParamId, ParamStore};
use crate::tape::{ConvGeom, ReduceKind, Tape, Var};
use crate::tensor::Tensor;
use crate::training::{
    duration_loss, emotion_classifier_loss, reconstruction_loss, total_loss,
};

/// Maximum relative error for an entry to pass.
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub op: String,
    pub result: GradCheckResult,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:<24} {} max_rel_err {:.3e} over {} coords (worst: {})",
                e.op,
                if e.passed { "PASS" } else { "FAIL" },
                e.result.max_rel_error,
                e.result.coords_checked,
                e.result.worst_param
            );
        }
        out
    }
}

struct Suite {
    rng: ChaCha8Rng,
    opts: GradCheckOptions,
    entries: Vec<GradCheckEntry>,
}

impl Suite {
    fn randn(&mut self, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut self.rng))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    /// Magnitudes in `[0.2, 1.5]` with random sign, away from kinks at zero.
    fn away_from_zero(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m: f64 = self.rng.random_range(0.2..1.5);
                if self.rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    fn input(&mut self, store: &mut ParamStore, name: &str, shape: &[usize]) -> ParamId {
        let t = self.randn(shape, 1.0);
        store.register(format!("input.{name}"), t)
    }

    fn check<F>(&mut self, op: &str, mut store: ParamStore, f: F) -> Result<()>
    where
        F: Fn(&mut Tape<'_>) -> Result<Var>,
    {
        let result = check_gradients(&mut store, f, &self.opts)?;
        self.entries.push(GradCheckEntry {
            op: op.to_string(),
            passed: result.passes(SUITE_TOLERANCE),
            result,
        });
        Ok(())
    }
}

/// Scalar `Σ v ⊙ R` for a fixed random `R`, so no output direction is
/// privileged by the reduction.
fn probe(tape: &mut Tape<'_>, v: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone().reshape(tape.shape(v))?);
    let p = tape.mul(v, w)?;
    Ok(tape.sum_all(p))
}

fn projection(suite: &mut Suite, n: usize) -> Tensor {
    suite.randn(&[n], 1.0)
}

/// Finite-difference checks of every differentiable tape op, block, and
/// model stage on small seeded instances, ending with the full training
/// loss of a tiny model.
pub fn grad_check_suite(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        opts: opts.clone(),
        entries: Vec::new(),
    };
    primitives(&mut s)?;
    blocks(&mut s)?;
    model_stages(&mut s)?;
    Ok(GradCheckReport { entries: s.entries })
}

fn primitives(s: &mut Suite) -> Result<()> {
    {
        let mut st = ParamStore::new();
        let a = s.input(&mut st, "a", &[3, 4]);
        let b = s.input(&mut st, "b", &[4, 2]);
        let r = projection(s, 6);
        s.check("matmul", st, |t| {
            let (a, b) = (t.param(a), t.param(b));
            let y = t.matmul(a, b)?;
            probe(t, y, &r)
        })?;
    }
    {
        let mut st = ParamStore::new();
        let a = s.input(&mut st, "a", &[3, 4]);
        let b = s.input(&mut st, "b", &[3, 4]);
        let row = s.input(&mut st, "row", &[4]);
        let r = projection(s, 12);
        s.check("add_sub_mul_broadcast", st, |t| {
            let (a, b, row) = (t.param(a), t.param(b), t.param(row));
            let x = t.add(a, b)?;
            let x = t.mul(x, a)?;
            let x = t.sub(x, row)?;
            let x = t.mul(x, row)?;
            let x = t.add(x, row)?;
            probe(t, x, &r)
        })?;
    }
    {
        let mut st = ParamStore::new();
        let a = s.input(&mut st, "a", &[2, 5]);
        let r = projection(s, 10);
        s.check("tanh_sigmoid_exp", st, |t| {
            let a = t.param(a);
            let x = t.tanh(a);
            let y = t.sigmoid(a);
            let z = t.exp(a);
            let x = t.add(x, y)?;
            let x = t.add(x, z)?;
            let x = t.scale(x, 0.7);
            probe(t, x, &r)
        })?;
    }
    {
        let mut st = ParamStore::new();
        let a = st.register("input.a", s.away_from_zero(&[2, 5]));
        let r = projection(s, 10);
        s.check("relu_abs_ln", st, |t| {
            let a = t.param(a);
            let x = t.relu(a);
            let y = t.abs(a);
            let z = t.ln_clamped(y, 1e-8);
            let x = t.add(x, z)?;
            probe(t, x, &r)
        })?;
    }
    {
        let mut st = ParamStore::new();
        let a = s.input(&mut st, "a", &[3, 5]);
        let r = projection(s, 15);
        s.check("softmax", st, |t| {
            let a = t.param(a);
            let x = t.softmax(a);
            probe(t, x, &r)
        })?;
    }
    {
        let mut st = ParamStore::new();
        let a = s.input(&mut st, "a", &[3, 4]);
        let r0 = projection(s, 4);
        let r1 = projection(s, 3);
        s.check("reduce", st, |t| {
            let a = t.param(a);
            let x = t.reduce(a, ReduceKind::Sum, 0)?;
            let y = t.reduce(a, ReduceKind::Mean, 1)?;
            let p = probe(t, x, &r0)?;
            let q = probe(t, y, &r1)?;
            t.add(p, q)
        })?;
    }
    {
        let mut st = ParamStore::new();
        let a = s.input(&mut st, "a", &[3, 6]);
        let r = projection(s, 18);
        s.check("normalize_rows", st, |t| {
            let a = t.param(a);
            let x = t.normalize_rows(a, 1e-5);
            probe(t, x, &r)
        })?;
    }
    {
        let mut st = ParamStore::new();
        let table = s.input(&mut st, "table", &[5, 3]);
        let r = projection(s, 20);
        s.check("layout_ops", st, |t| {
            let table = t.param(table);
            let g = t.gather_rows(table, &[4, 1, 4, 0])?;
            let rep = t.repeat_rows(g, &[1, 3, 1, 2])?;
            let sl = t.slice_rows(rep, 1, 4)?;
            let sc = t.slice_cols(sl, 1, 2)?;
            let cat = t.concat_cols(&[sl, sc])?;
            let tr = t.transpose(cat)?;
            let flat = t.reshape(tr, &[20])?;
            probe(t, flat, &r)
        })?;
    }
    {
        let geom = ConvGeom {
            height: 5,
            width: 4,
            channels: 2,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let mut st = ParamStore::new();
        let x = s.input(&mut st, "x", &[20, 2]);
        let w = s.input(&mut st, "w", &[18, 3]);
        let r = projection(s, geom.out_height() * geom.out_width() * 3);
        s.check("im2col", st, move |t| {
            let (x, w) = (t.param(x), t.param(w));
            let cols = t.im2col(x, geom)?;
            let y = t.matmul(cols, w)?;
            probe(t, y, &r)
        })?;
    }
    {
        let mut st = ParamStore::new();
        let x = s.input(&mut st, "x", &[5, 4]);
        let k = s.input(&mut st, "kernel", &[2, 3]);
        let r = projection(s, 20);
        s.check("depthwise_conv", st, |t| {
            let (x, k) = (t.param(x), t.param(k));
            let y = t.depthwise_conv(x, k)?;
            probe(t, y, &r)
        })?;
    }
    Ok(())
}

fn blocks(s: &mut Suite) -> Result<()> {
    let d = 8;
    {
        let mut st = ParamStore::new();
        let p = LayerNormParams::new(&mut st, "ln", d);
        st.assign("ln.gain", s.randn(&[d], 1.0))?;
        st.assign("ln.bias", s.randn(&[d], 1.0))?;
        let x = s.input(&mut st, "x", &[3, d]);
        let r = projection(s, 3 * d);
        s.check("layer_norm", st, |t| {
            let x = t.param(x);
            let y = layer_norm(t, x, &p)?;
            probe(t, y, &r)
        })?;
    }
    {
        let mut st = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(s.rng.random());
        let p = SclnParams::new(&mut st, &mut rng, "scln", d, 4, 0.5);
        let x = s.input(&mut st, "x", &[3, d]);
        let spk = s.input(&mut st, "speaker", &[4]);
        let r = projection(s, 3 * d);
        s.check("scln", st, |t| {
            let (x, spk) = (t.param(x), t.param(spk));
            let y = scln(t, x, spk, &p)?;
            probe(t, y, &r)
        })?;
    }
    {
        let mut st = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(s.rng.random());
        let p = LConvParams::new(&mut st, &mut rng, "lconv", d, 2, 3)?;
        st.assign("lconv.kernel_logits", s.randn(&[2, 3], 1.0))?;
        let x = s.input(&mut st, "x", &[4, d]);
        let r = projection(s, 4 * d);
        s.check("lconv", st, |t| {
            let x = t.param(x);
            let y = lconv(t, x, &p)?;
            probe(t, y, &r)
        })?;
    }
    for heads in [1, 2] {
        let mut st = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(s.rng.random());
        let p = AttentionParams::new(&mut st, &mut rng, "attn", d, d, d, heads)?;
        let q = s.input(&mut st, "query", &[d]);
        let k = s.input(&mut st, "keys", &[5, d]);
        let r = projection(s, 5);
        let r2 = projection(s, d);
        s.check(&format!("token_attention_h{heads}"), st, |t| {
            let (q, k) = (t.param(q), t.param(k));
            let out = attention(t, q, k, &p)?;
            let a = probe(t, out.weights, &r)?;
            let b = probe(t, out.context, &r2)?;
            t.add(a, b)
        })?;
    }
    {
        let mut st = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(s.rng.random());
        let p = SelfAttention::new(&mut st, &mut rng, "sa", d, 2)?;
        let x = s.input(&mut st, "x", &[4, d]);
        let r = projection(s, 4 * d);
        s.check("self_attention", st, |t| {
            let x = t.param(x);
            let y = p.forward(t, x)?;
            probe(t, y, &r)
        })?;
    }
    {
        let mut st = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(s.rng.random());
        let p = TransformerBlock::new(&mut st, &mut rng, "block", d, 2)?;
        let x = s.input(&mut st, "x", &[4, d]);
        let r = projection(s, 4 * d);
        s.check("transformer_block", st, |t| {
            let x = t.param(x);
            let y = p.forward(t, x)?;
            probe(t, y, &r)
        })?;
    }
    Ok(())
}

fn model_stages(s: &mut Suite) -> Result<()> {
    let cfg = ModelConfig::tiny();
    let model = Model::new(cfg.clone(), s.rng.random())?;
    let m = &model;
    let d = cfg.d_model;
    let base = || model.params().clone();

    {
        let r = projection(s, 3 * d);
        s.check("text_encoder", base(), |t| {
            let h = text_encoder(t, m, &[1, 4, 1])?;
            probe(t, h, &r)
        })?;
    }
    {
        let mut st = base();
        let mel = s.input(&mut st, "mel", &[8, cfg.mel_bins]);
        let r = projection(s, cfg.token_dim);
        s.check("reference_encoder", st, |t| {
            let mel = t.param(mel);
            let e = reference_encoder(t, m, mel)?;
            probe(t, e, &r)
        })?;
    }
    {
        let mut st = base();
        let q = s.input(&mut st, "ref", &[cfg.token_dim]);
        let r = projection(s, cfg.num_tokens);
        let r2 = projection(s, cfg.token_dim);
        s.check("emotion_attention", st, |t| {
            let q = t.param(q);
            let out = emotion_attention(t, m, q)?;
            let a = probe(t, out.weights, &r)?;
            let b = probe(t, out.embedding, &r2)?;
            t.add(a, b)
        })?;
    }
    {
        let r = projection(s, cfg.token_dim);
        s.check("emotion_from_id", base(), |t| {
            let e = emotion_from_id(t, m, EmotionLabel::Present(3))?;
            probe(t, e, &r)
        })?;
    }
    {
        let mut st = base();
        let h = s.input(&mut st, "h", &[4, d]);
        let e = s.input(&mut st, "emotion", &[d]);
        let spk = s.input(&mut st, "speaker", &[cfg.d_spk]);
        let r = projection(s, 4 * d);
        let r2 = projection(s, 4);
        s.check("duration_predictor", st, |t| {
            let (h, e, spk) = (t.param(h), t.param(e), t.param(spk));
            let out = duration_predictor(t, m, h, e, spk)?;
            let a = probe(t, out.u, &r)?;
            let b = probe(t, out.log_durations, &r2)?;
            t.add(a, b)
        })?;
    }
    {
        let mut st = ParamStore::new();
        let u = s.input(&mut st, "u", &[3, d]);
        let r = projection(s, 6 * d);
        s.check("upsample", st, |t| {
            let u = t.param(u);
            let y = upsample(t, u, &[2, 3, 1])?;
            probe(t, y, &r)
        })?;
    }
    {
        let mut st = base();
        let frames = s.input(&mut st, "frames", &[6, d]);
        let spk = s.input(&mut st, "speaker", &[cfg.d_spk]);
        let rs: Vec<Tensor> = (0..cfg.num_decoder_stacks)
            .map(|_| projection(s, 6 * cfg.mel_bins))
            .collect();
        s.check("decoder", st, |t| {
            let (frames, spk) = (t.param(frames), t.param(spk));
            let preds = decoder(t, m, frames, spk)?;
            let mut total = probe(t, preds[0], &rs[0])?;
            for (p, r) in preds.iter().zip(&rs).skip(1) {
                let q = probe(t, *p, r)?;
                total = t.add(total, q)?;
            }
            Ok(total)
        })?;
    }
    {
        let mut st = ParamStore::new();
        let w1 = s.input(&mut st, "logits1", &[7]);
        let w2 = s.input(&mut st, "logits2", &[7]);
        let ld = s.input(&mut st, "log_durations", &[3]);
        let pred = s.input(&mut st, "pred", &[4, 5]);
        let target = s.randn(&[4, 5], 1.0);
        s.check("losses", st, |t| {
            let a = t.param(w1);
            let a = t.softmax(a);
            let b = t.param(w2);
            let b = t.softmax(b);
            let labels = [EmotionLabel::Present(2), EmotionLabel::Absent, EmotionLabel::Present(5)];
            let ec = emotion_classifier_loss(t, &[a, b, a], &labels)?;
            let ld = t.param(ld);
            let dur = duration_loss(t, ld, &[2, 5, 1])?;
            let pred = t.param(pred);
            let target = t.constant(target.clone());
            let reco = reconstruction_loss(t, &[pred, pred], target)?;
            total_loss(t, &reco, ec, dur, 0.3, 0.7)
        })?;
    }
    {
        let mel = s.randn(&[6, cfg.mel_bins], 1.0);
        let utt = Utterance {
            utt_id: "gradcheck".into(),
            speaker_id: 1,
            phoneme_ids: vec![2, 0, 5],
            durations: vec![1, 3, 2],
            mel,
            emotion: EmotionLabel::Present(4),
        };
        let target = utt.mel.clone();
        s.check("forward_train", base(), |t| {
            let out = forward_train(t, m, &utt)?;
            let target = t.constant(target.clone());
            let reco = reconstruction_loss(t, &out.mel_preds, target)?;
            let ec = emotion_classifier_loss(t, &[out.token_weights], &[utt.emotion])?;
            let dur = duration_loss(t, out.log_durations, &utt.durations)?;
            total_loss(t, &reco, ec, dur, 0.1, 0.1)
        })?;
    }
    Ok(())
}
