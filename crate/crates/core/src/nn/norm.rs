use alloc::format;
use alloc::vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Variance floor shared by plain and speaker-conditional layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub epsilon: f64,
}

impl LayerNormParams {
    /// Unit gain, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.register_full(format!("{name}.gain"), &[d], 1.0),
            bias: store.register_full(format!("{name}.bias"), &[d], 0.0),
            epsilon: LAYER_NORM_EPS,
        }
    }
}

/// `gain ⊙ x̂ + bias`, with `x̂` each row of `x` standardized over features.
pub fn layer_norm(tape: &mut Tape<'_>, x: Var, p: &LayerNormParams) -> Result<Var> {
    let xhat = tape.normalize_rows(x, p.epsilon);
    let g = tape.param(p.gain);
    let b = tape.param(p.bias);
    let y = tape.mul(xhat, g)?;
    tape.add(y, b)
}

/// Speaker-conditional layer norm: gain and bias are affine functions of
/// the speaker embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SclnParams {
    /// `[d × d_spk]`
    pub gain_weight: ParamId,
    /// `[d]`
    pub gain_bias: ParamId,
    /// `[d × d_spk]`
    pub bias_weight: ParamId,
    /// `[d]`
    pub bias_bias: ParamId,
    pub epsilon: f64,
}

impl SclnParams {
    /// Condition weights drawn with std `weight_std`; gain bias 1, bias bias 0,
    /// so a zero `weight_std` starts as plain layer norm.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        d_spk: usize,
        weight_std: f64,
    ) -> Self {
        SclnParams {
            gain_weight: store.register_normal(format!("{name}.gain_weight"), &[d, d_spk], weight_std, rng),
            gain_bias: store.register_full(format!("{name}.gain_bias"), &[d], 1.0),
            bias_weight: store.register_normal(format!("{name}.bias_weight"), &[d, d_spk], weight_std, rng),
            bias_bias: store.register_full(format!("{name}.bias_bias"), &[d], 0.0),
            epsilon: LAYER_NORM_EPS,
        }
    }
}

/// `γ(s) ⊙ x̂ + β(s)` with `γ(s) = W_γ·s + b_γ`, `β(s) = W_β·s + b_β`.
pub fn scln(tape: &mut Tape<'_>, x: Var, speaker: Var, p: &SclnParams) -> Result<Var> {
    let d_spk = tape.params().get(p.gain_weight).shape()[1];
    let d = tape.params().get(p.gain_weight).shape()[0];
    let s_len = tape.value(speaker).len();
    if s_len != d_spk {
        return Err(Error::Shape {
            op: "scln speaker embedding",
            left: vec![d_spk],
            right: tape.shape(speaker).to_vec(),
        });
    }
    let s = tape.reshape(speaker, &[d_spk, 1])?;
    let affine = |tape: &mut Tape<'_>, w: ParamId, b: ParamId| -> Result<Var> {
        let w = tape.param(w);
        let ws = tape.matmul(w, s)?;
        let ws = tape.reshape(ws, &[d])?;
        let b = tape.param(b);
        tape.add(ws, b)
    };
    let gamma = affine(tape, p.gain_weight, p.gain_bias)?;
    let beta = affine(tape, p.bias_weight, p.bias_bias)?;
    let xhat = tape.normalize_rows(x, p.epsilon);
    let y = tape.mul(xhat, gamma)?;
    tape.add(y, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_norm_of_one_two_three() {
        let mut store = ParamStore::new();
        let p = LayerNormParams::new(&mut store, "ln", 3);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = layer_norm(&mut tape, x, &p).unwrap();
        // (x - 2) / sqrt(2/3 + 1e-5)
        let expected = [-1.224735, 0.0, 1.224735];
        for (a, b) in tape.value(y).iter().zip(expected) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_row_normalizes_to_zero() {
        let mut store = ParamStore::new();
        let p = LayerNormParams::new(&mut store, "ln", 3);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::new(vec![1, 3], vec![5.0; 3]).unwrap());
        let y = layer_norm(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_gain_gives_bias() {
        let mut store = ParamStore::new();
        let p = LayerNormParams::new(&mut store, "ln", 4);
        store.assign("ln.gain", Tensor::zeros(&[4])).unwrap();
        store.assign("ln.bias", Tensor::full(&[4], 7.0)).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap());
        let y = layer_norm(&mut tape, x, &p).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 7.0));
    }

    #[test]
    fn scln_rejects_wrong_speaker_dim() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = SclnParams::new(&mut store, &mut rng, "scln", 4, 3, 0.1);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        let s = tape.constant(Tensor::zeros(&[5]));
        assert!(matches!(scln(&mut tape, x, s, &p), Err(Error::Shape { .. })));
    }
}
