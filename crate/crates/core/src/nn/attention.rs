use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Query/key projections of the token attention. Values are the keys
/// themselves, so a one-hot weight vector selects a key row exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `[d_q × d_attn]`
    pub query: ParamId,
    /// `[d_k × d_attn]`
    pub key: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_query: usize,
        d_key: usize,
        d_attn: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !d_attn.is_multiple_of(heads) || !d_key.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "attention heads {heads} must divide attention width {d_attn} and key width {d_key}"
            )));
        }
        Ok(AttentionParams {
            query: store.register_weight(format!("{name}.query"), d_query, d_attn, rng),
            key: store.register_weight(format!("{name}.key"), d_key, d_attn, rng),
            heads,
        })
    }
}

pub struct AttentionOutput {
    /// Mean of the per-head weights; a point on the simplex.
    pub weights: Var,
    pub head_weights: Vec<Var>,
    /// `[d_k]`: per-head weighted sums of the matching key slice, concatenated.
    pub context: Var,
}

/// Scaled dot-product attention of one query vector over `n` keys.
pub fn attention(
    tape: &mut Tape<'_>,
    query: Var,
    keys: Var,
    p: &AttentionParams,
) -> Result<AttentionOutput> {
    let n = match tape.shape(keys) {
        [n, _] if *n > 0 => *n,
        other => {
            return Err(Error::Shape {
                op: "attention keys",
                left: other.to_vec(),
                right: vec![1, 0],
            })
        }
    };
    let d_q = tape.value(query).len();
    let q = tape.reshape(query, &[1, d_q])?;
    let wq = tape.param(p.query);
    let wk = tape.param(p.key);
    let q = tape.matmul(q, wq)?;
    let k = tape.matmul(keys, wk)?;
    let d_attn = tape.shape(q)[1];
    let head_dim = d_attn / p.heads;
    let scale = 1.0 / libm::sqrt(head_dim as f64);

    let mut head_weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh) = if p.heads == 1 {
            (q, k)
        } else {
            (
                tape.slice_cols(q, h * head_dim, head_dim)?,
                tape.slice_cols(k, h * head_dim, head_dim)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        head_weights.push(tape.softmax(scores));
    }
    let context = attend_values(tape, &head_weights, keys)?;
    let head_weights = head_weights
        .into_iter()
        .map(|w| tape.reshape(w, &[n]))
        .collect::<Result<Vec<_>>>()?;
    let weights = if p.heads == 1 {
        head_weights[0]
    } else {
        let mut acc = head_weights[0];
        for &w in &head_weights[1..] {
            acc = tape.add(acc, w)?;
        }
        tape.scale(acc, 1.0 / p.heads as f64)
    };
    Ok(AttentionOutput {
        weights,
        head_weights,
        context,
    })
}

/// Weighted sum of `values: [n × d_v]`. With one weight vector the whole
/// row width is mixed; with `h` vectors, head `i` mixes the `i`-th of `h`
/// equal column slices and the slices are concatenated. Returns `[d_v]`.
pub fn attend_values(tape: &mut Tape<'_>, head_weights: &[Var], values: Var) -> Result<Var> {
    let (n, d_v) = dims(tape, values)?;
    let heads = head_weights.len();
    if heads == 0 || d_v % heads != 0 {
        return Err(Error::Shape {
            op: "attend_values",
            left: vec![heads],
            right: vec![n, d_v],
        });
    }
    let mut parts = Vec::with_capacity(heads);
    for (h, &w) in head_weights.iter().enumerate() {
        let w = tape.reshape(w, &[1, n])?;
        let vh = if heads == 1 {
            values
        } else {
            tape.slice_cols(values, h * (d_v / heads), d_v / heads)?
        };
        parts.push(tape.matmul(w, vh)?);
    }
    let context = if heads == 1 {
        parts[0]
    } else {
        tape.concat_cols(&parts)?
    };
    tape.reshape(context, &[d_v])
}

fn dims(tape: &Tape<'_>, v: Var) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [n, d] => Ok((*n, *d)),
        other => Err(Error::Shape {
            op: "attention values",
            left: other.to_vec(),
            right: vec![2],
        }),
    }
}

/// Multi-head self-attention over a `[L × d]` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::config(format!("attention heads {heads} must divide width {d}")));
        }
        Ok(SelfAttention {
            query: Linear::new(store, rng, &format!("{name}.query"), d, d, true),
            key: Linear::new(store, rng, &format!("{name}.key"), d, d, true),
            value: Linear::new(store, rng, &format!("{name}.value"), d, d, true),
            out: Linear::new(store, rng, &format!("{name}.out"), d, d, true),
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let d = tape.shape(x)[1];
        let head_dim = d / self.heads;
        let scale = 1.0 / libm::sqrt(head_dim as f64);
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let w = tape.softmax(scores);
            heads.push(tape.matmul(w, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        self.out.forward(tape, merged)
    }
}
