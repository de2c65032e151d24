use alloc::format;

use rand::Rng;

use crate::error::Result;
use crate::nn::{layer_norm, LayerNormParams, Linear, SelfAttention};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Hidden width of the feed-forward sublayer relative to the model width.
pub const FF_EXPANSION: usize = 4;

/// Two-layer ReLU MLP applied per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        FeedForward {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), d, FF_EXPANSION * d, true),
            out: Linear::new(store, rng, &format!("{name}.out"), FF_EXPANSION * d, d, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, h)
    }
}

/// Pre-norm block: `x + attn(ln(x))`, then `h + ff(ln(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub attn_norm: LayerNormParams,
    pub attn: SelfAttention,
    pub ff_norm: LayerNormParams,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            attn_norm: LayerNormParams::new(store, &format!("{name}.attn_norm"), d),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), d, heads)?,
            ff_norm: LayerNormParams::new(store, &format!("{name}.ff_norm"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d),
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let n = layer_norm(tape, x, &self.attn_norm)?;
        let a = self.attn.forward(tape, n)?;
        let h = tape.add(x, a)?;
        let n = layer_norm(tape, h, &self.ff_norm)?;
        let f = self.ff.forward(tape, n)?;
        tape.add(h, f)
    }
}
