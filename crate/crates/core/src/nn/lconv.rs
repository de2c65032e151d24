use alloc::format;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Lightweight convolution: GLU input projection, a softmax-normalized
/// depthwise kernel shared within each channel group, output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LConvParams {
    /// `d → 2d`; the second half gates the first.
    pub in_proj: Linear,
    /// `[heads × kernel_size]`, softmaxed per head before use.
    pub kernel_logits: ParamId,
    pub out_proj: Linear,
    pub heads: usize,
}

impl LConvParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        kernel_size: usize,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!("lconv kernel size {kernel_size} must be odd")));
        }
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::config(format!("lconv heads {heads} must divide width {d}")));
        }
        Ok(LConvParams {
            in_proj: Linear::new(store, rng, &format!("{name}.in_proj"), d, 2 * d, true),
            kernel_logits: store.register_normal(
                format!("{name}.kernel_logits"),
                &[heads, kernel_size],
                0.1,
                rng,
            ),
            out_proj: Linear::new(store, rng, &format!("{name}.out_proj"), d, d, true),
            heads,
        })
    }
}

/// `[L × d] → [L × d]`; length preserved by zero "same" padding.
pub fn lconv(tape: &mut Tape<'_>, x: Var, p: &LConvParams) -> Result<Var> {
    let d = tape.shape(x)[1];
    let h = p.in_proj.forward(tape, x)?;
    let value = tape.slice_cols(h, 0, d)?;
    let gate = tape.slice_cols(h, d, d)?;
    let gate = tape.sigmoid(gate);
    let glu = tape.mul(value, gate)?;
    let logits = tape.param(p.kernel_logits);
    let kernel = tape.softmax(logits);
    let conv = tape.depthwise_conv(glu, kernel)?;
    p.out_proj.forward(tape, conv)
}
