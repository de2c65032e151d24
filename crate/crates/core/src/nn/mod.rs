//! Neural building blocks on top of the tape.
//!
//! Parameter structs hold `ParamId`s into a `ParamStore`; forward
//! functions take a `Tape` and return tape variables, so every block is
//! differentiable end to end.

mod attention;
mod embed;
mod lconv;
mod linear;
mod norm;
mod transformer;

pub use attention::{attend_values, attention, AttentionOutput, AttentionParams, SelfAttention};
pub use embed::{embedding_lookup, sinusoidal_positions};
pub use lconv::{lconv, LConvParams};
pub use linear::Linear;
pub use norm::{layer_norm, scln, LayerNormParams, SclnParams, LAYER_NORM_EPS};
pub use transformer::{FeedForward, TransformerBlock, FF_EXPANSION};
