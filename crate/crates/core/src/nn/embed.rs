use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Row gather from a `[V × d]` table; ids must lie in `[0, V)`.
pub fn embedding_lookup(tape: &mut Tape<'_>, ids: &[usize], table: ParamId) -> Result<Var> {
    let t = tape.param(table);
    tape.gather_rows(t, ids)
}

/// Interleaved sinusoidal encoding: `pe[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `pe[pos, 2i+1] = cos(·)` at the same frequency.
pub fn sinusoidal_positions(len: usize, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::config(format!(
            "positional encoding width {d} must be even and positive"
        )));
    }
    if len == 0 {
        return Err(Error::input("positional encoding of an empty sequence"));
    }
    let inv_freq: Vec<f64> = (0..d / 2)
        .map(|i| libm::pow(10000.0, -((2 * i) as f64) / d as f64))
        .collect();
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for &f in &inv_freq {
            let angle = pos as f64 * f;
            data.push(libm::sin(angle));
            data.push(libm::cos(angle));
        }
    }
    Tensor::new(alloc::vec![len, d], data)
}
