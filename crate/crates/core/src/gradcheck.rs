//! Central finite-difference gradient checks against the tape.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, per unit of loss magnitude.
    /// The effective floor is `denom_floor · max(1, |loss|)`: central
    /// differences carry round-off of order `ε·|loss|/step`, so gradients
    /// below the floor cannot be resolved.
    pub denom_floor: f64,
    /// Coordinates sampled per parameter tensor (all of them when the
    /// tensor is smaller).
    pub max_coords_per_param: usize,
    pub seed: u64,
    /// Negates the analytic gradient before comparing. Only used to prove
    /// the checker notices a broken backward pass.
    pub corrupt_sign: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            denom_floor: 1e-6,
            max_coords_per_param: 24,
            seed: 0x6a7d,
            corrupt_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

impl GradCheckResult {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn eval_loss<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    Ok(tape.scalar(loss))
}

/// Compares tape gradients of the scalar built by `f` with central
/// differences, perturbing every tensor in `store` (inputs under test are
/// registered there alongside the parameters).
pub fn check_gradients<F>(
    store: &mut ParamStore,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckResult>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let (analytic, loss_scale): (Vec<Vec<f64>>, f64) = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        let scale = tape.scalar(loss).abs().max(1.0);
        tape.backward(loss)?;
        let grads = store
            .ids()
            .map(|id| {
                tape.param_grad(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.get(id).numel()])
            })
            .collect();
        (grads, scale)
    };
    let floor = opts.denom_floor * loss_scale;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut result = GradCheckResult {
        max_rel_error: 0.0,
        worst_param: String::new(),
        coords_checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut picked = sample(&mut rng, n, opts.max_coords_per_param).into_vec();
            picked.sort_unstable();
            picked
        };
        for c in coords {
            let orig = store.get(id).data()[c];
            store.get_mut(id).data_mut()[c] = orig + opts.step;
            let plus = eval_loss(store, &f)?;
            store.get_mut(id).data_mut()[c] = orig - opts.step;
            let minus = eval_loss(store, &f)?;
            store.get_mut(id).data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let mut a = analytic[id.index()][c];
            if opts.corrupt_sign {
                a = -a;
            }
            let err = relative_error(a, numeric, floor);
            result.coords_checked += 1;
            if err > result.max_rel_error || err.is_nan() {
                result.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                result.worst_param = String::from(store.name(id));
            }
        }
    }
    Ok(result)
}
