use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPSILON: f64 = 1e-9;

/// Per-parameter gradients detached from the tape that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn from_tape(tape: &Tape<'_>) -> Self {
        let mut grads = vec![None; tape.params().len()];
        for (id, g) in tape.param_grads() {
            grads[id.index()] = Some(g.to_vec());
        }
        Gradients { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.index())?.as_deref()
    }
}

/// Learning rate after linear warmup; `step` counts from 1.
pub fn warmup_lr(lr: f64, warmup_steps: usize, step: u64) -> f64 {
    if warmup_steps == 0 {
        lr
    } else {
        lr * (step as f64 / warmup_steps as f64).min(1.0)
    }
}

/// Adaptive-moment optimizer with bias correction and linear warmup.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    state: AdamState,
}

/// Step count and first/second moments, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn matches(&self, params: &ParamStore) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .enumerate()
                .all(|(i, (_, _, t))| self.m[i].shape() == t.shape() && self.v[i].shape() == t.shape())
    }
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f64, warmup_steps: usize) -> Self {
        Adam {
            learning_rate,
            warmup_steps,
            state: AdamState::zeros(params),
        }
    }

    pub fn with_state(params: &ParamStore, learning_rate: f64, warmup_steps: usize, state: AdamState) -> Result<Self> {
        if !state.matches(params) {
            return Err(Error::config("optimizer state does not match the parameter layout"));
        }
        Ok(Adam {
            learning_rate,
            warmup_steps,
            state,
        })
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    /// Applies one update. Parameters without a gradient see a zero gradient.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        param: params.name(id).to_string(),
                    });
                }
            }
        }
        self.state.step += 1;
        let t = self.state.step;
        let lr = warmup_lr(self.learning_rate, self.warmup_steps, t);
        let c1 = 1.0 - libm::pow(ADAM_BETA1, t as f64);
        let c2 = 1.0 - libm::pow(ADAM_BETA2, t as f64);
        for id in params.ids() {
            let i = id.index();
            let g = grads.get(id);
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let theta = params.get_mut(id).data_mut();
            for j in 0..theta.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                theta[j] -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPSILON);
            }
        }
        Ok(())
    }
}
