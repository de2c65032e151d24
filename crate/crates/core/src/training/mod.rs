//! Losses, optimizer, and the deterministic mini-batch training loop.

mod losses;
mod optim;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{EmotionLabel, Utterance, SOURCE_SPEAKER};
use crate::error::{Error, Result};
use crate::model::{forward_train, Model, ModelConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub use losses::{duration_loss, emotion_classifier_loss, reconstruction_loss, total_loss, WEIGHT_FLOOR};
pub use optim::{warmup_lr, Adam, AdamState, Gradients, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};

/// Version written into and required from checkpoints.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Emotion-classifier loss weight.
    pub alpha: f64,
    /// Duration loss weight.
    pub beta: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Speaker whose utterances carry emotion labels.
    pub source_speaker_id: usize,
    /// Steps between saved checkpoints; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            alpha: 0.1,
            beta: 0.1,
            batch_size: 32,
            total_steps: 200_000,
            learning_rate: 1e-3,
            warmup_steps: 200,
            seed: 1234,
            source_speaker_id: SOURCE_SPEAKER,
            checkpoint_every: 10_000,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            total_steps: 1000,
            checkpoint_every: 500,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("loss weights must be finite and non-negative, got alpha {} beta {}", self.alpha, self.beta));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    /// 1-based index of the completed step.
    pub step: usize,
    pub total: f64,
    pub reco_sum: f64,
    pub l_ec: f64,
    pub l_dur: f64,
    /// Argmax accuracy of token weights on labeled items; `None` without any.
    pub token_acc: Option<f64>,
}

impl StepMetrics {
    /// `step,total,reco_sum,l_ec,l_dur,token_acc`
    pub fn csv_line(&self) -> String {
        let acc = self.token_acc.map_or_else(|| "nan".to_string(), |a| format!("{a}"));
        format!(
            "{},{},{},{},{},{}",
            self.step, self.total, self.reco_sum, self.l_ec, self.l_dur, acc
        )
    }
}

/// Everything needed to restore a model and resume training bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// In parameter registration order.
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    /// Rebuilds the model, requiring the exact parameter set of its config.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model_config.clone(), 0)?;
        load_params(&mut model, &self.params)?;
        Ok(model)
    }
}

/// Overwrites every parameter of `model` from named tensors. Unknown,
/// missing, or misshapen entries are errors.
pub fn load_params(model: &mut Model, entries: &[(String, Tensor)]) -> Result<()> {
    let store = model.params_mut();
    if entries.len() != store.len() {
        let missing: Vec<&str> = store
            .iter()
            .map(|(_, n, _)| n)
            .filter(|n| !entries.iter().any(|(e, _)| e == n))
            .collect();
        if !missing.is_empty() {
            return Err(Error::config(format!("missing parameters: {}", missing.join(", "))));
        }
    }
    for (name, t) in entries {
        store.assign(name, t.clone())?;
    }
    Ok(())
}

/// Index permutation of a training set for one epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Item indices of 0-based step `step`: consecutive slots of the endless
/// sequence of epoch permutations.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let start = step * batch_size as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (start..start + batch_size as u64)
        .map(|slot| {
            let epoch = slot / n as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                cached = Some((epoch, epoch_permutation(n, seed, epoch)));
            }
            cached.as_ref().expect("filled above").1[(slot % n as u64) as usize]
        })
        .collect()
}

/// Labels as seen by training: only the source speaker's labels are kept.
pub fn training_label(utt: &Utterance, source_speaker: usize) -> EmotionLabel {
    if utt.speaker_id == source_speaker {
        utt.emotion
    } else {
        EmotionLabel::Absent
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Model plus optimizer state and a step counter.
pub struct Trainer {
    model: Model,
    config: TrainConfig,
    adam: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(model.params(), config.learning_rate, config.warmup_steps);
        Ok(Trainer {
            model,
            config,
            adam,
            step: 0,
        })
    }

    /// Continues from a checkpoint. A checkpoint without optimizer state
    /// restarts the moments from zero.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = ckpt.to_model()?;
        let adam = match &ckpt.optimizer {
            Some(state) => Adam::with_state(model.params(), config.learning_rate, config.warmup_steps, state.clone())?,
            None => Adam::new(model.params(), config.learning_rate, config.warmup_steps),
        };
        Ok(Trainer {
            model,
            config,
            adam,
            step: ckpt.step,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            step: self.step,
            model_config: self.model.config().clone(),
            train_config: self.config.clone(),
            params: self
                .model
                .params()
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
            optimizer: Some(self.adam.state().clone()),
        }
    }

    /// One optimizer update on `batch`.
    pub fn train_batch(&mut self, batch: &[&Utterance]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::input("empty training batch"));
        }
        let cfg = &self.config;
        let model = &self.model;
        let mut tape = Tape::new(model.params());
        let t = &mut tape;
        let stacks = model.config().num_decoder_stacks;
        let mut reco_terms: Vec<Vec<crate::Var>> = alloc::vec![Vec::new(); stacks];
        let mut dur_terms = Vec::with_capacity(batch.len());
        let mut weights = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for utt in batch {
            let out = forward_train(t, model, utt).map_err(|e| e.with_utterance(&utt.utt_id))?;
            let target = t.constant(utt.mel.clone());
            let reco = reconstruction_loss(t, &out.mel_preds, target)?;
            for (k, r) in reco.into_iter().enumerate() {
                reco_terms[k].push(r);
            }
            dur_terms.push(duration_loss(t, out.log_durations, &utt.durations).map_err(|e| e.with_utterance(&utt.utt_id))?);
            weights.push(out.token_weights);
            labels.push(training_label(utt, cfg.source_speaker_id));
        }
        let inv_b = 1.0 / batch.len() as f64;
        let mean = |t: &mut Tape<'_>, vars: &[crate::Var]| -> Result<crate::Var> {
            let mut acc = vars[0];
            for &v in &vars[1..] {
                acc = t.add(acc, v)?;
            }
            Ok(t.scale(acc, inv_b))
        };
        let reco = reco_terms
            .iter()
            .map(|terms| mean(t, terms))
            .collect::<Result<Vec<_>>>()?;
        let l_dur = mean(t, &dur_terms)?;
        let l_ec = if cfg.alpha > 0.0 {
            emotion_classifier_loss(t, &weights, &labels)?
        } else {
            t.constant(Tensor::scalar(0.0))
        };
        let total = total_loss(t, &reco, l_ec, l_dur, cfg.alpha, cfg.beta)?;

        let mut hits = 0usize;
        let mut labeled = 0usize;
        for (&w, label) in weights.iter().zip(&labels) {
            if let Some(id) = label.id() {
                labeled += 1;
                if argmax(t.value(w)) == id {
                    hits += 1;
                }
            }
        }
        let metrics = StepMetrics {
            step: self.step as usize + 1,
            total: t.scalar(total),
            reco_sum: reco.iter().map(|&r| t.scalar(r)).sum(),
            l_ec: t.scalar(l_ec),
            l_dur: t.scalar(l_dur),
            token_acc: (labeled > 0).then(|| hits as f64 / labeled as f64),
        };
        t.backward(total)?;
        let grads = Gradients::from_tape(t);
        drop(tape);
        self.adam.step(self.model.params_mut(), &grads)?;
        self.step += 1;
        Ok(metrics)
    }

    /// Trains until `total_steps`, calling `observer` after every step.
    pub fn run<F>(&mut self, items: &[Utterance], mut observer: F) -> Result<()>
    where
        F: FnMut(&StepMetrics, &Trainer) -> Result<()>,
    {
        if items.is_empty() {
            return Err(Error::input("training set is empty"));
        }
        for item in items {
            item.validate()?;
        }
        while self.step < self.config.total_steps as u64 {
            let idx = batch_indices(items.len(), self.config.batch_size, self.config.seed, self.step);
            let batch: Vec<&Utterance> = idx.iter().map(|&i| &items[i]).collect();
            let metrics = self.train_batch(&batch)?;
            observer(&metrics, self)?;
        }
        Ok(())
    }
}

/// Fresh model seeded from `cfg.seed`, trained to `cfg.total_steps`.
pub fn train<F>(items: &[Utterance], cfg: TrainConfig, model_cfg: ModelConfig, observer: F) -> Result<Checkpoint>
where
    F: FnMut(&StepMetrics, &Trainer) -> Result<()>,
{
    let model = Model::new(model_cfg, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg)?;
    trainer.run(items, observer)?;
    Ok(trainer.checkpoint())
}
