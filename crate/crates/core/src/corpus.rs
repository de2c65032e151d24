//! Seeded synthetic two-speaker corpus and the closed-form oracles that
//! score emotion and speaker identity of any mel-spectrogram.
//!
//! Mel layout (80 bins):
//! - bins 0–59: phoneme content (one Gaussian bump per phoneme, σ = 3 bins)
//!   plus a per-speaker linear tilt, `+0.3·bin/60` for the source speaker and
//!   `−0.3·bin/60` for the target speaker;
//! - bins 60–79: the emotion signature, a Gaussian bump (σ = 1.5 bins) at
//!   `60 + e·20/7`, constant over time.
//!
//! The two regions never overlap, so the emotion oracle and the speaker
//! oracle read disjoint evidence.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_EMOTIONS: usize = 7;
/// Emotion ids follow this order.
pub const EMOTION_NAMES: [&str; NUM_EMOTIONS] =
    ["neutral", "happy", "sad", "angry", "surprise", "scare", "hate"];

pub const SOURCE_SPEAKER: usize = 0;
pub const TARGET_SPEAKER: usize = 1;
pub const NUM_SPEAKERS: usize = 2;

pub const MEL_BINS: usize = 80;
pub const CONTENT_BINS: usize = 60;
pub const EMOTION_BINS: usize = MEL_BINS - CONTENT_BINS;

const PHONEME_WIDTH: f64 = 3.0;
const EMOTION_WIDTH: f64 = 1.5;
const EMOTION_AMPLITUDE: f64 = 1.0;
const TILT: f64 = 0.3;
const TARGET_DURATION_SCALE: f64 = 1.25;

/// Stream offset separating evaluation texts from corpus utterances.
const FIXTURE_STREAM: u64 = 1 << 40;

pub fn emotion_id(name: &str) -> Option<usize> {
    EMOTION_NAMES.iter().position(|n| *n == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmotionLabel {
    Absent,
    Present(usize),
}

impl EmotionLabel {
    pub fn id(&self) -> Option<usize> {
        match self {
            EmotionLabel::Present(id) => Some(*id),
            EmotionLabel::Absent => None,
        }
    }

    pub fn is_present(&self) -> bool {
        matches!(self, EmotionLabel::Present(_))
    }

    /// One-hot vector of length `n`; `None` for an absent label.
    pub fn one_hot(&self, n: usize) -> Option<Tensor> {
        let id = self.id()?;
        let mut t = Tensor::zeros(&[n]);
        if id < n {
            t.data_mut()[id] = 1.0;
        }
        Some(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: usize,
    pub phoneme_ids: Vec<usize>,
    /// Frames per phoneme.
    pub durations: Vec<usize>,
    /// `[frames × mel_bins]`
    pub mel: Tensor,
    pub emotion: EmotionLabel,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.mel.rows()
    }

    /// Checks the per-utterance invariants: aligned phonemes and durations,
    /// positive durations, and durations summing to the frame count.
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::data(detail).with_utterance(&self.utt_id));
        if self.phoneme_ids.is_empty() {
            return fail("no phonemes".into());
        }
        if self.durations.len() != self.phoneme_ids.len() {
            return fail(format!(
                "{} durations for {} phonemes",
                self.durations.len(),
                self.phoneme_ids.len()
            ));
        }
        if self.durations.contains(&0) {
            return fail("zero duration".into());
        }
        let total: usize = self.durations.iter().sum();
        if self.mel.rank() != 2 || total != self.frames() {
            return fail(format!(
                "durations sum to {total} but mel has shape {:?}",
                self.mel.shape()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub num_phonemes: usize,
    pub utterances_per_speaker_per_emotion: usize,
    pub min_phonemes_per_utt: usize,
    pub max_phonemes_per_utt: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub mel_bins: usize,
    pub noise_std: f64,
    /// Peak height of each phoneme's spectral bump.
    pub phoneme_amplitude: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_phonemes: 40,
            utterances_per_speaker_per_emotion: 100,
            min_phonemes_per_utt: 4,
            max_phonemes_per_utt: 8,
            min_duration: 2,
            max_duration: 12,
            mel_bins: MEL_BINS,
            noise_std: 0.05,
            phoneme_amplitude: 0.3,
            seed: 1234,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_phonemes", self.num_phonemes),
            (
                "utterances_per_speaker_per_emotion",
                self.utterances_per_speaker_per_emotion,
            ),
            ("min_phonemes_per_utt", self.min_phonemes_per_utt),
            ("min_duration", self.min_duration),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("corpus.{name} must be positive")));
            }
        }
        if self.max_phonemes_per_utt < self.min_phonemes_per_utt {
            return Err(Error::config(
                "corpus.max_phonemes_per_utt must be >= corpus.min_phonemes_per_utt",
            ));
        }
        if self.max_duration < self.min_duration {
            return Err(Error::config("corpus.max_duration must be >= corpus.min_duration"));
        }
        if self.mel_bins != MEL_BINS {
            return Err(Error::config(format!(
                "corpus.mel_bins must be {MEL_BINS} (the emotion signature occupies bins 60-79)"
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("corpus.noise_std must be finite and >= 0"));
        }
        if !(self.phoneme_amplitude >= 0.0 && self.phoneme_amplitude.is_finite()) {
            return Err(Error::config("corpus.phoneme_amplitude must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Latent emotions of unlabeled utterances. Only evaluation code reads it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SideTable {
    entries: Vec<(String, usize)>,
}

impl SideTable {
    pub fn new(entries: Vec<(String, usize)>) -> Self {
        SideTable { entries }
    }

    pub fn entries(&self) -> &[(String, usize)] {
        &self.entries
    }

    pub fn true_emotion(&self, utt_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .find(|(id, _)| id == utt_id)
            .map(|(_, e)| *e)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub validation: Vec<Utterance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Utterance> {
        self.train.iter().chain(&self.validation)
    }
}

fn gaussian(x: f64, center: f64, width: f64) -> f64 {
    let z = (x - center) / width;
    libm::exp(-0.5 * z * z)
}

pub fn phoneme_center(phoneme: usize, num_phonemes: usize) -> f64 {
    4.0 + phoneme as f64 * (56.0 / num_phonemes as f64)
}

pub fn emotion_center(emotion: usize) -> f64 {
    CONTENT_BINS as f64 + emotion as f64 * (EMOTION_BINS as f64 / NUM_EMOTIONS as f64)
}

fn speaker_tilt(speaker: usize) -> f64 {
    if speaker == SOURCE_SPEAKER {
        TILT
    } else {
        -TILT
    }
}

pub fn speaker_duration_scale(speaker: usize) -> f64 {
    if speaker == SOURCE_SPEAKER {
        1.0
    } else {
        TARGET_DURATION_SCALE
    }
}

/// Noise-free spectrum of one frame.
fn frame_spectrum(cfg: &CorpusConfig, phoneme: usize, speaker: usize, emotion: usize) -> Vec<f64> {
    let c = phoneme_center(phoneme, cfg.num_phonemes);
    let e = emotion_center(emotion);
    let tilt = speaker_tilt(speaker);
    (0..MEL_BINS)
        .map(|b| {
            let x = b as f64;
            if b < CONTENT_BINS {
                cfg.phoneme_amplitude * gaussian(x, c, PHONEME_WIDTH)
                    + tilt * (x / CONTENT_BINS as f64)
            } else {
                EMOTION_AMPLITUDE * gaussian(x, e, EMOTION_WIDTH)
            }
        })
        .collect()
}

/// Random phoneme sequence with its speaker-scaled durations.
fn draw_text<R: Rng>(cfg: &CorpusConfig, speaker: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let len = rng.random_range(cfg.min_phonemes_per_utt..=cfg.max_phonemes_per_utt);
    let phonemes: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.num_phonemes)).collect();
    let scale = speaker_duration_scale(speaker);
    let durations = (0..len)
        .map(|_| {
            let base = rng.random_range(cfg.min_duration..=cfg.max_duration) as f64;
            (libm::round(base * scale) as usize).max(1)
        })
        .collect();
    (phonemes, durations)
}

/// Renders the mel of a phoneme sequence for a speaker and latent emotion,
/// adding `cfg.noise_std` Gaussian noise from `rng`.
pub fn render_mel<R: Rng>(
    cfg: &CorpusConfig,
    phonemes: &[usize],
    durations: &[usize],
    speaker: usize,
    emotion: usize,
    rng: &mut R,
) -> Tensor {
    let frames: usize = durations.iter().sum();
    let mut data = Vec::with_capacity(frames * MEL_BINS);
    for (&p, &d) in phonemes.iter().zip(durations) {
        let spectrum = frame_spectrum(cfg, p, speaker, emotion);
        for _ in 0..d {
            data.extend_from_slice(&spectrum);
        }
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise std");
        for v in &mut data {
            *v += noise.sample(rng);
        }
    }
    Tensor::new(alloc::vec![frames, MEL_BINS], data).expect("frames > 0")
}

fn utterance_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates both speakers' utterances. Within a speaker, utterance `i` has
/// latent emotion `i mod 7`, and the last 10% of each speaker's utterances
/// form the validation split. Target-speaker labels are withheld and their
/// latent emotions go to the returned side table.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<(Corpus, SideTable)> {
    cfg.validate()?;
    let per_speaker = cfg.utterances_per_speaker_per_emotion * NUM_EMOTIONS;
    let n_val = per_speaker / 10;
    let mut corpus = Corpus::default();
    let mut side = Vec::new();
    for speaker in 0..NUM_SPEAKERS {
        for i in 0..per_speaker {
            let emotion = i % NUM_EMOTIONS;
            let mut rng = utterance_rng(cfg.seed, (speaker * per_speaker + i) as u64);
            let (phoneme_ids, durations) = draw_text(cfg, speaker, &mut rng);
            let mel = render_mel(cfg, &phoneme_ids, &durations, speaker, emotion, &mut rng);
            let utt_id = format!("spk{speaker}_{i:05}");
            let label = if speaker == SOURCE_SPEAKER {
                EmotionLabel::Present(emotion)
            } else {
                side.push((utt_id.clone(), emotion));
                EmotionLabel::Absent
            };
            let utt = Utterance {
                utt_id,
                speaker_id: speaker,
                phoneme_ids,
                durations,
                mel,
                emotion: label,
            };
            if i >= per_speaker - n_val {
                corpus.validation.push(utt);
            } else {
                corpus.train.push(utt);
            }
        }
    }
    Ok((corpus, SideTable::new(side)))
}

/// Held-out phoneme sequences for evaluation, `per_emotion` for each of the
/// seven emotions (emotion-major order). They come from a random stream
/// disjoint from every corpus utterance.
pub fn fixture_texts(cfg: &CorpusConfig, per_emotion: usize) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let mut rng = utterance_rng(cfg.seed, FIXTURE_STREAM);
    Ok((0..per_emotion * NUM_EMOTIONS)
        .map(|_| draw_text(cfg, SOURCE_SPEAKER, &mut rng).0)
        .collect())
}

fn frame_average(mel: &Tensor, bins: core::ops::Range<usize>) -> Result<Vec<f64>> {
    if mel.rank() != 2 || mel.cols() != MEL_BINS {
        return Err(Error::input(format!(
            "oracle expects a [frames x {MEL_BINS}] mel, got {:?}",
            mel.shape()
        )));
    }
    let frames = mel.rows();
    let mut avg = alloc::vec![0.0; bins.len()];
    for t in 0..frames {
        for (a, v) in avg.iter_mut().zip(&mel.row(t)[bins.clone()]) {
            *a += v;
        }
    }
    avg.iter_mut().for_each(|a| *a /= frames as f64);
    Ok(avg)
}

/// Emotion whose signature template best correlates with the frame-averaged
/// bins 60–79; ties go to the lowest id.
pub fn oracle_emotion_classify(mel: &Tensor) -> Result<usize> {
    let avg = frame_average(mel, CONTENT_BINS..MEL_BINS)?;
    let mut best = (0, f64::NEG_INFINITY);
    for e in 0..NUM_EMOTIONS {
        let center = emotion_center(e);
        let score: f64 = avg
            .iter()
            .enumerate()
            .map(|(j, v)| v * gaussian((CONTENT_BINS + j) as f64, center, EMOTION_WIDTH))
            .sum();
        if score > best.1 {
            best = (e, score);
        }
    }
    Ok(best.0)
}

/// Least-squares slope of the frame-averaged spectrum over bins 0–59.
pub fn spectral_tilt(mel: &Tensor) -> Result<f64> {
    let avg = frame_average(mel, 0..CONTENT_BINS)?;
    let n = CONTENT_BINS as f64;
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = avg.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (b, y) in avg.iter().enumerate() {
        let dx = b as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    Ok(sxy / sxx)
}

/// Source speaker for a strictly positive tilt, target speaker otherwise.
pub fn oracle_speaker_classify(mel: &Tensor) -> Result<usize> {
    Ok(if spectral_tilt(mel)? > 0.0 {
        SOURCE_SPEAKER
    } else {
        TARGET_SPEAKER
    })
}
