//! The emotion-transfer acoustic model: text encoder, reference encoder and
//! emotion tokens, duration predictor, length regulator, and a stack of
//! speaker-conditioned LConv decoder blocks.

mod config;
mod forward;

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{FeedForward, LConvParams, LayerNormParams, Linear, SclnParams, TransformerBlock};
use crate::nn::AttentionParams;
use crate::params::{ParamId, ParamStore};

pub use config::ModelConfig;
pub use forward::{
    decoder, decoder_with, duration_predictor, emotion_attention, emotion_attention_forced,
    emotion_from_id, forward_train, reference_encoder, round_duration, speaker_embedding, synthesize,
    text_encoder, upsample, DecoderConditioning, DurationOutput, EmotionOutput, Synthesis,
    TrainOutputs,
};

/// Output channels of the strided reference convolutions.
pub const REFERENCE_CHANNELS: [usize; 4] = [32, 32, 64, 64];
/// Kernel width of the duration predictor's LConv.
pub const DURATION_KERNEL: usize = 3;

const SCLN_WEIGHT_STD: f64 = 0.01;
const TOKEN_STD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    /// `[input × 3h]`, gate order update, reset, candidate.
    pub input: Linear,
    /// `[h × 3h]`
    pub hidden: Linear,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEncoder {
    /// Each maps a flattened 3×3 patch to the next channel count.
    pub convs: Vec<Linear>,
    pub gru: Gru,
    pub proj: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DurationPredictor {
    pub block: TransformerBlock,
    pub speaker_proj: Linear,
    pub lconv_norm: LayerNormParams,
    pub lconv: LConvParams,
    pub out_norm: LayerNormParams,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStack {
    pub lconv: LConvParams,
    pub lconv_scln: SclnParams,
    pub ff: FeedForward,
    pub ff_scln: SclnParams,
    pub mel_head: Linear,
}

/// Parameter handles for every block.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub phonemes: ParamId,
    pub speakers: ParamId,
    pub encoder: Vec<TransformerBlock>,
    pub reference: ReferenceEncoder,
    pub tokens: ParamId,
    pub token_attention: AttentionParams,
    pub duration: DurationPredictor,
    pub decoder: Vec<DecoderStack>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Fresh parameters; identical `(config, seed)` give identical models.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let rng = &mut rng;
        let s = &mut store;

        let phonemes = s.register_normal("text.phonemes", &[config.num_phonemes, d], 1.0, rng);
        let speakers = s.register_normal("speakers", &[config.num_speakers, config.d_spk], 1.0, rng);
        let encoder = (0..config.num_encoder_layers)
            .map(|i| TransformerBlock::new(s, rng, &format!("text.block{i}"), d, config.transformer_heads))
            .collect::<Result<Vec<_>>>()?;

        let mut convs = Vec::with_capacity(REFERENCE_CHANNELS.len());
        let mut channels = 1;
        for (i, &out) in REFERENCE_CHANNELS.iter().enumerate() {
            convs.push(Linear::new(s, rng, &format!("reference.conv{i}"), 9 * channels, out, true));
            channels = out;
        }
        let gru_in = reference_width(config.mel_bins) * channels;
        let h = config.token_dim;
        let reference = ReferenceEncoder {
            convs,
            gru: Gru {
                input: Linear::new(s, rng, "reference.gru.input", gru_in, 3 * h, true),
                hidden: Linear::new(s, rng, "reference.gru.hidden", h, 3 * h, true),
                width: h,
            },
            proj: Linear::new(s, rng, "reference.proj", h, h, true),
        };

        let tokens = s.register_normal("tokens", &[config.num_tokens, h], TOKEN_STD, rng);
        let token_attention = AttentionParams::new(
            s,
            rng,
            "token_attention",
            h,
            h,
            h,
            config.attention_heads_token,
        )?;

        let duration = DurationPredictor {
            block: TransformerBlock::new(s, rng, "duration.block", d, config.transformer_heads)?,
            speaker_proj: Linear::new(s, rng, "duration.speaker_proj", config.d_spk, d, true),
            lconv_norm: LayerNormParams::new(s, "duration.lconv_norm", d),
            lconv: LConvParams::new(s, rng, "duration.lconv", d, config.lconv_heads, DURATION_KERNEL)?,
            out_norm: LayerNormParams::new(s, "duration.out_norm", d),
            out: Linear::new(s, rng, "duration.out", d, 1, true),
        };

        let decoder = (0..config.num_decoder_stacks)
            .map(|k| {
                let name = format!("decoder.stack{k}");
                Ok(DecoderStack {
                    lconv: LConvParams::new(
                        s,
                        rng,
                        &format!("{name}.lconv"),
                        d,
                        config.lconv_heads,
                        config.lconv_kernel,
                    )?,
                    lconv_scln: SclnParams::new(s, rng, &format!("{name}.lconv_scln"), d, config.d_spk, SCLN_WEIGHT_STD),
                    ff: FeedForward::new(s, rng, &format!("{name}.ff"), d),
                    ff_scln: SclnParams::new(s, rng, &format!("{name}.ff_scln"), d, config.d_spk, SCLN_WEIGHT_STD),
                    mel_head: Linear::new(s, rng, &format!("{name}.mel"), d, config.mel_bins, true),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let layout = Layout {
            phonemes,
            speakers,
            encoder,
            reference,
            tokens,
            token_attention,
            duration,
            decoder,
        };
        Ok(Model {
            config,
            params: store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }
}

/// Feature width after the strided reference convolutions: `ceil(w / 16)`.
pub fn reference_width(mel_bins: usize) -> usize {
    let mut w = mel_bins;
    for _ in REFERENCE_CHANNELS {
        w = w.div_ceil(2);
    }
    w
}
