use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::{MEL_BINS, NUM_EMOTIONS, NUM_SPEAKERS};
use crate::error::{Error, Result};

/// Hyperparameters fixing the parameter layout of a [`Model`](super::Model).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_phonemes: usize,
    pub num_speakers: usize,
    /// Encoder and decoder hidden width.
    pub d_model: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_stacks: usize,
    pub num_tokens: usize,
    pub token_dim: usize,
    pub attention_heads_token: usize,
    pub d_spk: usize,
    pub mel_bins: usize,
    /// Decoder LConv kernel width.
    pub lconv_kernel: usize,
    /// Channel groups sharing one LConv kernel.
    pub lconv_heads: usize,
    pub transformer_heads: usize,
    /// Upper clamp on a single predicted duration at inference.
    pub max_duration_frames: usize,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            num_phonemes: 40,
            num_speakers: NUM_SPEAKERS,
            d_model: 256,
            num_encoder_layers: 4,
            num_decoder_stacks: 6,
            num_tokens: NUM_EMOTIONS,
            token_dim: 256,
            attention_heads_token: 1,
            d_spk: 64,
            mel_bins: MEL_BINS,
            lconv_kernel: 3,
            lconv_heads: 4,
            transformer_heads: 4,
            max_duration_frames: 40,
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            d_model: 128,
            token_dim: 128,
            num_encoder_layers: 2,
            ..Self::paper()
        }
    }

    /// Same widths, ten tokens read by four heads.
    pub fn m2(self) -> Self {
        ModelConfig {
            num_tokens: 10,
            attention_heads_token: 4,
            ..self
        }
    }

    /// Smallest layout that still exercises every block; for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            num_phonemes: 6,
            num_speakers: NUM_SPEAKERS,
            d_model: 8,
            num_encoder_layers: 1,
            num_decoder_stacks: 2,
            num_tokens: NUM_EMOTIONS,
            token_dim: 8,
            attention_heads_token: 1,
            d_spk: 4,
            mel_bins: 16,
            lconv_kernel: 3,
            lconv_heads: 2,
            transformer_heads: 2,
            max_duration_frames: 8,
        }
    }

    /// Field names and values in declaration order.
    pub fn fields(&self) -> [(&'static str, usize); 14] {
        [
            ("num_phonemes", self.num_phonemes),
            ("num_speakers", self.num_speakers),
            ("d_model", self.d_model),
            ("num_encoder_layers", self.num_encoder_layers),
            ("num_decoder_stacks", self.num_decoder_stacks),
            ("num_tokens", self.num_tokens),
            ("token_dim", self.token_dim),
            ("attention_heads_token", self.attention_heads_token),
            ("d_spk", self.d_spk),
            ("mel_bins", self.mel_bins),
            ("lconv_kernel", self.lconv_kernel),
            ("lconv_heads", self.lconv_heads),
            ("transformer_heads", self.transformer_heads),
            ("max_duration_frames", self.max_duration_frames),
        ]
    }

    /// Names of the fields on which `self` and `other` disagree.
    pub fn diff(&self, other: &ModelConfig) -> Vec<&'static str> {
        self.fields()
            .iter()
            .zip(other.fields().iter())
            .filter(|(a, b)| a.1 != b.1)
            .map(|(a, _)| a.0)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in self.fields() {
            if value == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        let mut problems: Vec<String> = Vec::new();
        if self.token_dim != self.d_model {
            problems.push(format!(
                "token_dim {} must equal d_model {}",
                self.token_dim, self.d_model
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            problems.push(format!("d_model {} must be even", self.d_model));
        }
        if self.lconv_kernel.is_multiple_of(2) {
            problems.push(format!("lconv_kernel {} must be odd", self.lconv_kernel));
        }
        for (name, heads) in [
            ("lconv_heads", self.lconv_heads),
            ("transformer_heads", self.transformer_heads),
            ("attention_heads_token", self.attention_heads_token),
        ] {
            if !self.d_model.is_multiple_of(heads) {
                problems.push(format!("{name} {heads} must divide d_model {}", self.d_model));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [
            ModelConfig::paper(),
            ModelConfig::desk(),
            ModelConfig::desk().m2(),
            ModelConfig::tiny(),
        ] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn diff_names_fields() {
        let a = ModelConfig::desk();
        let b = ModelConfig { d_spk: 32, num_tokens: 9, ..a.clone() };
        assert_eq!(a.diff(&b), ["num_tokens", "d_spk"]);
        assert!(a.diff(&a).is_empty());
    }

    #[test]
    fn mismatched_token_dim_rejected() {
        let cfg = ModelConfig { token_dim: 64, ..ModelConfig::desk() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
