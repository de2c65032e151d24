//! The run configuration file: a TOML document with `model`, `train`,
//! `corpus` and `paths` sections. Missing keys take the desk preset value;
//! unknown keys are rejected by their dotted name.

use std::path::Path;

use emovox_core::corpus::CorpusConfig;
use emovox_core::model::ModelConfig;
use emovox_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};

pub const DESK_PRESET: &str = include_str!("../presets/desk.toml");
pub const PAPER_PRESET: &str = include_str!("../presets/paper.toml");

/// Declares a serde mirror of a core config struct. The conversion back
/// names every field, so a field added to the core struct fails to compile
/// until it is addressable here too.
macro_rules! mirror {
    ($section:ident, $core:ident { $($field:ident: $ty:ty),* $(,)? }) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $section {
            $(pub $field: $ty,)*
        }

        impl From<$core> for $section {
            fn from(c: $core) -> Self {
                $section { $($field: c.$field,)* }
            }
        }

        impl From<$section> for $core {
            fn from(s: $section) -> Self {
                $core { $($field: s.$field,)* }
            }
        }

        impl Default for $section {
            fn default() -> Self {
                $core::default().into()
            }
        }
    };
}

mirror!(ModelSection, ModelConfig {
    num_phonemes: usize,
    num_speakers: usize,
    d_model: usize,
    num_encoder_layers: usize,
    num_decoder_stacks: usize,
    num_tokens: usize,
    token_dim: usize,
    attention_heads_token: usize,
    d_spk: usize,
    mel_bins: usize,
    lconv_kernel: usize,
    lconv_heads: usize,
    transformer_heads: usize,
    max_duration_frames: usize,
});

mirror!(TrainSection, TrainConfig {
    alpha: f64,
    beta: f64,
    batch_size: usize,
    total_steps: usize,
    learning_rate: f64,
    warmup_steps: usize,
    seed: u64,
    source_speaker_id: usize,
    checkpoint_every: usize,
});

mirror!(CorpusSection, CorpusConfig {
    num_phonemes: usize,
    utterances_per_speaker_per_emotion: usize,
    min_phonemes_per_utt: usize,
    max_phonemes_per_utt: usize,
    min_duration: usize,
    max_duration: usize,
    mel_bins: usize,
    noise_std: f64,
    phoneme_amplitude: f64,
    seed: u64,
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data_dir: "data".into(),
            out_dir: "runs/desk".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: ModelSection,
    pub train: TrainSection,
    pub corpus: CorpusSection,
    pub paths: PathsSection,
}

impl RunConfigFile {
    pub fn desk() -> Self {
        RunConfigFile {
            model: ModelConfig::desk().into(),
            train: TrainConfig::desk().into(),
            corpus: CorpusConfig::default().into(),
            paths: PathsSection::default(),
        }
    }

    pub fn paper() -> Self {
        RunConfigFile {
            model: ModelConfig::paper().into(),
            train: TrainConfig::paper().into(),
            corpus: CorpusConfig::default().into(),
            paths: PathsSection {
                out_dir: "runs/paper".into(),
                ..PathsSection::default()
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        reject_unknown_keys(&table)?;
        let cfg: RunConfigFile = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().into()
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone().into()
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        self.corpus.clone().into()
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        let corpus = self.corpus_config();
        corpus.validate()?;
        if self.model.mel_bins != corpus.mel_bins {
            return Err(CliError::Config(format!(
                "model.mel_bins = {} but corpus.mel_bins = {}",
                self.model.mel_bins, corpus.mel_bins
            )));
        }
        if self.model.num_phonemes < corpus.num_phonemes {
            return Err(CliError::Config(format!(
                "model.num_phonemes = {} cannot embed corpus.num_phonemes = {}",
                self.model.num_phonemes, corpus.num_phonemes
            )));
        }
        Ok(())
    }
}

fn reject_unknown_keys(table: &toml::Table) -> Result<()> {
    let known = toml::Table::try_from(RunConfigFile::desk()).map_err(|e| CliError::Config(e.to_string()))?;
    for (section, value) in table {
        let Some(known_keys) = known.get(section).and_then(|v| v.as_table()) else {
            let key = match value.as_table().and_then(|t| t.keys().next()) {
                Some(k) => format!("{section}.{k}"),
                None => section.clone(),
            };
            return Err(CliError::Config(format!("unknown key `{key}`")));
        };
        let Some(keys) = value.as_table() else {
            return Err(CliError::Config(format!("`{section}` must be a table")));
        };
        if let Some(k) = keys.keys().find(|k| !known_keys.contains_key(*k)) {
            return Err(CliError::Config(format!("unknown key `{section}.{k}`")));
        }
    }
    Ok(())
}
