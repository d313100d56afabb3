//! Architecture hyperparameters and model modes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Which branches of the network are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Audio encoder and decoder only.
    #[serde(rename = "audio")]
    Audio,
    /// Audio and video encoders joined by the align stack.
    #[serde(rename = "av")]
    Av,
    /// `Av` plus the action-unit regression head on the video encoder.
    #[serde(rename = "av+au")]
    AvAu,
}

impl Mode {
    pub fn has_video(self) -> bool {
        !matches!(self, Mode::Audio)
    }

    pub fn has_au_head(self) -> bool {
        matches!(self, Mode::AvAu)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Audio => "audio",
            Mode::Av => "av",
            Mode::AvAu => "av+au",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Mode::Audio),
            "av" => Ok(Mode::Av),
            "av+au" => Ok(Mode::AvAu),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected audio, av or av+au"
            ))),
        }
    }
}

/// How the align block combines visual context with the audio stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `o_AV = c_V + o_A`.
    #[default]
    Residual,
    /// `o_AV = W [c_V; o_A] + b`.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_align_blocks: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Channel widths of the stem and the four residual stages.
    pub cnn_widths: [usize; 4],
    /// Output channels of the final 5x5 convolution.
    pub cnn_out: usize,
    /// Number of action units predicted by the auxiliary head.
    pub n_au: usize,
    pub fusion: Fusion,
    pub layer_norm_eps: f64,
    /// Per-utterance mean/variance normalisation of the audio features.
    pub normalize_features: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(Vocab::default().size())
    }
}

impl ModelConfig {
    /// Published configuration: 6+6 layers, width 256, one head, 0.1 dropout.
    pub fn full_scale(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 256,
            d_ff: 256,
            n_encoder_layers: 6,
            n_decoder_layers: 6,
            n_align_blocks: 1,
            n_heads: 1,
            dropout: 0.1,
            vocab_size,
            max_len: 2048,
            cnn_widths: [8, 16, 32, 64],
            cnn_out: 128,
            n_au: 2,
            fusion: Fusion::Residual,
            layer_norm_eps: 1e-6,
            normalize_features: false,
        }
    }

    /// Smallest configuration used for exhaustive gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            d_ff: 8,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            n_align_blocks: 1,
            n_heads: 1,
            dropout: 0.1,
            vocab_size: 5,
            max_len: 256,
            cnn_widths: [4, 4, 4, 4],
            cnn_out: 4,
            n_au: 2,
            fusion: Fusion::Residual,
            layer_norm_eps: 1e-6,
            normalize_features: false,
        }
    }

    /// Laptop-scale configuration for the synthetic experiments.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 32,
            d_ff: 128,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            n_align_blocks: 1,
            n_heads: 1,
            dropout: 0.0,
            vocab_size,
            max_len: 512,
            cnn_widths: [4, 8, 8, 16],
            cnn_out: 32,
            n_au: 2,
            fusion: Fusion::Residual,
            layer_norm_eps: 1e-6,
            normalize_features: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return fail("d_model, d_ff and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size < 4 {
            return fail(format!(
                "vocab_size {} leaves no room beyond the special tokens",
                self.vocab_size
            ));
        }
        if self.max_len == 0 || self.n_align_blocks == 0 {
            return fail("max_len and n_align_blocks must be positive".into());
        }
        if self.cnn_widths.contains(&0) || self.cnn_out == 0 || self.n_au == 0 {
            return fail("CNN widths and n_au must be positive".into());
        }
        Ok(())
    }
}
