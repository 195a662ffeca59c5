use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WrdError};

/// Sequence-modeling sublayer mounted in the encoder stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Bidirectional GRU.
    Rnn,
    /// Unmasked multi-head self-attention.
    San,
    /// Self-attention with half the heads forward-masked and half
    /// backward-masked.
    Disan,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Rnn, Arch::San, Arch::Disan];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Rnn => "rnn",
            Arch::San => "san",
            Arch::Disan => "disan",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = WrdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" | "gru" => Ok(Arch::Rnn),
            "san" => Ok(Arch::San),
            "disan" => Ok(Arch::Disan),
            other => Err(WrdError::Config(format!(
                "unknown architecture `{other}` (rnn | san | disan)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub arch: Arch,
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub use_position_encoding: bool,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults: 2 layers of width 64.
    pub fn desk(arch: Arch) -> Self {
        EncoderConfig {
            arch,
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            use_position_encoding: true,
            dropout: 0.1,
        }
    }

    /// Transformer-base sizes: 6 layers of width 512, 8 heads, 2048 FFN.
    pub fn paper(arch: Arch) -> Self {
        EncoderConfig {
            arch,
            num_layers: 6,
            model_dim: 512,
            num_heads: 8,
            ffn_dim: 2048,
            use_position_encoding: true,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.model_dim;
        if self.num_layers == 0 || d == 0 || self.ffn_dim == 0 || self.num_heads == 0 {
            return Err(WrdError::Config(
                "layers, dim, heads and ffn_dim must be positive".into(),
            ));
        }
        if !d.is_multiple_of(2) {
            return Err(WrdError::Config(format!("model_dim {d} must be even")));
        }
        if !d.is_multiple_of(self.num_heads) {
            return Err(WrdError::Config(format!(
                "model_dim {d} not divisible by num_heads {}",
                self.num_heads
            )));
        }
        if self.arch == Arch::Disan && !self.num_heads.is_multiple_of(2) {
            return Err(WrdError::Config(format!(
                "disan needs an even head count, got {}",
                self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(WrdError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
