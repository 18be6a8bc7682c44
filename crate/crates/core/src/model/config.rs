use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::RasterConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Full,
    /// Learned key/value projections per layer and head.
    Linear,
    /// One projection matrix shared by every head and layer.
    LinearShared,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Full => "full",
            AttentionKind::Linear => "linear",
            AttentionKind::LinearShared => "linear_shared",
        })
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AttentionKind::Full),
            "linear" => Ok(AttentionKind::Linear),
            "linear_shared" | "linear-shared" => Ok(AttentionKind::LinearShared),
            _ => Err(Error::invalid(format!("unknown attention kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width D.
    pub d_model: usize,
    /// Encoder and decoder layer count.
    pub layers: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Hidden width of the position-wise feed-forward block.
    pub d_ff: usize,
    /// Projected length for linear attention; 0 selects full attention.
    pub p: usize,
    pub shared_projection: bool,
    /// Number of predicted modes K.
    pub modes: usize,
    /// History steps m.
    pub history: usize,
    /// Horizon steps H.
    pub horizon: usize,
    pub dropout: f64,
    /// Output channels of the stride-2 convolutions in the context encoder.
    pub conv_channels: Vec<usize>,
    pub raster: RasterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            layers: 2,
            heads: 4,
            d_k: 16,
            d_v: 16,
            d_ff: 128,
            p: 8,
            shared_projection: false,
            modes: 3,
            history: 10,
            horizon: 50,
            dropout: 0.1,
            conv_channels: vec![8, 16, 16, 32],
            raster: RasterConfig::desk(),
        }
    }

    /// Full-size widths. The projected length is capped by the encoder
    /// sequence length (history plus the context token).
    pub fn large() -> Self {
        ModelConfig {
            d_model: 512,
            layers: 6,
            heads: 8,
            d_k: 64,
            d_v: 64,
            d_ff: 2048,
            p: 11,
            conv_channels: vec![32, 64, 128, 256],
            raster: RasterConfig::large(),
            ..ModelConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(ModelConfig::desk()),
            "large" => Ok(ModelConfig::large()),
            _ => Err(Error::invalid(format!(
                "unknown preset {name:?} (expected desk or large)"
            ))),
        }
    }

    /// Encoder sequence length: one context token plus the history.
    pub fn encoder_len(&self) -> usize {
        self.history + 1
    }

    pub fn attention(&self) -> AttentionKind {
        match (self.p, self.shared_projection) {
            (0, _) => AttentionKind::Full,
            (_, false) => AttentionKind::Linear,
            (_, true) => AttentionKind::LinearShared,
        }
    }

    /// Switch attention kind, keeping `p` (or defaulting it to the encoder length).
    pub fn with_attention(mut self, kind: AttentionKind) -> Self {
        match kind {
            AttentionKind::Full => {
                self.p = 0;
                self.shared_projection = false;
            }
            AttentionKind::Linear | AttentionKind::LinearShared => {
                if self.p == 0 {
                    self.p = self.encoder_len().min(8);
                }
                self.shared_projection = kind == AttentionKind::LinearShared;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.d_ff == 0 {
            return bad("model widths, layers and heads must be positive".into());
        }
        if self.d_model != self.heads * self.d_k {
            return bad(format!(
                "d_model {} must equal heads {} x d_k {}",
                self.d_model, self.heads, self.d_k
            ));
        }
        if self.d_v == 0 {
            return bad("d_v must be positive".into());
        }
        if self.modes == 0 || self.history == 0 || self.horizon == 0 {
            return bad("modes, history and horizon must be positive".into());
        }
        if self.p > self.encoder_len() {
            return bad(format!(
                "projected length p={} exceeds the encoder length {}",
                self.p,
                self.encoder_len()
            ));
        }
        if self.shared_projection && self.p == 0 {
            return bad("shared projection requires p > 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("context encoder needs at least one non-empty conv layer".into());
        }
        self.raster.validate()
    }
}
