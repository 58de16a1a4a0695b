use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, Window};
use crate::error::{Error, Result};
use crate::pooling::SegmentationSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    Avg,
    Ada,
    OracleAda,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopDownMode {
    Cross,
    Concat,
    None,
}

/// Which encoder positions the decoder cross-attends to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMemory {
    /// Every final token representation.
    #[default]
    All,
    /// Only the last source position (query-readout tasks).
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Bottom-up (local attention) layers.
    #[serde(rename = "N1")]
    pub n1: usize,
    /// Segment-level full self-attention layers.
    #[serde(rename = "N2")]
    pub n2: usize,
    /// Top-down layers.
    #[serde(rename = "N3")]
    pub n3: usize,
    pub n_dec: usize,
    pub w: Window,
    pub k: usize,
    pub d_s: usize,
    pub max_positions: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "default_pooling")]
    pub pooling_mode: PoolingMode,
    #[serde(default = "default_topdown")]
    pub topdown_mode: TopDownMode,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub decoder_memory: DecoderMemory,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

fn default_ffn_mult() -> usize {
    4
}
fn default_pooling() -> PoolingMode {
    PoolingMode::Avg
}
fn default_topdown() -> TopDownMode {
    TopDownMode::Cross
}
fn default_true() -> bool {
    true
}
fn default_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Architecture of the published long-document model.
    pub fn paper() -> Self {
        ModelConfig {
            vocab_size: 50265,
            d_model: 1024,
            n_heads: 16,
            n1: 8,
            n2: 2,
            n3: 4,
            n_dec: 12,
            w: Window::Finite(1024),
            k: 32,
            d_s: 24,
            max_positions: 16384,
            ffn_mult: 4,
            pooling_mode: PoolingMode::Avg,
            topdown_mode: TopDownMode::Cross,
            dropout: 0.0,
            tie_embeddings: true,
            decoder_memory: DecoderMemory::All,
            ln_eps: 1e-5,
        }
    }

    /// Small configuration for CPU experiments.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 32,
            d_model: 64,
            n_heads: 4,
            n1: 2,
            n2: 1,
            n3: 1,
            n_dec: 2,
            w: Window::Finite(8),
            k: 8,
            d_s: 6,
            max_positions: 256,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected paper or desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        AttentionConfig::new(self.d_model, self.n_heads, self.w)?;
        self.segmentation()?;
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must be at least 4 (pad, bos, eos + one token)".into()));
        }
        if self.max_positions == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("max_positions and ffn_mult must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn segmentation(&self) -> Result<SegmentationSpec> {
        SegmentationSpec::new(self.k, self.d_s)
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// Segments in a document of `max_positions` tokens.
    pub fn max_segments(&self) -> usize {
        SegmentationSpec { kernel: self.k, stride: self.d_s }.num_segments(self.max_positions)
    }

    /// Bottom-up receptive field radius, `N1 * floor(w/2)`.
    pub fn receptive_field(&self) -> Option<usize> {
        self.w.half_width().map(|h| self.n1 * h)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}
