use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionVariant;
use crate::kv::{KvError, KvMap, KvWriter};

/// How encoder states are pooled into one sentence vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Max,
    /// Hidden state of a learned frame prepended to the video.
    Cls,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Max => "max",
            Self::Cls => "cls",
        })
    }
}

impl FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "cls" => Ok(Self::Cls),
            other => Err(format!("unknown aggregation {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantKind {
    SelfAttention,
    Gloss,
    Sliding,
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SelfAttention => "self",
            Self::Gloss => "gloss",
            Self::Sliding => "sliding",
        })
    }
}

impl FromStr for VariantKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "self" => Ok(Self::SelfAttention),
            "gloss" => Ok(Self::Gloss),
            "sliding" => Ok(Self::Sliding),
            other => Err(format!("unknown attention variant {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    /// Attention positions per query for gloss attention.
    pub gloss_positions: usize,
    /// Window width for the sliding-window variant.
    pub window: usize,
    pub dropout: f64,
    pub variant: VariantKind,
    pub aggregation: Aggregation,
    pub vocab_size: usize,
    pub input_dim: usize,
    pub max_output_len: usize,
    pub beam: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_dim: 2048,
            gloss_positions: 7,
            window: 7,
            dropout: 0.5,
            variant: VariantKind::Gloss,
            aggregation: Aggregation::Mean,
            vocab_size: 0,
            input_dim: 0,
            max_output_len: 30,
            beam: 1,
            layer_norm_eps: 1e-6,
        }
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "d_model",
    "heads",
    "encoder_layers",
    "decoder_layers",
    "ff_dim",
    "gloss_positions",
    "window",
    "dropout",
    "variant",
    "aggregation",
    "vocab_size",
    "input_dim",
    "max_output_len",
    "beam",
    "layer_norm_eps",
];

impl ModelConfig {
    pub fn attention_variant(&self) -> AttentionVariant {
        match self.variant {
            VariantKind::SelfAttention => AttentionVariant::SelfAttention,
            VariantKind::Gloss => AttentionVariant::Gloss {
                positions: self.gloss_positions,
            },
            VariantKind::Sliding => AttentionVariant::SlidingWindow {
                window: self.window,
            },
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.gloss_positions == 0 || self.window == 0 {
            return Err("gloss_positions and window must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size < 4 {
            return Err("vocab_size must cover the four reserved tokens".into());
        }
        if self.input_dim == 0 || self.ff_dim == 0 {
            return Err("input_dim and ff_dim must be positive".into());
        }
        if self.max_output_len < 1 {
            return Err("max_output_len must be at least 1".into());
        }
        if self.beam < 1 {
            return Err("beam width must be at least 1".into());
        }
        Ok(())
    }

    /// Applies every model key present in `map`.
    pub fn apply(&mut self, map: &KvMap) -> Result<(), KvError> {
        map.read_into("d_model", &mut self.d_model)?;
        map.read_into("heads", &mut self.heads)?;
        map.read_into("encoder_layers", &mut self.encoder_layers)?;
        map.read_into("decoder_layers", &mut self.decoder_layers)?;
        map.read_into("ff_dim", &mut self.ff_dim)?;
        map.read_into("gloss_positions", &mut self.gloss_positions)?;
        map.read_into("window", &mut self.window)?;
        map.read_into("dropout", &mut self.dropout)?;
        map.read_into("variant", &mut self.variant)?;
        map.read_into("aggregation", &mut self.aggregation)?;
        map.read_into("vocab_size", &mut self.vocab_size)?;
        map.read_into("input_dim", &mut self.input_dim)?;
        map.read_into("max_output_len", &mut self.max_output_len)?;
        map.read_into("beam", &mut self.beam)?;
        map.read_into("layer_norm_eps", &mut self.layer_norm_eps)?;
        Ok(())
    }

    pub fn write(&self, w: &mut KvWriter) {
        w.put("d_model", self.d_model)
            .put("heads", self.heads)
            .put("encoder_layers", self.encoder_layers)
            .put("decoder_layers", self.decoder_layers)
            .put("ff_dim", self.ff_dim)
            .put("gloss_positions", self.gloss_positions)
            .put("window", self.window)
            .put("dropout", self.dropout)
            .put("variant", self.variant)
            .put("aggregation", self.aggregation)
            .put("vocab_size", self.vocab_size)
            .put("input_dim", self.input_dim)
            .put("max_output_len", self.max_output_len)
            .put("beam", self.beam)
            .put("layer_norm_eps", self.layer_norm_eps);
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        self.write(&mut w);
        w.finish()
    }
}
