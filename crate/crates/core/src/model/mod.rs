//! Hierarchical graph transformer over sampled token sequences.

mod network;
mod params;
mod sequence;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use network::{significance, AttentionRecord, ForwardPass};
pub use params::{EncoderLayer, LayerNorm, Linear, ModelParams, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use sequence::{
    assemble_sequence, encode_proximity, CenterProximity, FeatureRow, InputSequence, ProximityEncoding,
    SparseFeatures, Token, TokenInput, TokenKind,
};

/// Architecture hyperparameters; stored verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub classes: usize,
    /// Number of adjacency powers `M` in the proximity encoding.
    pub proximity_order: usize,
    pub global_tokens: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden: 128,
            heads: 8,
            layers: 3,
            classes,
            proximity_order: 10,
            global_tokens: 2,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("layers", self.layers),
            ("classes", self.classes),
            ("proximity_order", self.proximity_order),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
