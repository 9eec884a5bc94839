use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizers::DEFAULT_MAX_POSITIONS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// Exact (erf) GELU.
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionEmbedding {
    /// Learned absolute position table.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub activation: Activation,
    pub hidden_dropout: f64,
    pub attention_dropout: f64,
    pub layer_norm_eps: f64,
    pub position_embedding: PositionEmbedding,
    /// Standard deviation of the truncated-normal weight init.
    pub initializer_range: f64,
}

impl ModelConfig {
    /// Base RoBERTa configuration with 150 positions.
    pub fn roberta(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_positions: DEFAULT_MAX_POSITIONS,
            hidden_size: 768,
            num_layers: 12,
            num_heads: 12,
            intermediate_size: 3072,
            activation: Activation::Gelu,
            hidden_dropout: 0.1,
            attention_dropout: 0.1,
            layer_norm_eps: 1e-12,
            position_embedding: PositionEmbedding::Absolute,
            initializer_range: 0.02,
        }
    }

    /// Test-scale encoder: H=8, 2 layers, 2 heads, I=16, 32 positions, no dropout.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            max_positions: 32,
            hidden_size: 8,
            num_layers: 2,
            num_heads: 2,
            intermediate_size: 16,
            hidden_dropout: 0.0,
            attention_dropout: 0.0,
            ..Self::roberta(vocab_size)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("intermediate_size", self.intermediate_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Argument(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Argument(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        for (name, p) in [
            ("hidden_dropout", self.hidden_dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Argument(format!(
                    "{name} must lie in [0, 1), got {p}"
                )));
            }
        }
        let positive = |x: f64| x > 0.0;
        if !positive(self.layer_norm_eps) || !positive(self.initializer_range) {
            return Err(Error::Argument(
                "layer_norm_eps and initializer_range must be positive".into(),
            ));
        }
        Ok(())
    }
}
