use serde::{Deserialize, Serialize};

use crate::crf::LabelSet;
use crate::error::{Error, Result};
use crate::nn::AttentionConfig;

/// What the textual extractor attends to besides the text itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Keys and values include the generated pseudo visual features.
    #[default]
    Bga,
    /// Plain self-attention: no sampling, no generation.
    TextOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width.
    pub d: usize,
    pub heads: usize,
    /// Number of stacked generation layers after the plain layer.
    pub layers: usize,
    pub num_patches: usize,
    /// Longest sentence in words, excluding `[CLS]` and `[SEP]`.
    pub max_len: usize,
    pub raw_dim: usize,
    /// Filled from the training vocabulary when zero.
    pub vocab_size: usize,
    /// Filled from the training data when empty.
    pub entity_types: Vec<String>,
    /// Weight of the generation losses.
    pub alpha: f64,
    pub temperature: f64,
    pub dropout: f64,
    pub generator_depth: usize,
    /// Feed-forward width as a multiple of `d`.
    pub ffn_mult: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            layers: 2,
            num_patches: 8,
            max_len: 32,
            raw_dim: 16,
            vocab_size: 0,
            entity_types: Vec::new(),
            alpha: 0.001,
            temperature: 1.0,
            dropout: 0.1,
            generator_depth: 1,
            ffn_mult: 4,
            variant: Variant::Bga,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        AttentionConfig::new(self.d, self.heads)?;
        let bad = |m: &str| Err(Error::invalid(format!("model config: {m}")));
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and non-negative");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.num_patches == 0 || self.max_len == 0 || self.raw_dim == 0 {
            return bad("num_patches, max_len and raw_dim must be positive");
        }
        if self.generator_depth == 0 || self.ffn_mult == 0 {
            return bad("generator_depth and ffn_mult must be positive");
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must cover the four special tokens");
        }
        if self.entity_types.is_empty() {
            return bad("at least one entity type is required");
        }
        LabelSet::bio(&self.entity_types)?;
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d: self.d,
            heads: self.heads,
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_mult * self.d
    }

    /// Text positions including `[CLS]` and `[SEP]`.
    pub fn max_positions(&self) -> usize {
        self.max_len + 2
    }

    pub fn labels(&self) -> Result<LabelSet> {
        LabelSet::bio(&self.entity_types)
    }

    /// Fills data-dependent fields, refusing to silently override values
    /// the caller set explicitly.
    pub fn bind_data(&mut self, vocab_size: usize, entity_types: &[String]) -> Result<()> {
        if self.vocab_size != 0 && self.vocab_size != vocab_size {
            return Err(Error::Mismatch(format!(
                "config vocab_size {} but data has {vocab_size}",
                self.vocab_size
            )));
        }
        if !self.entity_types.is_empty() && self.entity_types != entity_types {
            return Err(Error::Mismatch(format!(
                "config entity types {:?} but data has {entity_types:?}",
                self.entity_types
            )));
        }
        self.vocab_size = vocab_size;
        self.entity_types = entity_types.to_vec();
        Ok(())
    }

    /// True when both configs describe tensors of the same shapes.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        (
            self.d,
            self.heads,
            self.layers,
            self.num_patches,
            self.max_len,
            self.raw_dim,
        ) == (
            other.d,
            other.heads,
            other.layers,
            other.num_patches,
            other.max_len,
            other.raw_dim,
        ) && (self.generator_depth, self.ffn_mult) == (other.generator_depth, other.ffn_mult)
    }
}
