//! Architectural description of the three model families.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    LinearAttention,
    SoftmaxAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayoutKind {
    Sequential,
    Parallel,
    PureAttention,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridLayout {
    pub kind: LayoutKind,
    #[serde(default)]
    pub sequential_pattern: Vec<LayerKind>,
    #[serde(default)]
    pub n_blocks: usize,
}

impl HybridLayout {
    /// `groups` repetitions of three linear-attention layers followed by one
    /// softmax-attention layer.
    pub fn three_to_one(groups: usize) -> Self {
        let pattern = (0..groups)
            .flat_map(|_| {
                [
                    LayerKind::LinearAttention,
                    LayerKind::LinearAttention,
                    LayerKind::LinearAttention,
                    LayerKind::SoftmaxAttention,
                ]
            })
            .collect();
        Self::sequential(pattern)
    }

    pub fn sequential(pattern: Vec<LayerKind>) -> Self {
        Self {
            kind: LayoutKind::Sequential,
            sequential_pattern: pattern,
            n_blocks: 0,
        }
    }

    pub fn parallel(n_blocks: usize) -> Self {
        Self {
            kind: LayoutKind::Parallel,
            sequential_pattern: Vec::new(),
            n_blocks,
        }
    }

    pub fn pure_attention(n_blocks: usize) -> Self {
        Self {
            kind: LayoutKind::PureAttention,
            sequential_pattern: Vec::new(),
            n_blocks,
        }
    }

    pub fn n_layers(&self) -> usize {
        match self.kind {
            LayoutKind::Sequential => self.sequential_pattern.len(),
            LayoutKind::Parallel | LayoutKind::PureAttention => self.n_blocks,
        }
    }

    /// Mixer kind of a single-mixer layer; `None` for parallel blocks.
    pub fn mixer_kind(&self, layer: usize) -> Option<LayerKind> {
        match self.kind {
            LayoutKind::Sequential => self.sequential_pattern.get(layer).copied(),
            LayoutKind::PureAttention if layer < self.n_blocks => Some(LayerKind::SoftmaxAttention),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            LayoutKind::Sequential => {
                if self.sequential_pattern.is_empty() {
                    return Err(Error::Config("sequential pattern is empty".into()));
                }
            }
            LayoutKind::Parallel | LayoutKind::PureAttention => {
                if self.n_blocks == 0 {
                    return Err(Error::Config("n_blocks must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub vocab_size: usize,
    pub n_heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub ssm_state_dim: usize,
    /// Hidden width of the residual MLP sub-block.
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    pub layout: HybridLayout,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 128 wide, 8 layers, 4 heads of width 32,
    /// byte vocabulary, 256-token context.
    pub fn desk_scale(layout: HybridLayout) -> Self {
        Self {
            d_model: 128,
            vocab_size: 256,
            n_heads: 4,
            key_dim: 32,
            value_dim: 32,
            ssm_state_dim: 16,
            mlp_hidden: 256,
            max_seq_len: 256,
            layout,
            init_seed: 0,
        }
    }

    pub fn default_sequential() -> Self {
        Self::desk_scale(HybridLayout::three_to_one(2))
    }

    pub fn default_parallel() -> Self {
        Self::desk_scale(HybridLayout::parallel(8))
    }

    pub fn default_pure_attention() -> Self {
        Self::desk_scale(HybridLayout::pure_attention(8))
    }

    /// A micro model for oracle and gradient tests.
    pub fn micro(layout: HybridLayout) -> Self {
        Self {
            d_model: 16,
            vocab_size: 11,
            n_heads: 2,
            key_dim: 4,
            value_dim: 5,
            ssm_state_dim: 3,
            mlp_hidden: 12,
            max_seq_len: 32,
            layout,
            init_seed: 7,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layout.n_layers()
    }

    /// Width of a mixer's output before its output projection.
    pub fn mixer_width(&self) -> usize {
        self.n_heads * self.value_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("key_dim", self.key_dim),
            ("value_dim", self.value_dim),
            ("ssm_state_dim", self.ssm_state_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        self.layout.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_to_one_pattern_counts() {
        let layout = HybridLayout::three_to_one(6);
        assert_eq!(layout.n_layers(), 24);
        let linear = layout
            .sequential_pattern
            .iter()
            .filter(|k| **k == LayerKind::LinearAttention)
            .count();
        assert_eq!(linear, 18);
        assert_eq!(layout.mixer_kind(3), Some(LayerKind::SoftmaxAttention));
        assert_eq!(layout.mixer_kind(4), Some(LayerKind::LinearAttention));
    }

    #[test]
    fn defaults_validate() {
        for cfg in [
            ModelConfig::default_sequential(),
            ModelConfig::default_parallel(),
            ModelConfig::default_pure_attention(),
        ] {
            cfg.validate().unwrap();
            assert_eq!(cfg.n_layers(), 8);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ModelConfig::default_parallel();
        cfg.vocab_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default_parallel();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig::desk_scale(HybridLayout::sequential(vec![]));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = serde_json::to_value(ModelConfig::default_parallel()).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
