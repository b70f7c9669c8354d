use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attention pattern of every encoder layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionKind {
    Dense,
    /// Each token sees `window / 2` neighbours on either side. Positions in
    /// `global` attend to, and are attended by, every token.
    Sliding { window: usize, global: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub ffn_inner: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub attention: AttentionKind,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Full-size base encoder: 12 layers, 768 hidden, 3,072 FFN, 12 heads.
    pub fn base(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 12,
            hidden: 768,
            ffn_inner: 3072,
            n_heads: 12,
            dropout: 0.1,
            attn_dropout: 0.1,
            max_positions: 512,
            vocab_size,
            attention: AttentionKind::Dense,
            layer_norm_eps: 1e-5,
        }
    }

    /// Desk-scale encoder: 2 layers, 64 hidden, 256 FFN, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            hidden: 64,
            ffn_inner: 256,
            n_heads: 4,
            ..ModelConfig::base(vocab_size)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.n_layers == 0 || self.hidden == 0 || self.ffn_inner == 0 || self.n_heads == 0 {
            return fail("layer, hidden, ffn and head counts must be positive".into());
        }
        if self.hidden % self.n_heads != 0 {
            return fail(format!("hidden {} not divisible by {} heads", self.hidden, self.n_heads));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return fail("vocab_size and max_positions must be positive".into());
        }
        for (name, p) in [("dropout", self.dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        if let AttentionKind::Sliding { window, global } = &self.attention {
            if *window < 2 || window % 2 != 0 {
                return fail(format!("sliding window must be even and >= 2, got {window}"));
            }
            if let Some(&g) = global.iter().find(|&&g| g >= self.max_positions) {
                return fail(format!("global position {g} beyond max_positions {}", self.max_positions));
            }
        }
        Ok(())
    }

    pub fn is_sliding(&self) -> bool {
        matches!(self.attention, AttentionKind::Sliding { .. })
    }

    /// Same model with a different global-attention set. Only meaningful
    /// for sliding attention; dense configs are returned unchanged.
    pub fn with_global(&self, positions: Vec<usize>) -> Self {
        let mut cfg = self.clone();
        if let AttentionKind::Sliding { global, .. } = &mut cfg.attention {
            *global = positions;
        }
        cfg
    }
}
