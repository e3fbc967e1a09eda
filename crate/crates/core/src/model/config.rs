use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout the network.
pub const LAYER_NORM_EPS: f64 = 1e-8;

/// Architecture of the causal self-attention recommender.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SasrecConfig {
    pub num_items: usize,
    /// Window length `n`.
    pub max_len: usize,
    /// Embedding width `d`.
    pub dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub dropout: f64,
}

impl SasrecConfig {
    /// Defaults: `d = 64`, two blocks, one head, dropout 0.2.
    pub fn new(num_items: usize, max_len: usize) -> Self {
        Self {
            num_items,
            max_len,
            dim: 64,
            num_layers: 2,
            num_heads: 1,
            dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_items == 0 {
            return fail("model needs at least one item".into());
        }
        if self.max_len == 0 {
            return fail("max_len must be >= 1".into());
        }
        if self.num_layers == 0 {
            return fail("num_layers must be >= 1".into());
        }
        if self.num_heads == 0 || self.dim == 0 || self.dim % self.num_heads != 0 {
            return fail(format!(
                "dim {} must be a positive multiple of num_heads {}",
                self.dim, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Index of the reserved augmentation mask token.
    pub fn mask_token(&self) -> usize {
        self.num_items + 1
    }

    /// Rows in the item table: padding, the catalog, and the mask token.
    pub fn table_rows(&self) -> usize {
        self.num_items + 2
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }
}
