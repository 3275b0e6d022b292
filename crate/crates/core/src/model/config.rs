use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::vocab::{MAX_REFERENCES, N_CELL_CLASSES, TEXT_VOCAB};

/// Which reference tokens a semantic mask hides from Target queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    /// Both the understanding and the latent token of each masked cell.
    #[default]
    AllVisual,
    UnderstandingOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub text_vocab: usize,
    pub cell_vocab: usize,
    pub d_latent: usize,
    pub max_positions: usize,
    pub max_images: usize,
    pub time_features: usize,
    pub mask_source_layer: usize,
    pub masked_layer_lo: usize,
    pub masked_layer_hi: usize,
    #[serde(default)]
    pub mask_scope: MaskScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 8,
            n_heads: 2,
            d_ff: 64,
            text_vocab: TEXT_VOCAB,
            cell_vocab: N_CELL_CLASSES,
            d_latent: N_CELL_CLASSES,
            max_positions: 512,
            max_images: MAX_REFERENCES,
            time_features: 8,
            mask_source_layer: 2,
            masked_layer_lo: 3,
            masked_layer_hi: 5,
            mask_scope: MaskScope::AllVisual,
        }
    }
}

impl ModelConfig {
    /// Two-layer configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_positions: 64,
            time_features: 2,
            mask_source_layer: 0,
            masked_layer_lo: 1,
            masked_layer_hi: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model < 2 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be >= 2 and divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(self.mask_source_layer < self.masked_layer_lo
            && self.masked_layer_lo <= self.masked_layer_hi
            && self.masked_layer_hi < self.n_layers)
        {
            return bad(format!(
                "need mask_source_layer < masked_layer_lo <= masked_layer_hi < n_layers, got {} / {}..={} / {}",
                self.mask_source_layer, self.masked_layer_lo, self.masked_layer_hi, self.n_layers
            ));
        }
        if self.d_ff == 0 || self.time_features == 0 || self.max_positions == 0 {
            return bad("d_ff, time_features and max_positions must be positive".into());
        }
        if self.cell_vocab != N_CELL_CLASSES || self.d_latent != N_CELL_CLASSES {
            return bad(format!(
                "cell_vocab and d_latent must equal the codebook size {N_CELL_CLASSES}"
            ));
        }
        if self.text_vocab < TEXT_VOCAB {
            return bad(format!("text_vocab must be at least {TEXT_VOCAB}"));
        }
        if self.max_images == 0 || self.max_images > MAX_REFERENCES {
            return bad(format!("max_images must be in 1..={MAX_REFERENCES}"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn is_masked_layer(&self, layer: usize) -> bool {
        (self.masked_layer_lo..=self.masked_layer_hi).contains(&layer)
    }
}
