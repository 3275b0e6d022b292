use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    /// Encoder-style reference image tokens.
    VisUnd,
    /// Latent reference image tokens.
    VisGen,
    /// Noisy latents being denoised.
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expert {
    Understanding,
    Generation,
}

impl Modality {
    pub fn expert(self) -> Expert {
        match self {
            Modality::Text | Modality::VisUnd => Expert::Understanding,
            Modality::VisGen | Modality::Target => Expert::Generation,
        }
    }

    /// Position in the canonical sequence order.
    pub(crate) fn rank(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::VisUnd => 1,
            Modality::VisGen => 2,
            Modality::Target => 3,
        }
    }
}

/// Everything about a stream except its vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamMeta {
    pub modality: Modality,
    pub positions: Vec<usize>,
    pub source_image_index: Option<usize>,
    /// Vocabulary ids for text streams; used to drop sentinels from relevance.
    pub token_ids: Option<Vec<usize>>,
}

impl StreamMeta {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Precondition(format!(
                "{:?} stream positions are not strictly increasing",
                self.modality
            )));
        }
        if let Some(ids) = &self.token_ids {
            if ids.len() != self.len() {
                return Err(Error::LengthMismatch {
                    expected: self.len(),
                    found: ids.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream<T: Scalar = f32> {
    pub meta: StreamMeta,
    pub vectors: Tensor<T>,
}

impl<T: Scalar> TokenStream<T> {
    pub fn new(meta: StreamMeta, vectors: Tensor<T>) -> Result<Self> {
        meta.validate()?;
        if vectors.shape().len() != 2 || vectors.rows() != meta.len() {
            return Err(Error::shape(
                "token_stream",
                format!("{} positions vs vectors {:?}", meta.len(), vectors.shape()),
            ));
        }
        Ok(Self { meta, vectors })
    }

    pub fn modality(&self) -> Modality {
        self.meta.modality
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }
}
