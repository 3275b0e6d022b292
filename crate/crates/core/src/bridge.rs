//! Relevance scoring of reference visual tokens against the instruction and
//! the binary attention mask built from it.
//!
//! The pipeline is `normalize_hidden -> similarity_matrix -> relevance_scores
//! -> build_mask`; the resulting bias is added to Target-to-reference attention
//! logits so hidden tokens get exactly zero weight.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerActivations, Modality, ModelConfig};
use crate::numkit::{l2_normalize, matmul, transpose, Scalar, Tensor};

/// Tolerance on row norms accepted by [`similarity_matrix`].
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Per-token visibility for one sample and forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticMask {
    pub visible: Vec<bool>,
    pub relevance: Vec<f64>,
    pub threshold: f64,
    pub source_layer: usize,
    pub fallback_applied: bool,
}

impl SemanticMask {
    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    /// Additive bias: 0 for visible tokens, negative infinity otherwise.
    pub fn bias<T: Scalar>(&self) -> Vec<T> {
        self.visible
            .iter()
            .map(|&v| if v { T::zero() } else { T::neg_infinity() })
            .collect()
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// All tokens visible; behaves exactly like no mask.
    pub fn all_visible(n: usize) -> Self {
        Self {
            visible: vec![true; n],
            relevance: vec![0.0; n],
            threshold: f64::NEG_INFINITY,
            source_layer: 0,
            fallback_applied: false,
        }
    }

    pub fn dump_record(&self, sample_id: &str) -> MaskRecord {
        MaskRecord {
            sample_id: sample_id.to_string(),
            relevance: self.relevance.clone(),
            tau: self.threshold,
            bias_visible: self.visible.clone(),
            fallback_applied: self.fallback_applied,
        }
    }
}

/// One line of a mask dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub sample_id: String,
    pub relevance: Vec<f64>,
    pub tau: f64,
    pub bias_visible: Vec<bool>,
    pub fallback_applied: bool,
}

pub fn write_mask_dump(path: &Path, records: &[MaskRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Row-wise L2 normalization.
pub fn normalize_hidden<T: Scalar>(h: &Tensor<T>) -> Result<Tensor<T>> {
    if h.shape().len() != 2 {
        return Err(Error::shape("normalize_hidden", format!("{:?}", h.shape())));
    }
    let d = h.cols();
    let mut out = Vec::with_capacity(h.len());
    for i in 0..h.rows() {
        let row = Tensor::vector(h.row(i).to_vec());
        match l2_normalize(&row) {
            Ok(r) => out.extend_from_slice(r.data()),
            Err(Error::ZeroVector { .. }) => return Err(Error::ZeroVector { row: Some(i) }),
            Err(e) => return Err(e),
        }
    }
    Tensor::new(vec![h.rows(), d], out)
}

fn check_unit_rows<T: Scalar>(h: &Tensor<T>, which: &str) -> Result<()> {
    for i in 0..h.rows() {
        let n = h.row(i).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Precondition(format!(
                "{which} row {i} has norm {n}, expected unit rows"
            )));
        }
    }
    Ok(())
}

/// Cosine similarities `S = Hv_hat · Ht_hat^T` of pre-normalized rows.
pub fn similarity_matrix<T: Scalar>(hv_hat: &Tensor<T>, ht_hat: &Tensor<T>) -> Result<Tensor<T>> {
    if hv_hat.shape().len() != 2 || ht_hat.shape().len() != 2 || hv_hat.cols() != ht_hat.cols() {
        return Err(Error::shape(
            "similarity_matrix",
            format!("{:?} vs {:?}", hv_hat.shape(), ht_hat.shape()),
        ));
    }
    check_unit_rows(hv_hat, "visual")?;
    check_unit_rows(ht_hat, "text")?;
    matmul(hv_hat, &transpose(ht_hat)?)
}

/// Mean similarity of each visual token over all text tokens.
pub fn relevance_scores<T: Scalar>(s: &Tensor<T>) -> Result<Tensor<T>> {
    if s.shape().len() != 2 {
        return Err(Error::shape("relevance_scores", format!("{:?}", s.shape())));
    }
    let nt = s.cols();
    if nt == 0 {
        return Err(Error::EmptyText);
    }
    let inv = T::lit(nt as f64);
    let scores = (0..s.rows())
        .map(|i| s.row(i).iter().copied().sum::<T>() / inv)
        .collect();
    Ok(Tensor::vector(scores))
}

/// Thresholds relevance with the strict rule `s_i > tau`; if nothing passes,
/// the highest-scoring token stays visible.
pub fn build_mask(s: &[f64], tau: f64) -> SemanticMask {
    build_mask_with(s, tau, true)
}

pub fn build_mask_with(s: &[f64], tau: f64, fallback: bool) -> SemanticMask {
    debug_assert!(s.iter().all(|v| v.is_nan() || v.abs() <= 1.0 + 1e-6));
    let mut visible: Vec<bool> = s.iter().map(|&v| v > tau).collect();
    let mut fallback_applied = false;
    if fallback && !s.is_empty() && !visible.iter().any(|&v| v) {
        let mut best = 0;
        for (i, &v) in s.iter().enumerate() {
            if v > s[best] || (s[best].is_nan() && !v.is_nan()) {
                best = i;
            }
        }
        visible[best] = true;
        fallback_applied = true;
    }
    SemanticMask {
        visible,
        relevance: s.to_vec(),
        threshold: tau,
        source_layer: 0,
        fallback_applied,
    }
}

/// `A + M` with the mask broadcast over rows.
pub fn apply_mask_bias<T: Scalar>(a: &Tensor<T>, mask: &SemanticMask) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || a.cols() != mask.len() {
        return Err(Error::MaskShape {
            mask: mask.len(),
            expected: if a.shape().len() == 2 { a.cols() } else { 0 },
        });
    }
    let bias = mask.bias::<T>();
    let mut out = a.clone();
    let n = a.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = *v + bias[i % n];
    }
    Ok(out)
}

/// Full scoring pipeline from raw visual and text states.
pub fn mask_from_states<T: Scalar>(
    hv: &Tensor<T>,
    ht: &Tensor<T>,
    tau: f64,
    source_layer: usize,
) -> Result<SemanticMask> {
    if hv.rows() == 0 {
        return Ok(SemanticMask {
            source_layer,
            ..build_mask(&[], tau)
        });
    }
    if ht.rows() == 0 {
        return Err(Error::EmptyText);
    }
    let s = relevance_from_states(hv, ht)?;
    let mut mask = build_mask(&s, tau);
    mask.source_layer = source_layer;
    Ok(mask)
}

pub(crate) fn relevance_from_states<T: Scalar>(hv: &Tensor<T>, ht: &Tensor<T>) -> Result<Vec<f64>> {
    let s = similarity_matrix(&normalize_hidden(hv)?, &normalize_hidden(ht)?)?;
    Ok(relevance_scores(&s)?.data().iter().map(|v| v.as_f64()).collect())
}

/// Mask from the source-layer states held in `acts`. Begin/end sentinels are
/// excluded from the text side.
pub fn compute_mask_from_activations<T: Scalar>(
    acts: &LayerActivations<T>,
    cfg: &ModelConfig,
    tau: f64,
) -> Result<SemanticMask> {
    let layer = cfg.mask_source_layer;
    let (hv, ht) = bridge_states(acts, layer)?;
    mask_from_states(&hv, &ht, tau, layer)
}

/// VisUnd states and non-sentinel Text states at `layer`.
pub(crate) fn bridge_states<T: Scalar>(
    acts: &LayerActivations<T>,
    layer: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if !acts.streams.iter().any(|m| m.modality == Modality::Text) {
        return Err(Error::MissingStream("text"));
    }
    if !acts.streams.iter().any(|m| m.modality == Modality::VisUnd) {
        return Err(Error::MissingStream("visual understanding"));
    }
    let hv = acts.modality_states(layer, Modality::VisUnd)?;
    let ht = acts.instruction_states(layer)?;
    Ok((hv, ht))
}
