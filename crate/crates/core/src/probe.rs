//! Layer-wise relevance maps of reference images against the instruction,
//! for either expert's visual states.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bridge::relevance_from_states;
use crate::error::{Error, Result};
use crate::model::{
    embed_scene_gen, embed_scene_und, embed_text, forward, Expert, LayerActivations, Modality,
    Weights,
};
use crate::numkit::{Scalar, Tensor};
use crate::synthworld::{render, Sample, SubjectRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub layer: usize,
    pub expert: Expert,
    pub image: usize,
    pub grid_size: (usize, usize),
    /// Row-major relevance, one value per cell.
    pub scores: Vec<f64>,
}

impl SimilarityMap {
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len().max(1) as f64
    }
}

/// Relevance of `image`'s cells at `layer`, using the understanding expert's
/// VisUnd states or the generation expert's VisGen states.
pub fn layer_similarity<T: Scalar>(
    acts: &LayerActivations<T>,
    layer: usize,
    expert: Expert,
    image: usize,
    grid_size: (usize, usize),
) -> Result<SimilarityMap> {
    if layer >= acts.n_layers() {
        return Err(Error::Precondition(format!(
            "layer {layer} outside 0..{}",
            acts.n_layers()
        )));
    }
    let modality = match expert {
        Expert::Understanding => Modality::VisUnd,
        Expert::Generation => Modality::VisGen,
    };
    let stream = acts
        .streams
        .iter()
        .position(|m| m.modality == modality && m.source_image_index == Some(image))
        .ok_or(Error::MissingStream("reference image"))?;
    let hv: &Tensor<T> = acts.get(layer, stream);
    if hv.rows() != grid_size.0 * grid_size.1 {
        return Err(Error::LengthMismatch {
            expected: grid_size.0 * grid_size.1,
            found: hv.rows(),
        });
    }
    let ht = acts.instruction_states(layer)?;
    if ht.rows() == 0 {
        return Err(Error::EmptyText);
    }
    Ok(SimilarityMap {
        layer,
        expert,
        image,
        grid_size,
        scores: relevance_from_states(hv, &ht)?,
    })
}

/// Exactly `ceil(fraction * N)` cells, highest scores first, ties to the
/// lowest row-major index.
pub fn top_fraction_mask(scores: &[f64], fraction: f64) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Precondition(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = scores.len();
    let k = ((fraction * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = vec![false; n];
    for &i in &idx[..k] {
        keep[i] = true;
    }
    Ok(keep)
}

/// Per-image min-max scaling to 0..=255, rounding half up. A constant map
/// is all zeros.
pub fn scores_to_bytes(scores: &[f64]) -> Vec<u8> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    scores
        .iter()
        .map(|&s| {
            if hi > lo {
                ((s - lo) / (hi - lo) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn mask_to_bytes(mask: &[bool]) -> Vec<u8> {
    mask.iter().map(|&m| if m { 255 } else { 0 }).collect()
}

/// Binary greymap (P5, maxval 255).
pub fn pgm_bytes(pixels: &[u8], grid_size: (usize, usize)) -> Result<Vec<u8>> {
    let (rows, cols) = grid_size;
    if pixels.len() != rows * cols {
        return Err(Error::LengthMismatch {
            expected: rows * cols,
            found: pixels.len(),
        });
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub enum MapImage<'a> {
    Scores(&'a [f64]),
    Mask(&'a [bool]),
}

pub fn emit_map_image(image: MapImage<'_>, grid_size: (usize, usize), path: &Path) -> Result<()> {
    let pixels = match image {
        MapImage::Scores(s) => scores_to_bytes(s),
        MapImage::Mask(m) => mask_to_bytes(m),
    };
    let bytes = pgm_bytes(&pixels, grid_size)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `n_layers` split into 4 contiguous near-equal groups (empty ones dropped).
pub fn layer_groups(n_layers: usize) -> Vec<std::ops::Range<usize>> {
    (0..4)
        .map(|g| (g * n_layers / 4)..((g + 1) * n_layers / 4))
        .filter(|r| !r.is_empty())
        .collect()
}

/// Context-only forward pass of a sample (no target tokens, no mask).
pub fn context_activations(sample: &Sample, w: &Weights<f32>) -> Result<LayerActivations<f32>> {
    let mut streams = vec![embed_text(&sample.instruction, w)?];
    for (k, s) in sample.references.iter().enumerate() {
        streams.push(embed_scene_und(s, k, w)?);
    }
    for (k, s) in sample.references.iter().enumerate() {
        streams.push(embed_scene_gen(&render(s), k, w)?);
    }
    Ok(forward(&streams, None, w)?.activations)
}

/// Mean relevance over target cells and over distractor cells of a sample,
/// pooled across its reference images.
pub fn target_distractor_means(sample: &Sample, maps: &[SimilarityMap]) -> (Option<f64>, Option<f64>) {
    let (mut t, mut nt, mut d, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for m in maps {
        let owner = sample.references[m.image].owner_map();
        for (cell, &s) in m.scores.iter().enumerate() {
            let Some(o) = owner[cell] else { continue };
            let r = SubjectRef {
                image: m.image,
                subject: o,
            };
            if sample.target_subjects.contains(&r) {
                t += s;
                nt += 1;
            } else if sample.distractor_subjects.contains(&r) {
                d += s;
                nd += 1;
            }
        }
    }
    (
        (nt > 0).then(|| t / nt as f64),
        (nd > 0).then(|| d / nd as f64),
    )
}

fn sample_maps(sample: &Sample, acts: &LayerActivations<f32>, layer: usize, expert: Expert) -> Result<Vec<SimilarityMap>> {
    (0..sample.references.len())
        .map(|k| layer_similarity(acts, layer, expert, k, sample.grid_size()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub layer: usize,
    pub expert: Expert,
    /// Samples having both target and distractor cells.
    pub evaluated: usize,
    pub separated: usize,
    pub fraction: f64,
}

/// How often target cells out-score distractor cells on average.
pub fn separation(suite: &[Sample], w: &Weights<f32>, layer: usize, expert: Expert) -> Result<Separation> {
    let (mut evaluated, mut separated) = (0, 0);
    for s in suite {
        let acts = context_activations(s, w)?;
        let maps = sample_maps(s, &acts, layer, expert)?;
        if let (Some(t), Some(d)) = target_distractor_means(s, &maps) {
            evaluated += 1;
            separated += (t > d) as usize;
        }
    }
    Ok(Separation {
        layer,
        expert,
        evaluated,
        separated,
        fraction: if evaluated == 0 { 0.0 } else { separated as f64 / evaluated as f64 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub sample_id: String,
    pub layer: usize,
    pub layer_group: usize,
    pub expert: Expert,
    pub image: usize,
    pub kind: String,
    pub path: String,
    pub mean_relevance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: usize,
    pub layers: (usize, usize),
    pub expert: Expert,
    pub mean_relevance: f64,
    pub mean_target: Option<f64>,
    pub mean_distractor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeIndex {
    pub fraction: f64,
    pub entries: Vec<IndexEntry>,
    pub groups: Vec<GroupSummary>,
    pub separation: Separation,
}

fn mean_opt(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Writes per-layer-group score maps and top-fraction masks for both experts
/// of every sample, and returns the index (also written as `index.json`).
/// Each group's image uses the group's first layer.
pub fn run_probe(suite: &[Sample], w: &Weights<f32>, out_dir: &Path, fraction: f64) -> Result<ProbeIndex> {
    let groups = layer_groups(w.config.n_layers);
    let experts = [Expert::Understanding, Expert::Generation];
    let mut entries = Vec::new();
    // (group, expert) -> (all means, target means, distractor means)
    let mut acc: Vec<[(Vec<f64>, Vec<f64>, Vec<f64>); 2]> = groups.iter().map(|_| Default::default()).collect();
    for s in suite {
        let acts = context_activations(s, w)?;
        for (g, range) in groups.iter().enumerate() {
            for (e, &expert) in experts.iter().enumerate() {
                for layer in range.clone() {
                    let maps = sample_maps(s, &acts, layer, expert)?;
                    let (t, d) = target_distractor_means(s, &maps);
                    let slot = &mut acc[g][e];
                    slot.0.extend(maps.iter().map(SimilarityMap::mean));
                    slot.1.extend(t);
                    slot.2.extend(d);
                    if layer != range.start {
                        continue;
                    }
                    for m in &maps {
                        let tag = match expert {
                            Expert::Understanding => "und",
                            Expert::Generation => "gen",
                        };
                        let stem = format!("{}/g{g}_l{layer}_{tag}_img{}", s.id, m.image);
                        let keep = top_fraction_mask(&m.scores, fraction)?;
                        for (kind, img) in [("scores", MapImage::Scores(&m.scores)), ("top", MapImage::Mask(&keep))] {
                            let rel = PathBuf::from(format!("{stem}_{kind}.pgm"));
                            emit_map_image(img, m.grid_size, &out_dir.join(&rel))?;
                            entries.push(IndexEntry {
                                sample_id: s.id.clone(),
                                layer,
                                layer_group: g,
                                expert,
                                image: m.image,
                                kind: kind.to_string(),
                                path: rel.display().to_string(),
                                mean_relevance: m.mean(),
                            });
                        }
                    }
                }
            }
        }
    }
    let mut summaries = Vec::new();
    for (g, range) in groups.iter().enumerate() {
        for (e, &expert) in experts.iter().enumerate() {
            let (all, t, d) = &acc[g][e];
            summaries.push(GroupSummary {
                group: g,
                layers: (range.start, range.end - 1),
                expert,
                mean_relevance: mean_opt(all).unwrap_or(0.0),
                mean_target: mean_opt(t),
                mean_distractor: mean_opt(d),
            });
        }
    }
    let index = ProbeIndex {
        fraction,
        entries,
        groups: summaries,
        separation: separation(suite, w, w.config.mask_source_layer, Expert::Understanding)?,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("index.json");
    let mut text = serde_json::to_string_pretty(&index)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}
