use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::bridge::{self, SemanticMask};
use crate::error::{Error, Result};
use crate::numkit::{NodeId, Scalar, Tape, Tensor};
use crate::synthworld::vocab::{class_attribute_tokens, Token};
use crate::synthworld::{render, Scene};

use super::config::{MaskScope, ModelConfig};
use super::stream::{Expert, Modality, StreamMeta, TokenStream};
use super::weights::{ExpertBlock, GroupSet, ParamNodes, Weights};

/// Post-block hidden states, `layers[l][s]` for input stream `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations<T: Scalar = f32> {
    pub streams: Vec<StreamMeta>,
    pub layers: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> LayerActivations<T> {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn get(&self, layer: usize, stream: usize) -> &Tensor<T> {
        &self.layers[layer][stream]
    }

    fn layer(&self, layer: usize) -> Result<&[Tensor<T>]> {
        self.layers.get(layer).map(Vec::as_slice).ok_or_else(|| {
            Error::Precondition(format!("layer {layer} outside 0..{}", self.layers.len()))
        })
    }

    fn width(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.iter().find(|t| t.shape().len() == 2))
            .map(|t| t.cols())
            .unwrap_or(0)
    }

    /// Rows of every stream of `modality`, in input order.
    pub fn modality_states(&self, layer: usize, modality: Modality) -> Result<Tensor<T>> {
        let states = self.layer(layer)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for (m, t) in self.streams.iter().zip(states) {
            if m.modality == modality {
                data.extend_from_slice(t.data());
                rows += t.rows();
            }
        }
        Tensor::new(vec![rows, self.width()], data)
    }

    /// Text rows with begin/end sentinels removed.
    pub fn instruction_states(&self, layer: usize) -> Result<Tensor<T>> {
        let states = self.layer(layer)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for (m, t) in self.streams.iter().zip(states) {
            if m.modality != Modality::Text {
                continue;
            }
            for i in 0..t.rows() {
                if !m.token_ids.as_ref().is_some_and(|ids| is_sentinel(ids[i])) {
                    data.extend_from_slice(t.row(i));
                    rows += 1;
                }
            }
        }
        Tensor::new(vec![rows, self.width()], data)
    }

    /// Visual states produced by `expert`: VisUnd rows for the understanding
    /// expert, VisGen rows for the generation expert.
    pub fn visual_states(&self, layer: usize, expert: Expert) -> Result<Tensor<T>> {
        match expert {
            Expert::Understanding => self.modality_states(layer, Modality::VisUnd),
            Expert::Generation => self.modality_states(layer, Modality::VisGen),
        }
    }
}

fn is_sentinel(id: usize) -> bool {
    Token::from_id(id).is_some_and(Token::is_sentinel)
}

/// Per-row description of the canonical sequence
/// (Text, VisUnd, VisGen, Target).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowInfo {
    pub modality: Modality,
    pub stream: usize,
    pub image: Option<usize>,
    pub position: usize,
    /// Index into the semantic mask for reference visual tokens it governs.
    pub mask_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub rows: Vec<RowInfo>,
    /// Canonical start row of each input stream.
    pub stream_starts: Vec<usize>,
    pub n_understanding: usize,
    pub n_mask: usize,
}

impl SequenceLayout {
    fn build(metas: &[StreamMeta], scope: MaskScope) -> Self {
        let mut order: Vec<usize> = (0..metas.len()).collect();
        order.sort_by_key(|&i| metas[i].modality.rank());
        let mut rows = Vec::new();
        let mut stream_starts = vec![0; metas.len()];
        let mut und_index: HashMap<(Option<usize>, usize), usize> = HashMap::new();
        let mut n_mask = 0;
        for &s in &order {
            let m = &metas[s];
            stream_starts[s] = rows.len();
            for &position in &m.positions {
                let mask_index = match m.modality {
                    Modality::VisUnd => {
                        und_index.insert((m.source_image_index, position), n_mask);
                        n_mask += 1;
                        Some(n_mask - 1)
                    }
                    Modality::VisGen if scope == MaskScope::AllVisual => {
                        und_index.get(&(m.source_image_index, position)).copied()
                    }
                    _ => None,
                };
                rows.push(RowInfo {
                    modality: m.modality,
                    stream: s,
                    image: m.source_image_index,
                    position,
                    mask_index,
                });
            }
        }
        let n_understanding = rows
            .iter()
            .filter(|r| r.modality.expert() == Expert::Understanding)
            .count();
        Self {
            rows,
            stream_starts,
            n_understanding,
            n_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Contiguous Target block.
    pub fn target_range(&self) -> std::ops::Range<usize> {
        let start = self
            .rows
            .iter()
            .position(|r| r.modality == Modality::Target)
            .unwrap_or(self.rows.len());
        start..self.rows.len()
    }

    /// Additive attention bias: context rows never see Target columns, and
    /// Target rows lose the columns hidden by `visible`.
    pub fn attention_bias<T: Scalar>(&self, visible: Option<&[bool]>) -> Tensor<T> {
        let n = self.rows.len();
        let mut data = vec![T::zero(); n * n];
        for (q, rq) in self.rows.iter().enumerate() {
            let row = &mut data[q * n..(q + 1) * n];
            for (k, rk) in self.rows.iter().enumerate() {
                let hidden = if rq.modality != Modality::Target {
                    rk.modality == Modality::Target
                } else {
                    matches!((visible, rk.mask_index), (Some(v), Some(i)) if !v[i])
                };
                if hidden {
                    row[k] = T::neg_infinity();
                }
            }
        }
        Tensor::from_parts(vec![n, n], data)
    }

    /// Indicator of (query, key) pairs of visual tokens that sit on the same
    /// grid cell in different streams, restricted to queries routed to
    /// `expert`. `None` when no such pair exists.
    pub fn same_cell_pairs<T: Scalar>(&self, expert: Expert) -> Option<Tensor<T>> {
        let n = self.rows.len();
        let mut data = vec![T::zero(); n * n];
        let mut any = false;
        for (q, rq) in self.rows.iter().enumerate() {
            if rq.modality == Modality::Text || rq.modality.expert() != expert {
                continue;
            }
            for (k, rk) in self.rows.iter().enumerate() {
                if rk.modality != Modality::Text && rk.stream != rq.stream && rk.position == rq.position {
                    data[q * n + k] = T::one();
                    any = true;
                }
            }
        }
        any.then(|| Tensor::from_parts(vec![n, n], data))
    }
}

/// How a forward pass treats the semantic mask.
#[derive(Debug, Clone, Copy)]
pub enum MaskMode<'a> {
    Off,
    Fixed(&'a SemanticMask),
    /// Build the mask from this pass's own source-layer states.
    Compute { tau: f64 },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub capture_attention: bool,
}

/// Nodes of one recorded forward pass.
pub(crate) struct Graph {
    pub metas: Vec<StreamMeta>,
    pub layout: SequenceLayout,
    pub hidden: Vec<NodeId>,
    pub head: Option<NodeId>,
    pub mask: Option<SemanticMask>,
    /// `attention[l][h]`, post-softmax weights in canonical order.
    pub attention: Vec<Vec<NodeId>>,
}

impl Graph {
    pub fn activations<T: Scalar>(&self, tape: &Tape<T>) -> LayerActivations<T> {
        let layers = self
            .hidden
            .iter()
            .map(|&h| {
                let x = tape.value(h);
                self.metas
                    .iter()
                    .zip(&self.layout.stream_starts)
                    .map(|(m, &start)| x.slice_rows(start, m.len()))
                    .collect()
            })
            .collect();
        LayerActivations {
            streams: self.metas.clone(),
            layers,
        }
    }

    pub fn velocity<T: Scalar>(&self, tape: &Tape<T>, d_latent: usize) -> Tensor<T> {
        match self.head {
            Some(h) => tape.value(h).clone(),
            None => Tensor::zeros(&[0, d_latent]),
        }
    }
}

fn routed<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    n_und: usize,
    blocks: &[ExpertBlock; 2],
    mut f: impl FnMut(&mut Tape<T>, NodeId, &ExpertBlock) -> Result<NodeId>,
) -> Result<NodeId> {
    let n = tape.value(x).rows();
    let mut parts = Vec::with_capacity(2);
    if n_und > 0 {
        let xs = if n_und == n { x } else { tape.slice_rows(x, 0, n_und)? };
        parts.push(f(tape, xs, &blocks[0])?);
    }
    if n > n_und {
        let xs = if n_und == 0 { x } else { tape.slice_rows(x, n_und, n - n_und)? };
        parts.push(f(tape, xs, &blocks[1])?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_rows(&parts)
    }
}

/// Instruction and understanding-side visual rows of a canonical state matrix.
fn bridge_rows<T: Scalar>(x: &Tensor<T>, layout: &SequenceLayout, metas: &[StreamMeta]) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = x.cols();
    let (mut hv, mut ht) = (Vec::new(), Vec::new());
    let (mut nv, mut nt) = (0, 0);
    let mut text_seen = vec![0usize; metas.len()];
    for (i, r) in layout.rows.iter().enumerate() {
        match r.modality {
            Modality::VisUnd => {
                hv.extend_from_slice(x.row(i));
                nv += 1;
            }
            Modality::Text => {
                let k = text_seen[r.stream];
                text_seen[r.stream] += 1;
                let sentinel = metas[r.stream]
                    .token_ids
                    .as_ref()
                    .is_some_and(|ids| is_sentinel(ids[k]));
                if !sentinel {
                    ht.extend_from_slice(x.row(i));
                    nt += 1;
                }
            }
            _ => {}
        }
    }
    Ok((Tensor::new(vec![nv, d], hv)?, Tensor::new(vec![nt, d], ht)?))
}

/// Joint-attention transformer over already-embedded streams.
pub(crate) fn run_core<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamNodes,
    w: &Weights<T>,
    streams: Vec<(StreamMeta, NodeId)>,
    mode: MaskMode<'_>,
    opts: ForwardOptions,
) -> Result<Graph> {
    let cfg = &w.config;
    for (m, node) in &streams {
        m.validate()?;
        let v = tape.value(*node);
        if v.shape() != [m.len(), cfg.d_model] {
            return Err(Error::shape(
                "forward",
                format!("{:?} stream of {} tokens has vectors {:?}", m.modality, m.len(), v.shape()),
            ));
        }
    }
    let metas: Vec<StreamMeta> = streams.iter().map(|(m, _)| m.clone()).collect();
    let layout = SequenceLayout::build(&metas, cfg.mask_scope);
    let n = layout.len();
    if n == 0 {
        return Err(Error::EmptyInput("forward needs at least one token"));
    }
    if n > cfg.max_positions {
        return Err(Error::Capacity {
            len: n,
            capacity: cfg.max_positions,
        });
    }
    let mut mask: Option<SemanticMask> = match mode {
        MaskMode::Fixed(m) => {
            if m.len() != layout.n_mask {
                return Err(Error::MaskShape {
                    mask: m.len(),
                    expected: layout.n_mask,
                });
            }
            Some(m.clone())
        }
        _ => None,
    };

    let mut order: Vec<usize> = (0..streams.len()).collect();
    order.sort_by_key(|&i| metas[i].modality.rank());
    let parts: Vec<NodeId> = order.iter().map(|&i| streams[i].1).collect();
    let mut x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };

    let n_und = layout.n_understanding;
    let base_bias: Tensor<T> = layout.attention_bias(None);
    let mut masked_bias: Option<Tensor<T>> = None;
    let same_cell: Vec<Option<NodeId>> = [Expert::Understanding, Expert::Generation]
        .into_iter()
        .map(|e| layout.same_cell_pairs::<T>(e).map(|m| tape.constant(m)))
        .collect();
    let hd = cfg.head_dim();
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let mut hidden = Vec::with_capacity(cfg.n_layers);
    let mut attention = Vec::new();

    for (l, blocks) in w.layout.layers.iter().enumerate() {
        if cfg.is_masked_layer(l) && masked_bias.is_none() {
            if let Some(m) = &mask {
                masked_bias = Some(layout.attention_bias(Some(&m.visible)));
            }
        }
        let bias = match (&masked_bias, cfg.is_masked_layer(l)) {
            (Some(b), true) => b,
            _ => &base_bias,
        };

        let h = routed(tape, x, n_und, blocks, |t, xs, b| {
            t.layernorm(xs, p.at(b.ln1_gain), p.at(b.ln1_bias))
        })?;
        let q = routed(tape, h, n_und, blocks, |t, hs, b| t.matmul(hs, p.at(b.wq)))?;
        let k = routed(tape, h, n_und, blocks, |t, hs, b| t.matmul(hs, p.at(b.wk)))?;
        let v = routed(tape, h, n_und, blocks, |t, hs, b| t.matmul(hs, p.at(b.wv)))?;
        let q = tape.scale(q, scale);
        let kt = tape.transpose(k)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut weights = Vec::new();
        for head in 0..cfg.n_heads {
            let (qh, kh, vh) = if cfg.n_heads == 1 {
                (q, kt, v)
            } else {
                (
                    tape.slice_cols(q, head * hd, hd)?,
                    tape.slice_rows(kt, head * hd, hd)?,
                    tape.slice_cols(v, head * hd, hd)?,
                )
            };
            let mut logits = tape.matmul(qh, kh)?;
            for (pairs, b) in same_cell.iter().zip(blocks) {
                if let Some(pairs) = *pairs {
                    let term = tape.scale_by_entry(pairs, p.at(b.same_cell), head)?;
                    logits = tape.add(logits, term)?;
                }
            }
            let logits = tape.add_const(logits, bias)?;
            let probs = tape.softmax_rows(logits)?;
            if opts.capture_attention {
                weights.push(probs);
            }
            heads.push(tape.matmul(probs, vh)?);
        }
        attention.push(weights);
        let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let o = routed(tape, o, n_und, blocks, |t, os, b| t.matmul(os, p.at(b.wo)))?;
        x = tape.add(x, o)?;

        let f = routed(tape, x, n_und, blocks, |t, xs, b| {
            let h = t.layernorm(xs, p.at(b.ln2_gain), p.at(b.ln2_bias))?;
            let a = t.matmul(h, p.at(b.w1))?;
            let a = t.add_row_vec(a, p.at(b.b1))?;
            let a = t.silu(a);
            let a = t.matmul(a, p.at(b.w2))?;
            t.add_row_vec(a, p.at(b.b2))
        })?;
        x = tape.add(x, f)?;
        hidden.push(x);

        if l == cfg.mask_source_layer {
            if let MaskMode::Compute { tau } = mode {
                let (hv, ht) = bridge_rows(tape.value(x), &layout, &metas)?;
                mask = Some(bridge::mask_from_states(&hv, &ht, tau, l)?);
            }
        }
    }

    let targets = layout.target_range();
    let head = if targets.is_empty() {
        None
    } else {
        let xt = tape.slice_rows(x, targets.start, targets.len())?;
        let l = &w.layout;
        let h = tape.layernorm(xt, p.at(l.head_ln_gain), p.at(l.head_ln_bias))?;
        let o = tape.matmul(h, p.at(l.head_w))?;
        Some(tape.add_row_vec(o, p.at(l.head_b))?)
    };

    Ok(Graph {
        metas,
        layout,
        hidden,
        head,
        mask,
        attention,
    })
}

fn check_capacity(n: usize, cfg: &ModelConfig) -> Result<()> {
    if n > cfg.max_positions {
        return Err(Error::Capacity {
            len: n,
            capacity: cfg.max_positions,
        });
    }
    Ok(())
}

fn check_image(image: usize, cfg: &ModelConfig) -> Result<()> {
    if image >= cfg.max_images {
        return Err(Error::Capacity {
            len: image + 1,
            capacity: cfg.max_images,
        });
    }
    Ok(())
}

fn sum_nodes<T: Scalar>(tape: &mut Tape<T>, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(acc)
}

fn empty_stream<T: Scalar>(tape: &mut Tape<T>, d: usize) -> NodeId {
    tape.constant(Tensor::zeros(&[0, d]))
}

pub(crate) fn text_node<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamNodes,
    w: &Weights<T>,
    ids: &[usize],
) -> Result<(StreamMeta, NodeId)> {
    let cfg = &w.config;
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.text_vocab) {
        return Err(Error::Vocabulary {
            id: bad,
            vocab: cfg.text_vocab,
        });
    }
    check_capacity(ids.len(), cfg)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let meta = StreamMeta {
        modality: Modality::Text,
        positions: positions.clone(),
        source_image_index: None,
        token_ids: Some(ids.to_vec()),
    };
    if ids.is_empty() {
        return Ok((meta, empty_stream(tape, cfg.d_model)));
    }
    let e = tape.gather(p.at(w.layout.text_emb), ids)?;
    let pe = tape.gather(p.at(w.layout.text_pos_emb), &positions)?;
    Ok((meta, tape.add(e, pe)?))
}

pub(crate) fn scene_und_node<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamNodes,
    w: &Weights<T>,
    scene: &Scene,
    image: usize,
) -> Result<(StreamMeta, NodeId)> {
    let cfg = &w.config;
    check_image(image, cfg)?;
    let n = scene.n_cells();
    check_capacity(n, cfg)?;
    let positions: Vec<usize> = (0..n).collect();
    let meta = StreamMeta {
        modality: Modality::VisUnd,
        positions: positions.clone(),
        source_image_index: Some(image),
        token_ids: None,
    };
    let classes = scene.class_map();
    // The cell embedding is tied to the text embeddings of the cell's
    // attributes and of its image index.
    let mut sel = vec![T::zero(); n * cfg.text_vocab];
    let image_tok = Token::Image(image as u8).id();
    for (i, &c) in classes.iter().enumerate() {
        let row = &mut sel[i * cfg.text_vocab..(i + 1) * cfg.text_vocab];
        row[image_tok] = T::one();
        if let Some(toks) = class_attribute_tokens(c) {
            for t in toks {
                row[t] = row[t] + T::one();
            }
        }
    }
    let sel = tape.constant(Tensor::from_parts(vec![n, cfg.text_vocab], sel));
    let tied = tape.matmul(sel, p.at(w.layout.text_emb))?;
    let cell = tape.gather(p.at(w.layout.cell_emb), &classes)?;
    let pos = tape.gather(p.at(w.layout.pos_emb), &positions)?;
    Ok((meta, sum_nodes(tape, &[cell, tied, pos])?))
}

fn latent_rows<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamNodes,
    w: &Weights<T>,
    latents: &Tensor<T>,
    image_row: usize,
) -> Result<NodeId> {
    let cfg = &w.config;
    let n = latents.rows();
    if latents.shape().len() != 2 || latents.cols() != cfg.d_latent {
        return Err(Error::shape(
            "embed_latents",
            format!("{:?}, expected width {}", latents.shape(), cfg.d_latent),
        ));
    }
    let x = tape.constant(latents.clone());
    let proj = tape.matmul(x, p.at(w.layout.latent_in_w))?;
    let proj = tape.add_row_vec(proj, p.at(w.layout.latent_in_b))?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.gather(p.at(w.layout.pos_emb), &positions)?;
    let img = tape.gather(p.at(w.layout.image_emb), &vec![image_row; n])?;
    sum_nodes(tape, &[proj, pos, img])
}

pub(crate) fn scene_gen_node<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamNodes,
    w: &Weights<T>,
    latents: &Tensor<T>,
    image: usize,
) -> Result<(StreamMeta, NodeId)> {
    let cfg = &w.config;
    check_image(image, cfg)?;
    check_capacity(latents.rows(), cfg)?;
    let meta = StreamMeta {
        modality: Modality::VisGen,
        positions: (0..latents.rows()).collect(),
        source_image_index: Some(image),
        token_ids: None,
    };
    if latents.rows() == 0 {
        return Ok((meta, empty_stream(tape, cfg.d_model)));
    }
    Ok((meta, latent_rows(tape, p, w, latents, image)?))
}

/// Sinusoidal features of the flow time, geometric frequencies 1..100.
pub fn time_features(t: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n);
    for k in 0..n {
        let f = if n == 1 {
            1.0
        } else {
            100f64.powf(k as f64 / (n - 1) as f64)
        };
        out.push((f * t).sin());
        out.push((f * t).cos());
    }
    out
}

pub(crate) fn target_node<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamNodes,
    w: &Weights<T>,
    latents: &Tensor<T>,
    t: f64,
) -> Result<(StreamMeta, NodeId)> {
    let cfg = &w.config;
    check_capacity(latents.rows(), cfg)?;
    let meta = StreamMeta {
        modality: Modality::Target,
        positions: (0..latents.rows()).collect(),
        source_image_index: None,
        token_ids: None,
    };
    if latents.rows() == 0 {
        return Ok((meta, empty_stream(tape, cfg.d_model)));
    }
    let x = latent_rows(tape, p, w, latents, cfg.max_images)?;
    let feats: Vec<T> = time_features(t, cfg.time_features).into_iter().map(T::lit).collect();
    let feats = tape.constant(Tensor::from_parts(vec![1, 2 * cfg.time_features], feats));
    let te = tape.matmul(feats, p.at(w.layout.time_w))?;
    let te = tape.add_row_vec(te, p.at(w.layout.time_b))?;
    Ok((meta, tape.add_row_vec(x, te)?))
}

/// Records the full conditioning + target sequence of one sample.
pub(crate) fn sample_graph<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamNodes,
    w: &Weights<T>,
    references: &[Scene],
    instruction: &[usize],
    x_t: &Tensor<T>,
    t: f64,
    mode: MaskMode<'_>,
    opts: ForwardOptions,
) -> Result<Graph> {
    let mut streams = Vec::with_capacity(2 + 2 * references.len());
    streams.push(text_node(tape, p, w, instruction)?);
    for (k, scene) in references.iter().enumerate() {
        streams.push(scene_und_node(tape, p, w, scene, k)?);
    }
    for (k, scene) in references.iter().enumerate() {
        let lat: Tensor<T> = render(scene).cast();
        streams.push(scene_gen_node(tape, p, w, &lat, k)?);
    }
    streams.push(target_node(tape, p, w, x_t, t)?);
    run_core(tape, p, w, streams, mode, opts)
}

fn frozen_tape<T: Scalar>(w: &Weights<T>) -> (Tape<T>, ParamNodes) {
    let mut tape = Tape::new();
    let p = w.register(&mut tape, &GroupSet::new());
    (tape, p)
}

fn into_stream<T: Scalar>(tape: &Tape<T>, (meta, node): (StreamMeta, NodeId)) -> Result<TokenStream<T>> {
    TokenStream::new(meta, tape.value(node).clone())
}

/// Learned token embeddings plus text position embeddings.
pub fn embed_text<T: Scalar>(ids: &[usize], w: &Weights<T>) -> Result<TokenStream<T>> {
    let (mut tape, p) = frozen_tape(w);
    let s = text_node(&mut tape, &p, w, ids)?;
    into_stream(&tape, s)
}

/// One understanding token per grid cell, row-major.
pub fn embed_scene_und<T: Scalar>(scene: &Scene, image: usize, w: &Weights<T>) -> Result<TokenStream<T>> {
    let (mut tape, p) = frozen_tape(w);
    let s = scene_und_node(&mut tape, &p, w, scene, image)?;
    into_stream(&tape, s)
}

/// Projects reference latents into the model width.
pub fn embed_scene_gen<T: Scalar>(latents: &Tensor<T>, image: usize, w: &Weights<T>) -> Result<TokenStream<T>> {
    let (mut tape, p) = frozen_tape(w);
    let s = scene_gen_node(&mut tape, &p, w, latents, image)?;
    into_stream(&tape, s)
}

/// Noisy target latents at flow time `t`.
pub fn embed_target<T: Scalar>(latents: &Tensor<T>, t: f64, w: &Weights<T>) -> Result<TokenStream<T>> {
    let (mut tape, p) = frozen_tape(w);
    let s = target_node(&mut tape, &p, w, latents, t)?;
    into_stream(&tape, s)
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Scalar = f32> {
    pub activations: LayerActivations<T>,
    /// Flow-head output for the Target rows.
    pub velocity: Tensor<T>,
    pub layout: SequenceLayout,
    pub mask: Option<SemanticMask>,
    /// `attention[l][h]` in canonical row order, when captured.
    pub attention: Vec<Vec<Tensor<T>>>,
}

pub fn forward<T: Scalar>(
    streams: &[TokenStream<T>],
    mask: Option<&SemanticMask>,
    w: &Weights<T>,
) -> Result<ForwardOutput<T>> {
    let mode = mask.map_or(MaskMode::Off, MaskMode::Fixed);
    forward_with(streams, mode, w, ForwardOptions::default())
}

pub fn forward_with<T: Scalar>(
    streams: &[TokenStream<T>],
    mode: MaskMode<'_>,
    w: &Weights<T>,
    opts: ForwardOptions,
) -> Result<ForwardOutput<T>> {
    let (mut tape, p) = frozen_tape(w);
    let nodes = streams
        .iter()
        .map(|s| (s.meta.clone(), tape.constant(s.vectors.clone())))
        .collect();
    let g = run_core(&mut tape, &p, w, nodes, mode, opts)?;
    Ok(ForwardOutput {
        activations: g.activations(&tape),
        velocity: g.velocity(&tape, w.config.d_latent),
        attention: g
            .attention
            .iter()
            .map(|hs| hs.iter().map(|&h| tape.value(h).clone()).collect())
            .collect(),
        layout: g.layout,
        mask: g.mask,
    })
}

/// Embeds a full sample (instruction, references, noisy target) into streams
/// in the order the model expects.
pub fn sample_streams<T: Scalar>(
    references: &[Scene],
    instruction: &[usize],
    x_t: &Tensor<T>,
    t: f64,
    w: &Weights<T>,
) -> Result<Vec<TokenStream<T>>> {
    let mut out = vec![embed_text(instruction, w)?];
    for (k, s) in references.iter().enumerate() {
        out.push(embed_scene_und(s, k, w)?);
    }
    for (k, s) in references.iter().enumerate() {
        out.push(embed_scene_gen(&render(s).cast(), k, w)?);
    }
    out.push(embed_target(x_t, t, w)?);
    Ok(out)
}
