//! Independent oracles and the property checks built on them. Shared by the
//! per-area integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use motbridge::bridge::{build_mask, build_mask_with, normalize_hidden, relevance_scores, similarity_matrix, SemanticMask};
use motbridge::evalkit::{overall_score, score_distinction, scores_from_counts, Counts, PresenceVerdict};
use motbridge::model::{
    checkpoint_bytes, forward, forward_with, gaussian_latents, parse_checkpoint, sample_streams, Expert,
    ForwardOptions, MaskMode, MaskPolicy, Modality, ModelConfig, ParamGroup, ParamNodes, Weights,
};
use motbridge::numkit::{grad_check, Scalar, Tensor, LAYERNORM_EPS};
use motbridge::probe::top_fraction_mask;
use motbridge::synthworld::{decode, gen_sample, render, Scene, Subject, SubjectQuery, SubjectRef, TaskKind};
use motbridge::trainer::{flow_loss_graph, run_phase, Phase, StageConfig};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }

    pub fn assert(&self) {
        assert!(self.passed, "{}", self.detail);
    }
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

// ---------------------------------------------------------------- oracles

pub fn oracle_normalize(h: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..h.rows())
        .map(|i| {
            let row = h.row(i);
            let mut ss = 0.0;
            for &x in row {
                ss += x * x;
            }
            let n = ss.sqrt();
            row.iter().map(|&x| x / n).collect()
        })
        .collect()
}

pub fn oracle_similarity(v: &[Vec<f64>], t: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut s = vec![vec![0.0; t.len()]; v.len()];
    for i in 0..v.len() {
        for j in 0..t.len() {
            let mut acc = 0.0;
            for k in 0..v[i].len() {
                acc += v[i][k] * t[j][k];
            }
            s[i][j] = acc;
        }
    }
    s
}

pub fn oracle_relevance(s: &[Vec<f64>]) -> Vec<f64> {
    s.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect()
}

/// Strict comparison; if nothing passes, the first maximum stays visible.
pub fn oracle_mask(s: &[f64], tau: f64) -> (Vec<bool>, bool) {
    let mut v: Vec<bool> = s.iter().map(|&x| x > tau).collect();
    if !s.is_empty() && !v.contains(&true) {
        let mut best = 0;
        for i in 1..s.len() {
            if s[i] > s[best] {
                best = i;
            }
        }
        v[best] = true;
        return (v, true);
    }
    (v, false)
}

pub fn oracle_confusion(verdicts: &[(bool, bool)]) -> (f64, f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for &(e, o) in verdicts {
        match (e, o) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fn_ += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    let acc = (tp + tn) / (tp + fp + fn_ + tn);
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = (p + r) / 2.0;
    (acc, p, r, f1, 10.0 * (acc + f1) / 2.0)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- bridge

pub fn bridge_exactness(pairs: usize) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xB21D);
    let (mut worst, mut mask_mismatch, mut boundary_cases) = (0.0f64, 0usize, 0usize);
    for _ in 0..pairs {
        let nv = rng.random_range(1..=40);
        let nt = rng.random_range(1..=10);
        let d = rng.random_range(1..=24);
        let scale = [1e-3, 1.0, 1e3][rng.random_range(0..3)];
        let hv = normal_matrix(&mut rng, nv, d, scale);
        let ht = normal_matrix(&mut rng, nt, d, scale);

        let (ov, ot) = (oracle_normalize(&hv), oracle_normalize(&ht));
        let (Ok(lv), Ok(lt)) = (normalize_hidden(&hv), normalize_hidden(&ht)) else {
            return Outcome::new(false, "normalization rejected a nonzero matrix");
        };
        worst = worst.max(max_abs(lv.data(), &ov.concat())).max(max_abs(lt.data(), &ot.concat()));

        let os = oracle_similarity(&ov, &ot);
        let to_t = |m: &[Vec<f64>]| Tensor::new(vec![m.len(), m[0].len()], m.concat()).unwrap();
        let ls = similarity_matrix(&to_t(&ov), &to_t(&ot)).unwrap();
        worst = worst.max(max_abs(ls.data(), &os.concat()));

        let orel = oracle_relevance(&os);
        let lrel = relevance_scores(&to_t(&os)).unwrap();
        worst = worst.max(max_abs(lrel.data(), &orel));

        let tau = if rng.random_bool(0.5) {
            boundary_cases += 1;
            orel[rng.random_range(0..nv)]
        } else {
            rng.random_range(-0.99..0.99)
        };
        let (ovis, ofb) = oracle_mask(&orel, tau);
        let m = build_mask(&orel, tau);
        let strict: Vec<bool> = orel.iter().map(|&x| x > tau).collect();
        if m.visible != ovis || m.fallback_applied != ofb || build_mask_with(&orel, tau, false).visible != strict {
            mask_mismatch += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst <= 1e-12 && mask_mismatch == 0 && secs < 10.0,
        format!(
            "{pairs} pairs, max |lib - oracle| {worst:.2e}, mask mismatches {mask_mismatch} ({boundary_cases} with tau on a score), {secs:.2}s"
        ),
    )
}

// ---------------------------------------------------------------- attention

/// Four layers, width 32, bridge at layer 1, masked layers 2..=3.
pub fn attention_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_layers: 4,
        n_heads: 4,
        d_ff: 48,
        mask_source_layer: 1,
        masked_layer_lo: 2,
        masked_layer_hi: 3,
        ..ModelConfig::default()
    }
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, p_visible: f64) -> SemanticMask {
    let mut visible: Vec<bool> = (0..n).map(|_| rng.random_bool(p_visible)).collect();
    if !visible.contains(&true) {
        visible[rng.random_range(0..n)] = true;
    }
    SemanticMask {
        relevance: vec![0.0; n],
        visible,
        threshold: 0.0,
        source_layer: 1,
        fallback_applied: false,
    }
}

fn layernorm_rows(x: &[f64], d: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.chunks(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) * rs * gain[j] + bias[j];
        }
    }
    out
}

struct Case {
    w: Weights<f64>,
    streams: Vec<motbridge::model::TokenStream<f64>>,
}

fn attention_case(seed: u64, task: TaskKind) -> Case {
    let cfg = attention_config();
    let w = Weights::<f64>::init(&cfg, seed).unwrap();
    let s = gen_sample(task, seed, (6, 6)).unwrap();
    let x: Tensor<f64> = gaussian_latents(36, cfg.d_latent, seed);
    let streams = sample_streams(&s.references, &s.instruction, &x, 0.4, &w).unwrap();
    Case { w, streams }
}

/// Masked columns get exactly zero weight from Target queries in masked
/// layers; the remaining weights equal a softmax recomputed from the
/// layer's input states over the visible columns only.
pub fn zero_attention(models: usize) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA77);
    let (mut nonzero, mut checked_zero, mut worst) = (0usize, 0usize, 0.0f64);
    for m in 0..models {
        let task = [TaskKind::DistinctionCross, TaskKind::CompositionMulti, TaskKind::DistCompIntra][m % 3];
        let Case { w, streams } = attention_case(100 + m as u64, task);
        let cfg = &w.config;
        let out0 = forward(&streams, None, &w).unwrap();
        let mask = random_mask(&mut rng, out0.layout.n_mask, 0.4);
        let out = forward_with(
            &streams,
            MaskMode::Fixed(&mask),
            &w,
            ForwardOptions {
                capture_attention: true,
            },
        )
        .unwrap();
        let rows = &out.layout.rows;
        let n = rows.len();
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let n_und = out.layout.n_understanding;
        let hidden_col = |q: usize, k: usize| {
            let (rq, rk) = (&rows[q], &rows[k]);
            if rq.modality != Modality::Target {
                rk.modality == Modality::Target
            } else {
                rk.mask_index.is_some_and(|i| !mask.visible[i])
            }
        };
        for l in cfg.masked_layer_lo..=cfg.masked_layer_hi {
            let x: Vec<f64> = out.activations.layers[l - 1].iter().flat_map(|t| t.data().to_vec()).collect();
            let blocks = &w.layout.layers[l];
            let pv = |i: usize| w.params[i].value.data();
            let mut q = vec![0.0; n * d];
            let mut k = vec![0.0; n * d];
            for r in 0..n {
                let b = &blocks[(r >= n_und) as usize];
                let h = layernorm_rows(&x[r * d..(r + 1) * d], d, pv(b.ln1_gain), pv(b.ln1_bias));
                for j in 0..d {
                    let (mut aq, mut ak) = (0.0, 0.0);
                    for i in 0..d {
                        aq += h[i] * pv(b.wq)[i * d + j];
                        ak += h[i] * pv(b.wk)[i * d + j];
                    }
                    q[r * d + j] = aq;
                    k[r * d + j] = ak;
                }
            }
            for head in 0..cfg.n_heads {
                let probs = &out.attention[l][head];
                for qi in out.layout.target_range() {
                    let mut logits = vec![f64::NEG_INFINITY; n];
                    for ki in 0..n {
                        if hidden_col(qi, ki) {
                            continue;
                        }
                        let mut dot = 0.0;
                        for j in head * hd..(head + 1) * hd {
                            dot += q[qi * d + j] * k[ki * d + j];
                        }
                        let mut z = dot / (hd as f64).sqrt();
                        let (rq, rk) = (&rows[qi], &rows[ki]);
                        if rk.modality != Modality::Text && rk.stream != rq.stream && rk.position == rq.position {
                            z += pv(blocks[1].same_cell)[head];
                        }
                        logits[ki] = z;
                    }
                    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|&z| (z - mx).exp()).collect();
                    let sum: f64 = e.iter().sum();
                    for ki in 0..n {
                        let got = probs.get2(qi, ki);
                        if rows[ki].mask_index.is_some_and(|i| !mask.visible[i]) {
                            checked_zero += 1;
                            if got != 0.0 {
                                nonzero += 1;
                            }
                        } else {
                            worst = worst.max((got - e[ki] / sum).abs());
                        }
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        nonzero == 0 && checked_zero > 0 && worst <= 1e-6 && secs < 30.0,
        format!(
            "{models} models, {checked_zero} masked weights ({nonzero} nonzero), visible-column max err {worst:.2e}, {secs:.2}s"
        ),
    )
}

fn bits<T: Scalar>(t: &Tensor<T>) -> Vec<u64> {
    t.data().iter().map(|v| v.as_f64().to_bits()).collect()
}

/// All-visible mask gives the unmasked pass bit for bit; an arbitrary mask
/// leaves every layer below the masked range, and every context row at every
/// layer, bit-identical.
pub fn mask_locality(models: usize) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x10C);
    let mut failures = Vec::new();
    for m in 0..models {
        let Case { w, streams } = attention_case(200 + m as u64, TaskKind::DistinctionIntra);
        let cfg = w.config.clone();
        let base = forward(&streams, None, &w).unwrap();
        let all = SemanticMask::all_visible(base.layout.n_mask);
        let same = forward(&streams, Some(&all), &w).unwrap();
        let identical = base.activations.layers.iter().flatten().zip(same.activations.layers.iter().flatten()).all(|(a, b)| bits(a) == bits(b))
            && bits(&base.velocity) == bits(&same.velocity);
        if !identical {
            failures.push(format!("model {m}: all-visible mask changed the pass"));
        }
        let mask = random_mask(&mut rng, base.layout.n_mask, 0.3);
        let masked = forward(&streams, Some(&mask), &w).unwrap();
        for l in 0..cfg.n_layers {
            for (s, meta) in base.activations.streams.iter().enumerate() {
                let equal = bits(base.activations.get(l, s)) == bits(masked.activations.get(l, s));
                let must = l < cfg.masked_layer_lo || meta.modality != Modality::Target;
                if must && !equal {
                    failures.push(format!("model {m}: layer {l} stream {s} changed"));
                }
            }
        }
        if bits(&base.velocity) == bits(&masked.velocity) {
            failures.push(format!("model {m}: mask had no effect on the output"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        failures.is_empty() && secs < 30.0,
        if failures.is_empty() {
            format!("{models} models bit-identical where required, {secs:.2}s")
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------- gradients

pub fn flow_gradient(task: TaskKind, grid: (usize, usize), policy: MaskPolicy, seed: u64) -> (f64, usize) {
    let w = Weights::<f64>::init(&ModelConfig::tiny(), seed).unwrap();
    let sample = gen_sample(task, seed, grid).unwrap();
    let params: Vec<_> = w.params.iter().map(|p| p.value.clone()).collect();
    let report = grad_check(
        |tape, ids| {
            let p = ParamNodes(ids.to_vec());
            flow_loss_graph(tape, &p, &w, &sample, 0.37, seed, policy)
        },
        &params,
        250,
        seed,
    )
    .unwrap();
    (report.max_rel_err, report.coords_checked)
}

pub fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let a = flow_gradient(TaskKind::CompositionMulti, (3, 3), MaskPolicy::Off, 3);
    let b = flow_gradient(TaskKind::DistinctionCross, (4, 4), MaskPolicy::Active { tau: 0.1 }, 5);
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        a.0 < 1e-4 && b.0 < 1e-4 && a.1 >= 200 && b.1 >= 200 && secs < 120.0,
        format!(
            "unmasked {:.2e} over {} coords, masked {:.2e} over {} coords, {secs:.1}s",
            a.0, a.1, b.0, b.1
        ),
    )
}

// ---------------------------------------------------------------- freezing

/// Payload bytes of each parameter, by name.
pub fn param_bytes(ckpt: &[u8]) -> Vec<(String, ParamGroup, Vec<u8>)> {
    let w = parse_checkpoint(ckpt).unwrap();
    w.params
        .iter()
        .map(|p| {
            let mut b = Vec::new();
            for v in p.value.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
            (p.name.clone(), p.group, b)
        })
        .collect()
}

fn short_stage(phase: Phase, steps: usize) -> StageConfig {
    StageConfig {
        steps,
        batch_size: 2,
        seed: 11,
        ..StageConfig::default_for(phase)
    }
}

/// Tensors of the last layer's understanding block that only shape context
/// rows after the last attention, so no loss gradient reaches them.
fn unreachable_from_loss(name: &str, n_layers: usize) -> bool {
    let prefix = format!("layers.{}.und.", n_layers - 1);
    name.strip_prefix(&prefix).is_some_and(|rest| {
        matches!(rest, "attn.wq" | "attn.wo" | "attn.same_cell") || rest.starts_with("ln2.") || rest.starts_with("ff.")
    })
}

/// Compares checkpoint payloads before and after each phase: frozen groups
/// must be byte-identical and every trainable tensor that the loss reaches
/// must move.
pub fn freezing_contract() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::default();
    let w0 = Weights::<f32>::init(&cfg, 9).unwrap();
    let mut problems = Vec::new();
    let mut w = w0;
    for (phase, steps) in [(Phase::Stage1, 4), (Phase::Stage2Step1, 3), (Phase::Stage2Step2, 3)] {
        let before = checkpoint_bytes(&w).unwrap();
        let (next, _) = run_phase(&short_stage(phase, steps), w, None).unwrap();
        let after = checkpoint_bytes(&next).unwrap();
        let trainable = phase.trainable_groups();
        let (mut frozen_ok, mut moved) = (0, 0);
        for ((name, group, a), (_, _, b)) in param_bytes(&before).into_iter().zip(param_bytes(&after)) {
            if trainable.contains(&group) {
                if a == b && !unreachable_from_loss(&name, cfg.n_layers) {
                    problems.push(format!("{phase}: trainable {name} did not change"));
                } else {
                    moved += 1;
                }
            } else if a != b {
                problems.push(format!("{phase}: frozen {name} changed"));
            } else {
                frozen_ok += 1;
            }
        }
        log::info!("{phase}: {moved} tensors moved, {frozen_ok} frozen intact");
        w = next;
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        problems.is_empty() && secs < 120.0,
        if problems.is_empty() {
            format!("three phases, frozen payloads identical, all reachable trainable tensors moved, {secs:.1}s")
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------- codec

/// Every valid scene on `grid` built from `shapes` x `colors`.
pub fn all_scenes(grid: (usize, usize), shapes: &[u8], colors: &[u8]) -> Vec<Scene> {
    let mut candidates = Vec::new();
    for &sh in shapes {
        for &co in colors {
            for r in 0..grid.0 {
                for c in 0..grid.1 {
                    let s = Subject::new(sh, co, (r, c));
                    if s.footprint.iter().all(|&(a, b)| a < grid.0 && b < grid.1) {
                        candidates.push(s);
                    }
                }
            }
        }
    }
    let mut out = Vec::new();
    let mut chosen: Vec<Subject> = Vec::new();
    fn rec(i: usize, cands: &[Subject], chosen: &mut Vec<Subject>, grid: (usize, usize), out: &mut Vec<Scene>) {
        if i == cands.len() {
            if let Ok(s) = Scene::new(grid, chosen.clone()) {
                out.push(s);
            }
            return;
        }
        rec(i + 1, cands, chosen, grid, out);
        let overlaps = chosen
            .iter()
            .any(|s| s.footprint.iter().any(|c| cands[i].footprint.contains(c)));
        if !overlaps {
            chosen.push(cands[i].clone());
            rec(i + 1, cands, chosen, grid, out);
            chosen.pop();
        }
    }
    rec(0, &candidates, &mut chosen, grid, &mut out);
    out
}

pub fn random_scene(rng: &mut ChaCha8Rng, grid: (usize, usize)) -> Scene {
    loop {
        let n = rng.random_range(0..=6);
        let subjects: Vec<Subject> = (0..n)
            .map(|_| {
                Subject::new(
                    rng.random_range(0..4),
                    rng.random_range(0..4),
                    (rng.random_range(0..grid.0), rng.random_range(0..grid.1)),
                )
            })
            .collect();
        if let Ok(s) = Scene::new(grid, subjects) {
            return s;
        }
    }
}

pub fn codec_round_trip(random: usize) -> Outcome {
    let start = Instant::now();
    let exhaustive = all_scenes((3, 3), &[0, 1], &[0, 1]);
    let mut bad = 0;
    for s in &exhaustive {
        if decode(&render(s), s.grid_size).ok().as_ref() != Some(s) {
            bad += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE);
    for _ in 0..random {
        let s = random_scene(&mut rng, (6, 6));
        if decode(&render(&s), s.grid_size).ok().as_ref() != Some(&s) {
            bad += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        bad == 0 && exhaustive.len() > 1000 && secs < 60.0,
        format!(
            "{} exhaustive 3x3 scenes + {random} random 6x6 scenes, {bad} mismatches, {secs:.2}s",
            exhaustive.len()
        ),
    )
}

// ---------------------------------------------------------------- scoring

pub fn verdicts_from(pairs: &[(bool, bool)]) -> Vec<PresenceVerdict> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(e, o))| PresenceVerdict {
            case_id: format!("c{i}"),
            subject: SubjectRef { image: 0, subject: i },
            query: SubjectQuery::default(),
            expected: e,
            observed: o,
        })
        .collect()
}

pub fn scoring_fidelity() -> Outcome {
    let start = Instant::now();
    let mut notes = Vec::new();
    let hand = scores_from_counts(Counts { tp: 3, fp: 1, fn_: 0, tn: 2 }).unwrap();
    // acc 5/6, P 3/4, R 1, F1 7/8.
    let hand_ok = (hand.accuracy - 5.0 / 6.0).abs() < 1e-12
        && (hand.f1 - 0.875).abs() < 1e-12
        && (hand.distinction - 8.541_666_666_666_666).abs() < 1e-9
        && format!("{:.3}", hand.distinction) == "8.542";
    if !hand_ok {
        notes.push(format!("hand case gave {:.6}", hand.distinction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5C0);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(1..60);
        let pairs: Vec<(bool, bool)> = (0..n).map(|_| (rng.random_bool(0.5), rng.random_bool(0.5))).collect();
        let got = score_distinction(&verdicts_from(&pairs)).unwrap();
        let (a, p, r, f, d) = oracle_confusion(&pairs);
        worst = worst
            .max((got.accuracy - a).abs())
            .max((got.precision - p).abs())
            .max((got.recall - r).abs())
            .max((got.f1 - f).abs())
            .max((got.distinction - d).abs());
    }
    if worst > 1e-12 {
        notes.push(format!("randomized cases differ by {worst:.2e}"));
    }
    let published = overall_score(8.21, 8.79);
    if format!("{published:.2}") != "8.50" {
        notes.push(format!("overall of 8.21/8.79 gave {published}"));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        notes.is_empty() && secs < 5.0,
        if notes.is_empty() {
            format!(
                "hand case {:.3}, 20 random cases within {worst:.1e}, (8.21+8.79)/2 = {published:.2}, {secs:.3}s",
                hand.distinction
            )
        } else {
            notes.join("; ")
        },
    )
}

// ---------------------------------------------------------------- probe

pub fn top_fraction_exact() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x70F);
    let mut bad = 0;
    for n in 1..=64usize {
        for _ in 0..5 {
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
            let keep = top_fraction_mask(&scores, 0.5).unwrap();
            let k = keep.iter().filter(|&&x| x).count();
            let min_kept = scores.iter().zip(&keep).filter(|(_, &k)| k).map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
            let max_dropped = scores.iter().zip(&keep).filter(|(_, &k)| !k).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
            if k != n.div_ceil(2) || max_dropped > min_kept {
                bad += 1;
            }
        }
    }
    Outcome::new(bad == 0, format!("sizes 1..=64, {bad} wrong cardinalities or orderings"))
}

/// Exact byte equality of two directory trees, skipping `skip` subdirectories.
pub fn compare_trees(a: &Path, b: &Path, skip: &[&str]) -> Result<usize, String> {
    fn walk(root: &Path, dir: &Path, skip: &[&str], out: &mut Vec<std::path::PathBuf>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            let rel = p.strip_prefix(root).unwrap().to_path_buf();
            if skip.iter().any(|s| rel.starts_with(s)) {
                continue;
            }
            if p.is_dir() {
                walk(root, &p, skip, out);
            } else {
                out.push(rel);
            }
        }
    }
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    walk(a, a, skip, &mut fa);
    walk(b, b, skip, &mut fb);
    if fa != fb {
        return Err(format!("file sets differ: {} vs {} files", fa.len(), fb.len()));
    }
    for rel in &fa {
        if std::fs::read(a.join(rel)).unwrap() != std::fs::read(b.join(rel)).unwrap() {
            return Err(format!("{} differs", rel.display()));
        }
    }
    Ok(fa.len())
}

pub fn expert_name(e: Expert) -> &'static str {
    match e {
        Expert::Understanding => "understanding",
        Expert::Generation => "generation",
    }
}
