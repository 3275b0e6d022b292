use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    gaussian_latents, sample_graph, save_checkpoint, ForwardOptions, MaskPolicy, ModelConfig,
    ParamNodes, Weights,
};
use crate::numkit::{NodeId, Scalar, Tape, Tensor};
use crate::synthworld::{gen_sample, render, Sample};

use super::adam::OptimizerState;
use super::{Phase, StageConfig};

/// Noisy latents `x_t = (1-t) x0 + t x1` and the velocity `x1 - x0`.
pub fn flow_pair<T: Scalar>(sample: &Sample, t: f64, noise_seed: u64) -> (Tensor<T>, Tensor<T>) {
    let x1: Tensor<T> = render(&sample.target).cast();
    let x0: Tensor<T> = gaussian_latents(x1.rows(), x1.cols(), noise_seed);
    let tt = T::lit(t);
    let one = T::one();
    let xt = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(&a, &b)| (one - tt) * a + tt * b)
        .collect();
    let v = x0.data().iter().zip(x1.data()).map(|(&a, &b)| b - a).collect();
    (
        Tensor::new(x1.shape().to_vec(), xt).expect("same shape"),
        Tensor::new(x1.shape().to_vec(), v).expect("same shape"),
    )
}

fn check_time(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Precondition(format!("flow time {t} outside (0, 1)")));
    }
    Ok(())
}

/// Records the flow-matching loss of one sample on `tape`.
pub fn flow_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    p: &ParamNodes,
    w: &Weights<T>,
    sample: &Sample,
    t: f64,
    noise_seed: u64,
    policy: MaskPolicy,
) -> Result<NodeId> {
    check_time(t)?;
    let (xt, v) = flow_pair::<T>(sample, t, noise_seed);
    let g = sample_graph(
        tape,
        p,
        w,
        &sample.references,
        &sample.instruction,
        &xt,
        t,
        policy.mode(),
        ForwardOptions::default(),
    )?;
    let head = g.head.ok_or(Error::EmptyInput("sample has no target tokens"))?;
    let v = tape.constant(v);
    let diff = tape.sub(head, v)?;
    let sq = tape.square(diff);
    tape.mean(sq)
}

/// Mean squared error between the predicted and true velocity.
pub fn flow_loss<T: Scalar>(
    sample: &Sample,
    t: f64,
    noise_seed: u64,
    w: &Weights<T>,
    policy: MaskPolicy,
) -> Result<T> {
    let mut tape = Tape::new();
    let p = w.register(&mut tape, &Default::default());
    let loss = flow_loss_graph(&mut tape, &p, w, sample, t, noise_seed, policy)?;
    Ok(tape.scalar_value(loss))
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 folded over the parts
    let mut h = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Sample, flow time and noise seed for batch slot `b` of `step`.
pub fn training_item(cfg: &StageConfig, step: usize, b: usize) -> Result<(Sample, f64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, cfg.phase.salt(), step as u64, b as u64]));
    let task = cfg.data.tasks[rng.random_range(0..cfg.data.tasks.len())];
    let mut last_err = None;
    for _ in 0..8 {
        let seed: u64 = rng.random();
        match gen_sample(task, seed, cfg.data.grid) {
            Ok(sample) => {
                let t = rng.random::<f64>().clamp(1e-6, 1.0 - 1e-6);
                let noise_seed = mix(&[seed, step as u64]);
                return Ok((sample, t, noise_seed));
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Phase,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub checkpoint: Option<String>,
    /// Mean fraction of reference tokens left visible by the mask.
    pub mask_visible_fraction: Option<f64>,
    /// Fraction of training samples whose mask fell back to the argmax.
    pub mask_fallback_rate: Option<f64>,
    pub config: StageConfig,
    /// Kept out of the JSON so reports stay byte-reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }

    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let xs = &self.losses[range];
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Runs one phase, updating only `config.trainable_groups`.
pub fn run_phase(
    config: &StageConfig,
    mut weights: Weights<f32>,
    checkpoint: Option<&Path>,
) -> Result<(Weights<f32>, TrainReport)> {
    config.validate()?;
    let started = Instant::now();
    let groups = &config.trainable_groups;
    let mut opt = OptimizerState::new(&weights, groups, config.learning_rate);
    let policy = if config.mask_active {
        MaskPolicy::Active { tau: config.tau }
    } else {
        MaskPolicy::Off
    };
    let mut losses = Vec::with_capacity(config.steps);
    let (mut visible_sum, mut fallbacks, mut masked_samples) = (0.0, 0usize, 0usize);

    for step in 0..config.steps {
        let mut grads: Vec<Option<Vec<f32>>> = weights
            .params
            .iter()
            .map(|p| groups.contains(&p.group).then(|| vec![0.0; p.value.len()]))
            .collect();
        let mut loss_sum = 0.0;
        for b in 0..config.batch_size {
            let (sample, t, noise_seed) = training_item(config, step, b)?;
            let mut tape = Tape::new();
            let p = weights.register(&mut tape, groups);
            let (xt, v) = flow_pair::<f32>(&sample, t, noise_seed);
            let g = sample_graph(
                &mut tape,
                &p,
                &weights,
                &sample.references,
                &sample.instruction,
                &xt,
                t,
                policy.mode(),
                ForwardOptions::default(),
            )?;
            if let Some(m) = &g.mask {
                visible_sum += m.visible_count() as f64 / m.len().max(1) as f64;
                fallbacks += m.fallback_applied as usize;
                masked_samples += 1;
            }
            let head = g.head.ok_or(Error::EmptyInput("sample has no target tokens"))?;
            let v = tape.constant(v);
            let diff = tape.sub(head, v)?;
            let sq = tape.square(diff);
            let loss = tape.mean(sq)?;
            let lv = tape.scalar_value(loss) as f64;
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss: lv });
            }
            loss_sum += lv;
            let gr = tape.backward(loss)?;
            for (i, acc) in grads.iter_mut().enumerate() {
                let (Some(acc), Some(g)) = (acc.as_mut(), gr.get_slice(p.at(i))) else { continue };
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
        let inv = 1.0 / config.batch_size as f32;
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= inv;
            }
        }
        opt.apply(&mut weights, &grads);
        let mean = loss_sum / config.batch_size as f64;
        log::debug!("{} step {step} loss {mean:.5}", config.phase);
        losses.push(mean);
    }

    if let Some(path) = checkpoint {
        save_checkpoint(&weights, path)?;
    }
    let report = TrainReport {
        phase: config.phase,
        steps: config.steps,
        losses,
        checkpoint: checkpoint.map(|p| p.display().to_string()),
        mask_visible_fraction: (masked_samples > 0).then(|| visible_sum / masked_samples as f64),
        mask_fallback_rate: (masked_samples > 0).then(|| fallbacks as f64 / masked_samples as f64),
        config: config.clone(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((weights, report))
}

pub struct Curriculum {
    pub weights: Weights<f32>,
    pub reports: Vec<TrainReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// Stage I, then Stage II step 1, then step 2, handing weights along.
/// Checkpoints go to `<dir>/<phase>.ckpt` when `checkpoint_dir` is set.
pub fn run_curriculum(
    model: &ModelConfig,
    stages: [&StageConfig; 3],
    init_seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<Curriculum> {
    let expected = [Phase::Stage1, Phase::Stage2Step1, Phase::Stage2Step2];
    for (s, e) in stages.iter().zip(expected) {
        if s.phase != e {
            return Err(Error::Config(format!(
                "curriculum expects phase {e}, got {}",
                s.phase
            )));
        }
    }
    let mut weights = Weights::<f32>::init(model, init_seed)?;
    let mut reports = Vec::with_capacity(3);
    let mut checkpoints = Vec::new();
    for s in stages {
        let path = checkpoint_dir.map(|d| d.join(format!("{}.ckpt", s.phase)));
        let (w, r) = run_phase(s, weights, path.as_deref())?;
        log::info!(
            "{} done: loss {:.4} -> {:.4} in {:.1}s",
            s.phase,
            r.losses.first().copied().unwrap_or(f64::NAN),
            r.losses.last().copied().unwrap_or(f64::NAN),
            r.wall_clock_secs
        );
        weights = w;
        reports.push(r);
        checkpoints.extend(path);
    }
    Ok(Curriculum {
        weights,
        reports,
        checkpoints,
    })
}

/// Post-Stage-I training schedules compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    /// One phase over both experts with the mask off, as many steps as the
    /// two Stage II steps combined.
    Direct,
    TwoStepWithoutBridge,
    TwoStepWithBridge,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [
        AblationVariant::Direct,
        AblationVariant::TwoStepWithoutBridge,
        AblationVariant::TwoStepWithBridge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Direct => "direct",
            AblationVariant::TwoStepWithoutBridge => "two_step_without_bridge",
            AblationVariant::TwoStepWithBridge => "two_step_with_bridge",
        }
    }

    pub fn uses_mask(self) -> bool {
        self == AblationVariant::TwoStepWithBridge
    }

    /// Phases run after Stage I, derived from the Stage II templates.
    pub fn stages(self, s2s1: &StageConfig, s2s2: &StageConfig, tau: f64) -> Vec<StageConfig> {
        match self {
            AblationVariant::Direct => vec![StageConfig {
                steps: s2s1.steps + s2s2.steps,
                mask_active: false,
                tau,
                ..s2s2.clone()
            }],
            _ => [s2s1, s2s2]
                .into_iter()
                .map(|s| StageConfig {
                    mask_active: self.uses_mask(),
                    tau,
                    ..s.clone()
                })
                .collect(),
        }
    }
}

/// Continues from Stage I weights with the phases of `variant`.
pub fn run_ablation_variant(
    stage1_weights: &Weights<f32>,
    variant: AblationVariant,
    s2s1: &StageConfig,
    s2s2: &StageConfig,
    tau: f64,
) -> Result<(Weights<f32>, Vec<TrainReport>)> {
    let mut w = stage1_weights.clone();
    let mut reports = Vec::new();
    for s in variant.stages(s2s1, s2s2, tau) {
        let (nw, r) = run_phase(&s, w, None)?;
        w = nw;
        reports.push(r);
    }
    Ok((w, reports))
}
