use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bridge::SemanticMask;
use crate::error::{Error, Result};
use crate::numkit::{Scalar, Tape, Tensor};
use crate::synthworld::{decode, Scene};

use super::forward::{sample_graph, ForwardOptions, MaskMode};
use super::weights::{GroupSet, Weights};

/// Whether the semantic mask is built and applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskPolicy {
    Off,
    Active { tau: f64 },
}

impl MaskPolicy {
    pub fn mode(&self) -> MaskMode<'static> {
        match *self {
            MaskPolicy::Off => MaskMode::Off,
            MaskPolicy::Active { tau } => MaskMode::Compute { tau },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generation<T: Scalar = f32> {
    pub scene: Scene,
    pub latents: Tensor<T>,
    pub mask: Option<SemanticMask>,
}

/// Unit Gaussian latents, one row per target cell.
pub fn gaussian_latents<T: Scalar>(rows: usize, cols: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::lit(z)
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("sized buffer")
}

pub fn sample_generate<T: Scalar>(
    refs: &[Scene],
    instruction: &[usize],
    steps: usize,
    policy: MaskPolicy,
    w: &Weights<T>,
    seed: u64,
) -> Result<Scene> {
    Ok(sample_generate_full(refs, instruction, steps, policy, w, seed)?.scene)
}

/// Euler integration of the velocity field from Gaussian noise at `t = 0`
/// to `t = 1` over `steps` uniform steps. The mask is rebuilt every step and
/// must not change, since context tokens never attend to the target.
pub fn sample_generate_full<T: Scalar>(
    refs: &[Scene],
    instruction: &[usize],
    steps: usize,
    policy: MaskPolicy,
    w: &Weights<T>,
    seed: u64,
) -> Result<Generation<T>> {
    if steps == 0 {
        return Err(Error::Precondition("sampling needs at least one step".into()));
    }
    let grid = refs
        .first()
        .map(|s| s.grid_size)
        .ok_or(Error::EmptyInput("sampling needs a reference scene"))?;
    let n = grid.0 * grid.1;
    let mut x: Tensor<T> = gaussian_latents(n, w.config.d_latent, seed);
    let dt = 1.0 / steps as f64;
    let mut first_mask: Option<SemanticMask> = None;
    for k in 0..steps {
        let t = k as f64 * dt;
        let mut tape = Tape::new();
        let p = w.register(&mut tape, &GroupSet::new());
        let g = sample_graph(&mut tape, &p, w, refs, instruction, &x, t, policy.mode(), ForwardOptions::default())?;
        match (&first_mask, &g.mask) {
            (None, m) => first_mask = m.clone(),
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Precondition(format!("semantic mask changed at sampling step {k}")));
            }
            _ => {}
        }
        let v = g.velocity(&tape, w.config.d_latent);
        let h = T::lit(dt);
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi = *xi + h * vi;
        }
    }
    Ok(Generation {
        scene: decode(&x, grid)?,
        latents: x,
        mask: first_mask,
    })
}
