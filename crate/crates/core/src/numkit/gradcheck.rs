//! Central finite-difference verification of tape gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// `(param index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let v = tape.scalar_value(out);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences with step [`FD_STEP`] at up to `max_coords` coordinates drawn
/// without replacement (all coordinates when fewer exist).
///
/// The error at one coordinate is `|a - n| / (|a| + |n| + 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], max_coords: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let v = tape.scalar_value(out);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    let grads = tape.backward(out)?;
    drop(tape);

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.len();
            Some(o)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        let mut v = sample(&mut rng, total, max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for flat in picks {
        let pi = offsets.partition_point(|&o| o <= flat) - 1;
        let ci = flat - offsets[pi];
        let analytic = grads.get_slice(ids[pi]).map_or(0.0, |g| g[ci]);

        let orig = probe[pi].data()[ci];
        probe[pi].data_mut()[ci] = orig + FD_STEP;
        let up = evaluate(&f, &probe)?;
        probe[pi].data_mut()[ci] = orig - FD_STEP;
        let down = evaluate(&f, &probe)?;
        probe[pi].data_mut()[ci] = orig;

        let numeric = (up - down) / (2.0 * FD_STEP);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + REL_FLOOR);
        report.coords_checked += 1;
        if rel > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel);
            report.worst = Some((pi, ci));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn squared_norm_is_exact() {
        let w = Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]);
        let r = grad_check(
            |t, p| {
                let sq = t.square(p[0]);
                Ok(t.sum(sq))
            },
            &[w],
            100,
            0,
        )
        .unwrap();
        assert_eq!(r.coords_checked, 4);
        assert!(r.max_rel_err < 1e-7, "{r:?}");
    }

    #[test]
    fn composed_ops_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = rand_tensor(&mut rng, &[4, 6]);
        let w = rand_tensor(&mut rng, &[6, 6]);
        let g = rand_tensor(&mut rng, &[6]);
        let b = rand_tensor(&mut rng, &[6]);
        let r = grad_check(
            |t, p| {
                let ln = t.layernorm(p[0], p[2], p[3])?;
                let h = t.matmul(ln, p[1])?;
                let h = t.silu(h);
                let ht = t.transpose(h)?;
                let s = t.matmul(h, ht)?;
                let s = t.scale(s, 0.5);
                let a = t.softmax_rows(s)?;
                let left = t.slice_cols(a, 0, 2)?;
                let right = t.slice_cols(a, 2, 2)?;
                let joined = t.concat_cols(&[right, left])?;
                let top = t.slice_rows(h, 0, 4)?;
                let sel = t.slice_cols(top, 1, 4)?;
                let prod = t.mul(joined, sel)?;
                let sq = t.square(prod);
                t.mean(sq)
            },
            &[x, w, g, b],
            1000,
            1,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let w = Tensor::vector(vec![1.0]);
        let r = grad_check(
            |t, p| {
                let s = t.scale(p[0], f64::INFINITY);
                Ok(t.sum(s))
            },
            &[w],
            1,
            0,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
