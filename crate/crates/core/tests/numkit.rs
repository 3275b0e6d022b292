//! Kernel properties and per-op gradient checks.

mod common;

use motbridge::numkit::{grad_check, l2_normalize, matmul, softmax_rows, transpose, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(x in matrix(4, 7), c in -50.0f64..50.0) {
        let p = softmax_rows(&x).unwrap();
        let q = softmax_rows(&x.map(|v| v + c)).unwrap();
        for r in 0..4 {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| v > 0.0));
        }
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn l2_normalize_gives_unit_norm(v in prop::collection::vec(-100.0f64..100.0, 1..40)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
        let n = l2_normalize(&Tensor::vector(v)).unwrap();
        let norm: f64 = n.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_transposes_and_associates(a in matrix(3, 4), b in matrix(4, 5), c in matrix(5, 2)) {
        let ab = matmul(&a, &b).unwrap();
        let abt = transpose(&ab).unwrap();
        let btat = matmul(&transpose(&b).unwrap(), &transpose(&a).unwrap()).unwrap();
        prop_assert!(abt.max_abs_diff(&btat) < 1e-9);
        let l = matmul(&ab, &c).unwrap();
        let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(l.max_abs_diff(&r) < 1e-9);
    }
}

#[test]
fn scale_by_entry_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = common::normal_matrix(&mut rng, 3, 5, 1.0);
    let c = Tensor::vector(vec![0.7, -1.3, 2.1]);
    let w = common::normal_matrix(&mut rng, 3, 5, 1.0);
    for index in 0..3 {
        let report = grad_check(
            |tape, ids| {
                let y = tape.scale_by_entry(ids[0], ids[1], index)?;
                let wc = tape.constant(w.clone());
                let y = tape.mul(y, wc)?;
                let y = tape.silu(y);
                Ok(tape.sum(y))
            },
            &[x.clone(), c.clone()],
            100,
            index as u64,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "index {index}: {report:?}");
    }
}

#[test]
fn scale_by_entry_rejects_out_of_range_index() {
    let mut tape = motbridge::numkit::Tape::<f64>::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let c = tape.param(Tensor::vector(vec![3.0]));
    assert!(tape.scale_by_entry(x, c, 1).is_err());
    let y = tape.scale_by_entry(x, c, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 6.0]);
}

#[test]
fn composite_attention_block_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = common::normal_matrix(&mut rng, 5, 4, 1.0);
    let wq = common::normal_matrix(&mut rng, 4, 4, 0.5);
    let gain = Tensor::vector(vec![1.0, 0.9, 1.1, 1.2]);
    let bias = Tensor::vector(vec![0.1, -0.1, 0.0, 0.2]);
    let report = grad_check(
        |tape, ids| {
            let h = tape.layernorm(ids[0], ids[2], ids[3])?;
            let q = tape.matmul(h, ids[1])?;
            let kt = tape.transpose(q)?;
            let logits = tape.matmul(q, kt)?;
            let p = tape.softmax_rows(logits)?;
            let o = tape.matmul(p, h)?;
            let o = tape.square(o);
            tape.mean(o)
        },
        &[x, wq, gain, bias],
        200,
        1,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}
