//! Relevance and thresholding against loop oracles, plus invariants.

mod common;

use motbridge::bridge::{apply_mask_bias, build_mask, normalize_hidden, relevance_scores, similarity_matrix};
use motbridge::numkit::{softmax_rows, Tensor};
use proptest::prelude::*;

#[test]
fn matches_loop_oracles_on_random_pairs() {
    common::bridge_exactness(1000).assert();
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-10.0f64..10.0, rows * cols)
        .prop_filter("nonzero rows", move |v| v.chunks(cols).all(|r| r.iter().any(|x| x.abs() > 1e-3)))
        .prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
}

fn relevance(hv: &Tensor<f64>, ht: &Tensor<f64>) -> Vec<f64> {
    let s = similarity_matrix(&normalize_hidden(hv).unwrap(), &normalize_hidden(ht).unwrap()).unwrap();
    relevance_scores(&s).unwrap().data().to_vec()
}

proptest! {
    #[test]
    fn relevance_is_bounded_and_scale_invariant(
        hv in matrix(6, 5),
        ht in matrix(3, 5),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        let s = relevance(&hv, &ht);
        prop_assert!(s.iter().all(|x| x.abs() <= 1.0 + 1e-12));
        let s2 = relevance(&hv.map(|x| x * a), &ht.map(|x| x * b));
        for (x, y) in s.iter().zip(&s2) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn visible_set_shrinks_as_tau_grows(
        s in prop::collection::vec(-1.0f64..1.0, 1..50),
        t1 in -0.99f64..0.99,
        t2 in -0.99f64..0.99,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (a, b) = (build_mask(&s, lo), build_mask(&s, hi));
        prop_assert!(a.visible_count() >= 1 && b.visible_count() >= 1);
        if !a.fallback_applied && !b.fallback_applied {
            for (x, y) in a.visible.iter().zip(&b.visible) {
                prop_assert!(*x || !*y);
            }
        }
    }

    #[test]
    fn bias_is_zero_or_negative_infinity(s in prop::collection::vec(-1.0f64..1.0, 1..30), tau in -0.99f64..0.99) {
        let m = build_mask(&s, tau);
        for (b, v) in m.bias::<f64>().iter().zip(&m.visible) {
            let expected = if *v { 0.0 } else { f64::NEG_INFINITY };
            prop_assert_eq!(*b, expected);
        }
        let a = Tensor::new(vec![2, s.len()], s.iter().chain(&s).copied().collect()).unwrap();
        let p = softmax_rows(&apply_mask_bias(&a, &m).unwrap()).unwrap();
        for r in 0..2 {
            for (j, v) in m.visible.iter().enumerate() {
                if !v {
                    prop_assert_eq!(p.get2(r, j), 0.0);
                }
            }
        }
    }
}
