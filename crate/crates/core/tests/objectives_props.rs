//! Loss properties over random inputs.

mod common;

use proptest::prelude::*;
use protosent::autodiff::{Tape, Tensor};
use protosent::objectives::{div_loss, total_loss, LossBreakdown};

fn div_value(m: &Tensor) -> f64 {
    let mut t = Tape::new();
    let v = t.leaf(m.clone());
    let l = div_loss(&mut t, v).unwrap();
    t.value(l).item()
}

/// Gram-Schmidt on random vectors; rows come out orthonormal.
fn orthonormal_rows(k: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = common::rng(seed);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < k {
        let mut v = common::rand_tensor(1, d, &mut rng).row(0).to_vec();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            rows.push(v.iter().map(|x| x / n).collect());
        }
    }
    Tensor::from_rows(&rows).unwrap()
}

proptest! {
    #[test]
    fn div_loss_ignores_row_scaling(
        (k, d, seed) in (2usize..6, 6usize..10, any::<u64>()),
        scales in prop::collection::vec(0.01f64..100.0, 6),
    ) {
        let m = common::rand_tensor(k, d, &mut common::rng(seed));
        let mut scaled = m.clone();
        for r in 0..k {
            for c in 0..d {
                scaled.set(r, c, m.get(r, c) * scales[r]);
            }
        }
        prop_assert!((div_value(&m) - div_value(&scaled)).abs() < 1e-6);
        prop_assert!(div_value(&m) >= 0.0);
    }

    #[test]
    fn div_loss_vanishes_on_orthogonal_bases((k, d, seed) in (1usize..6, 6usize..10, any::<u64>()), scale in 0.1f64..10.0) {
        let q = orthonormal_rows(k, d, seed).map(|x| x * scale);
        prop_assert!(div_value(&q) < 1e-12);
    }

    #[test]
    fn total_is_linear_combination(
        r in 0.0f64..10.0, a in 0.0f64..10.0, d in 0.0f64..10.0,
        la in 0.0f64..2.0, ld in 0.0f64..2.0,
    ) {
        let mut t = Tape::new();
        let (vr, va, vd) = (t.leaf(Tensor::scalar(r)), t.leaf(Tensor::scalar(a)), t.leaf(Tensor::scalar(d)));
        let (total, parts) = total_loss(&mut t, vr, va, vd, la, ld).unwrap();
        prop_assert!((t.value(total).item() - (r + la * a + ld * d)).abs() < 1e-9);
        prop_assert!((parts.total - LossBreakdown::combine(r, a, d, la, ld).total).abs() < 1e-9);
    }
}

#[test]
fn identical_rows_give_k_squared_minus_k() {
    for k in 1..8 {
        let m = Tensor::from_rows(&vec![vec![3.0, -4.0, 0.0]; k]).unwrap();
        assert!((div_value(&m) - (k * k - k) as f64).abs() < 1e-9);
    }
}

#[test]
fn div_gradient_matches_finite_differences() {
    let m = common::rand_tensor(3, 5, &mut common::rng(2));
    let r = protosent::gradcheck::check_fn("div_loss", &[m], &mut common::rng(3), |t, v| div_loss(t, v[0])).unwrap();
    assert!(r.passed(), "rel err {:e}", r.max_rel_err);
}
