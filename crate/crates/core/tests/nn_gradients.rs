//! Backpropagation against central finite differences, plus structural
//! properties of the network engine.

use std::time::Instant;

use fedconn::nn::{cross_entropy, cross_entropy_logit_grad, init_model, Arch, BackwardFrom, Mlp, ReluRule};
use fedconn::rng;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

const STEP: f64 = 1e-5;
const MAX_REL_ERR: f64 = 1e-4;
/// Denominator floor so exactly-zero gradients (bias before BatchNorm)
/// are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

fn batch(n: usize, dim: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut r = rng::stream(seed, "gradcheck/batch");
    let x = Array2::from_shape_fn((n, dim), |_| r.random_range(-2.0..2.0));
    let y = (0..n).map(|i| i % 2).collect();
    (x, y)
}

fn train_loss(model: &Mlp, x: &Array2<f64>, y: &[usize]) -> f64 {
    let mut m = model.clone();
    let mut r = rng::stream(0, "gradcheck/dropout");
    let (p, _) = m.forward_train(x, &mut r).unwrap();
    cross_entropy(&p, y).unwrap()
}

fn max_relative_error(model: &Mlp, x: &Array2<f64>, y: &[usize]) -> f64 {
    let mut m = model.clone();
    let mut r = rng::stream(0, "gradcheck/dropout");
    let (p, cache) = m.forward_train(x, &mut r).unwrap();
    let g = cross_entropy_logit_grad(&p, y).unwrap();
    let back = model.backward(&cache, &g, BackwardFrom::Logits, ReluRule::Exact).unwrap();
    let mut worst: f64 = 0.0;
    for (t, analytic) in back.grads.tensors.iter().enumerate() {
        for (k, &a) in analytic.iter().enumerate() {
            let nudged = |by: f64| {
                let mut m = model.clone();
                m.params_mut()[t][k] += by;
                train_loss(&m, x, y)
            };
            let numeric = (nudged(STEP) - nudged(-STEP)) / (2.0 * STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn twenty_five_two_with_batchnorm_matches_finite_differences() {
    let start = Instant::now();
    let model = init_model(&Arch::parse("mlp:20-5-2").unwrap(), 3).unwrap();
    assert!(model.layers().iter().any(|l| l.kind() == "bn"));
    let (x, y) = batch(12, 20, 1);
    let err = max_relative_error(&model, &x, &y);
    assert!(err < MAX_REL_ERR, "max relative error {err:e}");
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn trained_state_also_matches_finite_differences() {
    let mut model = init_model(&Arch::parse("mlp:20-5-2").unwrap(), 9).unwrap();
    let mut r = rng::stream(4, "gradcheck/params");
    for p in model.params_mut() {
        for v in p.iter_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let (x, y) = batch(7, 20, 2);
    assert!(max_relative_error(&model, &x, &y) < MAX_REL_ERR);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn eval_rows_are_probability_distributions(seed in 0u64..1000, rows in 1usize..16) {
        let model = init_model(&Arch::parse("mlp:12-6-3").unwrap(), seed).unwrap();
        let (x, _) = batch(rows, 12, seed);
        let p = model.forward_eval(&x).unwrap();
        for row in p.rows() {
            let s: f64 = row.sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn eval_is_row_independent(seed in 0u64..1000, rows in 2usize..10) {
        let model = init_model(&Arch::parse("fed-mlp:15").unwrap(), seed).unwrap();
        let (x, _) = batch(rows, 15, seed + 1);
        let all = model.forward_eval(&x).unwrap();
        let last = model.forward_eval(&x.slice(ndarray::s![rows - 1.., ..]).to_owned()).unwrap();
        for (a, b) in all.row(rows - 1).iter().zip(last.row(0)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_a_function_of_the_seed(seed in 0u64..1000) {
        let arch = Arch::parse("single-mlp:10").unwrap();
        prop_assert_eq!(init_model(&arch, seed).unwrap(), init_model(&arch, seed).unwrap());
    }
}
