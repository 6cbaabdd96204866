mod common;

use std::sync::Arc;

use common::*;
use proptest::prelude::*;
use topoimb::autodiff::{Optimizer, Params, Tape};
use topoimb::models::{Backbone, Gnn, Propagation};
use topoimb::training::{loss_ce, loss_re};

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    for mut case in primitive_cases() {
        let err = max_relative_error(&mut case);
        if !(err <= FD_TOLERANCE) {
            failures.push(format!("{}: {err:.3e}", case.name));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn composite_networks_match_finite_differences() {
    for seed in 0..3 {
        for mut case in composite_cases(seed) {
            let err = max_relative_error(&mut case);
            assert!(err <= FD_TOLERANCE, "seed {seed}, {}: {err:.3e}", case.name);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn random_composites_match_finite_differences(seed in 100u64..10_000) {
        for mut case in composite_cases(seed) {
            let err = max_relative_error(&mut case);
            prop_assert!(err <= FD_TOLERANCE, "{}: {:.3e}", case.name, err);
        }
    }
}

/// With the weights held fixed, the gradient of the blended objective is the
/// same blend of the two gradients.
#[test]
fn blended_objective_gradient_is_linear() {
    let g = small_graph(10, 3);
    let prop = Propagation::for_graph(&g);
    let labels = Arc::new((0..10).map(|i| i % 2).collect::<Vec<_>>());
    let w = ndarray::Array2::from_shape_fn((10, 1), |(i, _)| 0.5 + 0.1 * i as f64);
    let w = &w * (10.0 / w.sum());
    let mut params = Params::new();
    let gnn = Gnn::new(&mut params, Backbone::Gcn, 3, 5, 2, false, &mut rng(0));
    let alpha = 0.3;

    let grads = |params: &mut Params, mode: u8| {
        params.zero_grads();
        let mut tape = Tape::new();
        let x = tape.constant(g.features().clone());
        let probs = gnn.forward(&mut tape, params, &prop, x, true).unwrap();
        let ce = loss_ce(&mut tape, probs, labels.clone()).unwrap();
        let wv = tape.constant(w.clone());
        let re = loss_re(&mut tape, probs, labels.clone(), wv).unwrap();
        let loss = match mode {
            0 => ce,
            1 => re,
            _ => {
                let a = tape.scale(ce, 1.0 - alpha);
                let b = tape.scale(re, alpha);
                tape.add(a, b).unwrap()
            }
        };
        tape.backward(loss, params).unwrap();
        params.ids().map(|id| params.grad(id).clone()).collect::<Vec<_>>()
    };
    let ce = grads(&mut params, 0);
    let re = grads(&mut params, 1);
    let blend = grads(&mut params, 2);
    for ((c, r), b) in ce.iter().zip(&re).zip(&blend) {
        let expected = c * (1.0 - alpha) + r * alpha;
        let diff = (&expected - b).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
        assert!(diff < 1e-12, "{diff}");
    }
}

#[test]
fn same_seed_and_ops_give_identical_parameters() {
    let run = || {
        let g = small_graph(12, 5);
        let prop = Propagation::for_graph(&g);
        let labels = Arc::new((0..12).map(|i| i % 3).collect::<Vec<_>>());
        let mut params = Params::new();
        let gnn = Gnn::new(&mut params, Backbone::Sage, 3, 6, 3, false, &mut rng(9));
        let mut opt = Optimizer::adam(gnn.ids(), &params, 0.01).with_weight_decay(1e-3);
        let mut tape = Tape::new();
        let mut lengths = Vec::new();
        for _ in 0..25 {
            tape.clear();
            let x = tape.constant(g.features().clone());
            let probs = gnn.forward(&mut tape, &params, &prop, x, true).unwrap();
            let loss = loss_ce(&mut tape, probs, labels.clone()).unwrap();
            tape.backward(loss, &mut params).unwrap();
            opt.step(&mut params).unwrap();
            lengths.push(tape.len());
        }
        let bits: Vec<u64> = params
            .ids()
            .flat_map(|id| params.value(id).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        (bits, lengths)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    // the tape holds exactly one forward pass per iteration
    assert!(la.iter().all(|&l| l == la[0]));
    assert_eq!(la, lb);
}

#[test]
fn cleared_tape_is_empty() {
    let mut tape = Tape::new();
    let a = tape.constant(ndarray::Array2::ones((2, 2)));
    let b = tape.relu(a);
    tape.sum(b);
    assert!(!tape.is_empty());
    tape.clear();
    assert_eq!(tape.len(), 0);
}

