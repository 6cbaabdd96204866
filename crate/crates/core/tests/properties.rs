mod common;

use std::collections::HashMap;

use common::{rng, uniform};
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use topoimb::autodiff::{Params, Tape};
use topoimb::eval::{auroc_macro, evaluate, macro_f1, topo_acc};
use topoimb::graph::{step_imbalance_split, stratified_split, Graph, SplitFractions};
use topoimb::models::{normalize_weights, WeightNet};
use topoimb::synth::gen_ba;
use topoimb::wl::wl_refine;

fn random_graph(n: usize, m: usize, seed: u64) -> Graph {
    let mut r = rng(seed);
    let edges = gen_ba(n, m, &mut r).unwrap();
    Graph::new(n, edges, uniform(&mut r, (n, 2), -1.0, 1.0), None, None).unwrap()
}

/// True when equal labels in `fine` imply equal labels in `coarse`.
fn refines(fine: &[usize], coarse: &[usize]) -> bool {
    let mut map = HashMap::new();
    fine.iter()
        .zip(coarse)
        .all(|(f, c)| *map.entry(*f).or_insert(*c) == *c)
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    refines(a, b) && refines(b, a)
}

fn graph_strategy() -> impl Strategy<Value = (Graph, Vec<usize>, u64)> {
    (4usize..30, 1usize..3, any::<u64>()).prop_flat_map(|(n, m, seed)| {
        let n = n.max(m + 1);
        (Just(random_graph(n, m, seed)), prop::collection::vec(0usize..3, n), Just(seed))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..8, cols in 1usize..8, scale in 0.1f64..500.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = uniform(&mut r, (rows, cols), -scale, scale);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.row_softmax(v);
        for row in tape.value(s).rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn normalized_weights_sum_to_batch_size(b in 1usize..300, seed in any::<u64>(), spread in 0.0f64..8.0) {
        let mut r = rng(seed);
        let raw = uniform(&mut r, (b, 1), -spread, spread).mapv(f64::exp);
        let mut tape = Tape::new();
        let v = tape.constant(raw);
        let w = normalize_weights(&mut tape, v).unwrap();
        let w = tape.value(w);
        prop_assert!((w.sum() - b as f64).abs() <= 1e-9);
        prop_assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn weight_net_output_sums_to_batch_size(b in 1usize..200, dim in 1usize..12, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut params = Params::new();
        let net = WeightNet::new(&mut params, dim, 8, &mut r);
        let mut tape = Tape::new();
        let h = tape.constant(uniform(&mut r, (b, dim), -3.0, 3.0));
        let w = net.forward(&mut tape, &params, h, false).unwrap();
        let w = tape.value(w);
        prop_assert!((w.sum() - b as f64).abs() <= 1e-9);
        prop_assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn wl_rounds_only_split_groups((g, init, _) in graph_strategy()) {
        let mut prev = wl_refine(&g, &init, 0).unwrap().labels;
        for t in 1..5 {
            let next = wl_refine(&g, &init, t).unwrap().labels;
            prop_assert!(refines(&next, &prev), "round {} merged groups", t);
            prev = next;
        }
    }

    #[test]
    fn wl_partition_is_isomorphism_invariant((g, init, seed) in graph_strategy()) {
        let n = g.num_nodes();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng(seed ^ 0x5eed));
        let h = g.permute(&perm).unwrap();
        let mut init_h = vec![0; n];
        for (old, &new) in perm.iter().enumerate() {
            init_h[new] = init[old];
        }
        let a = wl_refine(&g, &init, 2).unwrap().labels;
        let b = wl_refine(&h, &init_h, 2).unwrap().labels;
        let b_pulled: Vec<usize> = perm.iter().map(|&new| b[new]).collect();
        prop_assert!(same_partition(&a, &b_pulled));
    }

    #[test]
    fn wl_is_stable_past_its_fixed_point((g, init, _) in graph_strategy()) {
        let n = g.num_nodes();
        let settled = wl_refine(&g, &init, n).unwrap();
        let later = wl_refine(&g, &init, n + 3).unwrap();
        prop_assert!(same_partition(&settled.labels, &later.labels));
    }

    #[test]
    fn adjacency_is_symmetric((g, _, _) in graph_strategy()) {
        for &(u, v) in g.edges() {
            prop_assert!(g.neighbors(u).unwrap().contains(&v));
            prop_assert!(g.neighbors(v).unwrap().contains(&u));
        }
        let a = g.normalized_adjacency().to_dense();
        prop_assert!(a.iter().all(|&x| x >= 0.0));
        let asym = (&a - &a.t()).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
        prop_assert!(asym <= 1e-12);
    }

    #[test]
    fn splits_are_disjoint_and_reproducible(labels in prop::collection::vec(0usize..4, 40..200), seed in any::<u64>(), ratio in 0.05f64..1.0) {
        prop_assume!((0..4).all(|c| labels.contains(&c)));
        for split in [
            step_imbalance_split(&labels, ratio, SplitFractions::default(), seed).unwrap(),
            stratified_split(&labels, SplitFractions::default(), seed).unwrap(),
        ] {
            let mut all: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
            let len = all.len();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), len);
        }
        prop_assert_eq!(
            step_imbalance_split(&labels, ratio, SplitFractions::default(), seed).unwrap(),
            step_imbalance_split(&labels, ratio, SplitFractions::default(), seed).unwrap()
        );
    }

    #[test]
    fn metrics_ignore_instance_order(
        labels in prop::collection::vec(0usize..3, 6..60),
        seed in any::<u64>(),
    ) {
        prop_assume!((0..3).all(|c| labels.contains(&c)));
        let n = labels.len();
        let mut r = rng(seed);
        let scores = uniform(&mut r, (n, 3), 0.0, 1.0);
        let groups: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| 2 * y + i % 2).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let scores_p = Array2::from_shape_fn((n, 3), |(i, j)| scores[[order[i], j]]);
        let labels_p: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let groups_p: Vec<usize> = order.iter().map(|&i| groups[i]).collect();
        let a = evaluate(&scores, &labels, Some(&groups)).unwrap();
        let b = evaluate(&scores_p, &labels_p, Some(&groups_p)).unwrap();
        prop_assert!((a.macro_f - b.macro_f).abs() < 1e-12);
        prop_assert!((a.auroc - b.auroc).abs() < 1e-12);
        prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
        prop_assert!((a.topo_acc.unwrap() - b.topo_acc.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn macro_f_and_topo_acc_ignore_index_names(
        labels in prop::collection::vec(0usize..4, 4..60),
        preds_seed in any::<u64>(),
    ) {
        let mut r = rng(preds_seed);
        let preds: Vec<usize> = labels.iter().map(|_| rand::Rng::random_range(&mut r, 0..4)).collect();
        let groups: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| y * 3 + i % 3).collect();
        let mut sigma: Vec<usize> = (0..4).collect();
        sigma.shuffle(&mut r);
        let mut tau: Vec<usize> = (0..12).collect();
        tau.shuffle(&mut r);
        let relabel = |v: &[usize], p: &[usize]| v.iter().map(|&x| p[x]).collect::<Vec<_>>();
        let f = macro_f1(&preds, &labels).unwrap();
        let f2 = macro_f1(&relabel(&preds, &sigma), &relabel(&labels, &sigma)).unwrap();
        prop_assert!((f - f2).abs() < 1e-12);
        let t = topo_acc(&preds, &labels, &groups).unwrap();
        let t2 = topo_acc(&relabel(&preds, &sigma), &relabel(&labels, &sigma), &relabel(&groups, &tau)).unwrap();
        prop_assert!((t - t2).abs() < 1e-12);
    }

    #[test]
    fn auroc_ignores_monotone_transforms(
        labels in prop::collection::vec(0usize..3, 6..80),
        seed in any::<u64>(),
    ) {
        prop_assume!((0..3).all(|c| labels.contains(&c)));
        let mut r = rng(seed);
        // coarse scores so ties occur
        let scores = uniform(&mut r, (labels.len(), 3), 0.0, 1.0).mapv(|x| (x * 8.0).floor() / 8.0);
        let a = auroc_macro(&scores, &labels).unwrap();
        for transformed in [scores.mapv(|x| (3.0 * x).exp() - 7.0), scores.mapv(|x| x.powi(3) * 100.0)] {
            prop_assert!((a - auroc_macro(&transformed, &labels).unwrap()).abs() < 1e-12);
        }
    }
}
