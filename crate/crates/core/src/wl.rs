//! Pseudo topology labels: attribute clustering refined by 1-WL color refinement.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphSet};

/// Default number of attribute clusters seeding the refinement.
pub const DEFAULT_CLUSTERS: usize = 8;
/// Refinement rounds, matching the receptive field of a two-layer GNN.
pub const DEFAULT_ROUNDS: usize = 2;

const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub num_groups: usize,
}

impl PseudoLabels {
    /// Relabels to dense ids in increasing order of the original values.
    pub fn compact(raw: &[usize]) -> Self {
        let mut values: Vec<usize> = raw.to_vec();
        values.sort_unstable();
        values.dedup();
        let labels = raw
            .iter()
            .map(|v| values.binary_search(v).expect("present"))
            .collect();
        Self {
            labels,
            num_groups: values.len().max(1),
        }
    }

    /// Folds every group with fewer than `min_size` members into one shared
    /// group, then recompacts. `min_size <= 1` is the identity.
    pub fn merge_rare(&self, min_size: usize) -> Self {
        let sizes = self.group_sizes();
        if sizes.iter().all(|&s| s >= min_size) {
            return self.clone();
        }
        let rare = self.num_groups;
        let raw: Vec<usize> = self
            .labels
            .iter()
            .map(|&l| if sizes[l] < min_size { rare } else { l })
            .collect();
        Self::compact(&raw)
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_groups];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means with k-means++ seeding; returns one cluster id per row.
pub fn attr_cluster(features: &Array2<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = features.nrows();
    if k == 0 {
        return Err(Error::config("cluster count must be at least 1"));
    }
    if k > n {
        return Err(Error::config(format!("{k} clusters requested for {n} rows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = features.ncols();

    let mut centers = Array2::<f64>::zeros((k, dim));
    centers.row_mut(0).assign(&features.row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(features.row(i), centers.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&features.row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(features.row(i), centers.row(c)));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let row = features.row(i);
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(row, centers.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            if *a != best.0 {
                *a = best.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            let mut s = sums.row_mut(a);
            s += &features.row(i);
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centers.row_mut(c).assign(&mean);
            }
        }
    }
    Ok(assign)
}

/// One round of color refinement: the new color of `v` is determined by its
/// current color and the sorted multiset of neighbor colors.
///
/// New ids follow the sorted order of these signatures, so the coloring does
/// not depend on node numbering.
fn refine_once(g: &Graph, colors: &[usize]) -> Vec<usize> {
    let signatures: Vec<Vec<usize>> = (0..g.num_nodes())
        .map(|v| {
            let mut sig = Vec::with_capacity(g.degree(v) + 1);
            sig.push(colors[v]);
            let mut nbrs: Vec<usize> = g.neighbors_unchecked(v).iter().map(|&u| colors[u]).collect();
            nbrs.sort_unstable();
            sig.extend(nbrs);
            sig
        })
        .collect();
    let mut dictionary: BTreeMap<&[usize], usize> = BTreeMap::new();
    for sig in &signatures {
        dictionary.insert(sig.as_slice(), 0);
    }
    for (id, slot) in dictionary.values_mut().enumerate() {
        *slot = id;
    }
    signatures.iter().map(|s| dictionary[s.as_slice()]).collect()
}

pub fn wl_refine(g: &Graph, init: &[usize], rounds: usize) -> Result<PseudoLabels> {
    if init.len() != g.num_nodes() {
        return Err(Error::contract(format!(
            "{} initial labels for {} nodes",
            init.len(),
            g.num_nodes()
        )));
    }
    let mut colors = PseudoLabels::compact(init).labels;
    for _ in 0..rounds {
        colors = refine_once(g, &colors);
    }
    Ok(PseudoLabels::compact(&colors))
}

/// Attribute clusters refined by two WL rounds.
pub fn pseudo_topo_labels(g: &Graph, k: usize, seed: u64) -> Result<PseudoLabels> {
    let init = attr_cluster(g.features(), k, seed)?;
    wl_refine(g, &init, DEFAULT_ROUNDS)
}

/// Graph-level pseudo labels are the graph class labels.
pub fn graph_pseudo_labels(set: &GraphSet) -> PseudoLabels {
    PseudoLabels::compact(set.class_labels())
}
