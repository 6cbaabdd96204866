//! Synthetic benchmarks with known class and topology-group labels.
//!
//! `ImbNode` attaches house and 5-cycle motifs to a Barabási–Albert base
//! graph; every node's topology group is its color under anchored WL
//! refinement of its motif. `ImbGraph` is a graph-classification set where
//! each class is made of two motif kinds with a skewed mix.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphSet};
use crate::wl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MotifKind {
    House,
    Cycle5,
    Grid,
    Ladder,
    Wheel,
    Tree,
}

impl MotifKind {
    pub const ALL: [MotifKind; 6] = [
        MotifKind::Grid,
        MotifKind::Ladder,
        MotifKind::Cycle5,
        MotifKind::Wheel,
        MotifKind::Tree,
        MotifKind::House,
    ];

    /// Node that carries the bridge to the base graph.
    pub fn anchor(self) -> usize {
        0
    }
}

/// Preferential attachment: an `m`-clique grown one node at a time, each new
/// node linking to `m` distinct existing nodes chosen proportionally to degree.
pub fn gen_ba(n: usize, m: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    if m == 0 || n <= m {
        return Err(Error::config(format!("BA graph needs n > m >= 1, got n={n} m={m}")));
    }
    let mut edges = Vec::with_capacity(m * (m - 1) / 2 + m * (n - m));
    // each node appears once per incident edge end
    let mut ends: Vec<usize> = Vec::with_capacity(2 * edges.capacity());
    for i in 0..m {
        for j in i + 1..m {
            edges.push((i, j));
            ends.extend([i, j]);
        }
    }
    let mut targets = Vec::with_capacity(m);
    for v in m..n {
        targets.clear();
        while targets.len() < m {
            let t = if ends.is_empty() {
                rng.random_range(0..v)
            } else {
                ends[rng.random_range(0..ends.len())]
            };
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for &t in &targets {
            edges.push((t, v));
            ends.extend([t, v]);
        }
    }
    Ok(edges)
}

/// Canonical edge list of a motif.
///
/// `size` is the node count for `House`, `Cycle5`, `Wheel` and `Tree`, and the
/// side length for `Grid` (`k×k`) and `Ladder` (`2×k`). The house is the
/// square `b1-b2-m2-m1` (nodes 0, 1, 2, 3) with roof 4 on `m1` and `m2`.
pub fn motif_edges(kind: MotifKind, size: usize) -> Result<(usize, Vec<(usize, usize)>)> {
    let bad = || Error::config(format!("invalid size {size} for {kind:?}"));
    Ok(match kind {
        MotifKind::House => {
            if size != 5 {
                return Err(bad());
            }
            (5, vec![(0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (3, 4)])
        }
        MotifKind::Cycle5 => {
            if size != 5 {
                return Err(bad());
            }
            (5, (0..5).map(|i| (i, (i + 1) % 5)).collect())
        }
        MotifKind::Grid => {
            if size < 2 {
                return Err(bad());
            }
            (size * size, lattice(size, size))
        }
        MotifKind::Ladder => {
            if size < 2 {
                return Err(bad());
            }
            (2 * size, lattice(2, size))
        }
        MotifKind::Wheel => {
            if size < 4 {
                return Err(bad());
            }
            let ring = size - 1;
            let mut edges: Vec<_> = (0..ring).map(|i| (i, (i + 1) % ring)).collect();
            edges.extend((0..ring).map(|i| (i, ring)));
            (size, edges)
        }
        MotifKind::Tree => {
            if size < 2 {
                return Err(bad());
            }
            (size, (1..size).map(|i| ((i - 1) / 2, i)).collect())
        }
    })
}

fn lattice(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let id = |r: usize, c: usize| r * cols + c;
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push((id(r, c), id(r, c + 1)));
            }
            if r + 1 < rows {
                edges.push((id(r, c), id(r + 1, c)));
            }
        }
    }
    edges
}

/// A motif graph with zero features; its topology labels are the anchored
/// two-round WL colors of its nodes.
pub fn gen_motif(kind: MotifKind, size: usize) -> Result<Graph> {
    let (n, edges) = motif_edges(kind, size)?;
    let plain = Graph::new(n, edges, Array2::zeros((n, 1)), None, None)?;
    let mut init = vec![0; n];
    init[kind.anchor()] = 1;
    let roles = wl::wl_refine(&plain, &init, wl::DEFAULT_ROUNDS)?;
    plain.with_labels(None, Some(roles.labels))
}

/// Disjoint union of `base` and `motif` plus one bridge from the motif
/// anchor to a uniformly chosen base node. Motif nodes are offset by the
/// base node count. Labels survive only when both sides carry them.
pub fn attach(base: &Graph, motif: &Graph, anchor: usize, rng: &mut impl Rng) -> Result<Graph> {
    if base.num_nodes() == 0 {
        return Err(Error::config("cannot attach to an empty base graph"));
    }
    if anchor >= motif.num_nodes() {
        return Err(Error::Index {
            index: anchor,
            len: motif.num_nodes(),
        });
    }
    if base.feature_dim() != motif.feature_dim() {
        return Err(Error::data("feature dimensions differ"));
    }
    let offset = base.num_nodes();
    let mut edges = base.edges().to_vec();
    edges.extend(motif.edges().iter().map(|&(u, v)| (u + offset, v + offset)));
    edges.push((rng.random_range(0..offset), anchor + offset));
    let features = ndarray::concatenate(
        ndarray::Axis(0),
        &[base.features().view(), motif.features().view()],
    )
    .expect("equal widths");
    let join = |a: Option<&[usize]>, b: Option<&[usize]>| match (a, b) {
        (Some(a), Some(b)) => Some([a, b].concat()),
        _ => None,
    };
    Graph::new(
        offset + motif.num_nodes(),
        edges,
        features,
        join(base.class_labels(), motif.class_labels()),
        join(base.topo_labels(), motif.topo_labels()),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImbNodeConfig {
    pub n_houses: usize,
    pub n_cycles: usize,
    pub base_nodes: usize,
    pub ba_m: usize,
    pub feat_dim: usize,
    /// Multiplier on the class-mean vectors.
    pub feature_scale: f64,
    /// Standard deviation of the per-node feature noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ImbNodeConfig {
    fn default() -> Self {
        Self {
            n_houses: 166,
            n_cycles: 33,
            base_nodes: 597,
            ba_m: 3,
            feat_dim: 10,
            feature_scale: 1.25,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

/// Generated node-classification benchmark.
#[derive(Debug, Clone)]
pub struct ImbNode {
    pub graph: Graph,
    pub num_classes: usize,
    /// Topology groups coming from houses.
    pub majority_groups: Vec<usize>,
    /// Topology groups coming from cycles.
    pub minority_groups: Vec<usize>,
}

const HOUSE_ROLE_ORDER: [usize; 5] = [4, 3, 2, 0, 1];
const HOUSE_CLASSES: [usize; 5] = [3, 3, 2, 2, 1];
const CYCLE_ROLE_ORDER: [usize; 5] = [0, 1, 4, 2, 3];
const CYCLE_CLASSES: [usize; 5] = [1, 2, 3, 3, 2];

/// Maps motif-local WL colors to global group ids, numbering new colors in
/// `role_order` starting at `next`.
fn assign_groups(motif: &Graph, role_order: &[usize], next: &mut usize) -> Vec<usize> {
    let colors = motif.topo_labels().expect("motif roles");
    let mut global = vec![usize::MAX; colors.iter().max().map_or(0, |m| m + 1)];
    for &v in role_order {
        if global[colors[v]] == usize::MAX {
            global[colors[v]] = *next;
            *next += 1;
        }
    }
    colors.iter().map(|&c| global[c]).collect()
}

fn class_means(rng: &mut impl Rng, classes: usize, dim: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((classes, dim), |_| {
        scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    })
}

pub fn build_imbnode(cfg: &ImbNodeConfig) -> Result<ImbNode> {
    if cfg.n_houses == 0 || cfg.n_cycles == 0 {
        return Err(Error::config(
            "ImbNode needs at least one house and one cycle to form all motif groups",
        ));
    }
    if cfg.feat_dim == 0 {
        return Err(Error::config("feature dimension must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base_edges = gen_ba(cfg.base_nodes, cfg.ba_m, &mut rng)?;

    let house = gen_motif(MotifKind::House, 5)?;
    let cycle = gen_motif(MotifKind::Cycle5, 5)?;
    let mut next = 1;
    let house_groups = assign_groups(&house, &HOUSE_ROLE_ORDER, &mut next);
    let first_cycle_group = next;
    let cycle_groups = assign_groups(&cycle, &CYCLE_ROLE_ORDER, &mut next);
    let num_groups = next;

    let n = cfg.base_nodes + 5 * (cfg.n_houses + cfg.n_cycles);
    let mut edges = base_edges;
    let mut classes = vec![0usize; cfg.base_nodes];
    let mut groups = vec![0usize; cfg.base_nodes];
    let motifs = std::iter::repeat_n((&house, &house_groups, &HOUSE_CLASSES), cfg.n_houses)
        .chain(std::iter::repeat_n((&cycle, &cycle_groups, &CYCLE_CLASSES), cfg.n_cycles));
    for (motif, motif_groups, motif_classes) in motifs {
        let offset = classes.len();
        edges.extend(motif.edges().iter().map(|&(u, v)| (u + offset, v + offset)));
        edges.push((rng.random_range(0..cfg.base_nodes), offset + MotifKind::House.anchor()));
        classes.extend_from_slice(motif_classes);
        groups.extend_from_slice(motif_groups);
    }
    debug_assert_eq!(classes.len(), n);

    let num_classes = 4;
    let means = class_means(&mut rng, num_classes, cfg.feat_dim, cfg.feature_scale);
    let mut features = Array2::<f64>::zeros((n, cfg.feat_dim));
    for (i, mut row) in features.rows_mut().into_iter().enumerate() {
        let noise: Array1<f64> =
            Array1::from_shape_fn(cfg.feat_dim, |_| cfg.noise_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        row.assign(&(&means.row(classes[i]) + &noise));
    }

    let graph = Graph::new(n, edges, features, Some(classes), Some(groups))?;
    Ok(ImbNode {
        graph,
        num_classes,
        majority_groups: (1..first_cycle_group).collect(),
        minority_groups: (first_cycle_group..num_groups).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImbGraphConfig {
    pub class_sizes: Vec<usize>,
    /// Count of the second motif kind relative to the first within a class.
    pub within_class_minority_ratio: f64,
    pub base_size_range: (usize, usize),
    pub ba_m: usize,
    pub feat_dim: usize,
    pub features: GraphFeatures,
    /// Standard deviation of the noise added to every feature entry.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for ImbGraphConfig {
    fn default() -> Self {
        Self {
            class_sizes: vec![500, 300, 130],
            within_class_minority_ratio: 0.2,
            base_size_range: (10, 25),
            ba_m: 3,
            feat_dim: 10,
            features: GraphFeatures::Degree,
            feature_noise: 0.5,
            seed: 0,
        }
    }
}

/// Node features of ImbGraph instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFeatures {
    /// All ones.
    Constant,
    /// One-hot degree, capped at the last dimension.
    Degree,
}

/// Per class: (majority kind, minority kind).
pub const IMBGRAPH_CLASSES: [(MotifKind, MotifKind); 3] = [
    (MotifKind::Grid, MotifKind::Ladder),
    (MotifKind::Cycle5, MotifKind::Wheel),
    (MotifKind::Tree, MotifKind::House),
];

pub fn imbgraph_motif_size(kind: MotifKind) -> usize {
    match kind {
        MotifKind::Grid => 3,
        MotifKind::Ladder => 4,
        MotifKind::Cycle5 | MotifKind::House => 5,
        MotifKind::Wheel => 6,
        MotifKind::Tree => 7,
    }
}

/// Topology group of an ImbGraph instance: the position of its motif kind
/// in [`MotifKind::ALL`].
pub fn motif_group(kind: MotifKind) -> usize {
    MotifKind::ALL.iter().position(|&k| k == kind).expect("listed")
}

/// Splits a class of `size` into (majority, minority) motif counts.
pub fn within_class_counts(size: usize, ratio: f64) -> (usize, usize) {
    let major = (size as f64 / (1.0 + ratio)).round() as usize;
    (major, size - major)
}

pub fn build_imbgraph(cfg: &ImbGraphConfig) -> Result<GraphSet> {
    let r = cfg.within_class_minority_ratio;
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::config(format!("within-class ratio {r} not in (0, 1]")));
    }
    if cfg.class_sizes.is_empty() || cfg.class_sizes.len() > IMBGRAPH_CLASSES.len() {
        return Err(Error::config("ImbGraph supports one to three classes"));
    }
    if cfg.class_sizes.contains(&0) {
        return Err(Error::config("class sizes must be positive"));
    }
    let (lo, hi) = cfg.base_size_range;
    if lo > hi || lo <= cfg.ba_m {
        return Err(Error::config(format!(
            "base size range {lo}..={hi} must exceed ba_m={}",
            cfg.ba_m
        )));
    }
    if cfg.feat_dim == 0 {
        return Err(Error::config("feature dimension must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut graphs = Vec::new();
    let mut classes = Vec::new();
    let mut groups = Vec::new();
    for (c, (&size, &(major, minor))) in cfg.class_sizes.iter().zip(&IMBGRAPH_CLASSES).enumerate() {
        let (n_major, n_minor) = within_class_counts(size, r);
        let kinds = std::iter::repeat_n(major, n_major).chain(std::iter::repeat_n(minor, n_minor));
        for kind in kinds {
            let n_base = rng.random_range(lo..=hi);
            let base_edges = gen_ba(n_base, cfg.ba_m, &mut rng)?;
            let (n_motif, motif) = motif_edges(kind, imbgraph_motif_size(kind))?;
            let mut edges = base_edges;
            edges.extend(motif.iter().map(|&(u, v)| (u + n_base, v + n_base)));
            edges.push((rng.random_range(0..n_base), n_base + kind.anchor()));
            let n = n_base + n_motif;
            let mut degree = vec![0usize; n];
            for &(u, v) in &edges {
                degree[u] += 1;
                degree[v] += 1;
            }
            let features = Array2::from_shape_fn((n, cfg.feat_dim), |(i, j)| {
                let base = match cfg.features {
                    GraphFeatures::Constant => 1.0,
                    GraphFeatures::Degree => f64::from(u8::from(degree[i].min(cfg.feat_dim - 1) == j)),
                };
                base + cfg.feature_noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            });
            graphs.push(Graph::new(n, edges, features, None, None)?);
            classes.push(c);
            groups.push(motif_group(kind));
        }
    }
    GraphSet::new(graphs, classes, Some(groups))
}
