//! Undirected graphs, graph collections and train/val/test splits.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An immutable undirected graph with node features and optional labels.
///
/// Self-loops are never stored; propagation operators add them where needed.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Array2<f64>,
    class_labels: Option<Vec<usize>>,
    topo_labels: Option<Vec<usize>>,
    offsets: Vec<usize>,
    adjacency: Vec<usize>,
}

impl Graph {
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        features: Array2<f64>,
        class_labels: Option<Vec<usize>>,
        topo_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if features.nrows() != num_nodes {
            return Err(Error::data(format!(
                "feature matrix has {} rows for {} nodes",
                features.nrows(),
                num_nodes
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("features contain non-finite values"));
        }
        for (name, labels) in [("class", &class_labels), ("topo", &topo_labels)] {
            if let Some(l) = labels {
                if l.len() != num_nodes {
                    return Err(Error::data(format!(
                        "{name} labels have length {} for {num_nodes} nodes",
                        l.len()
                    )));
                }
            }
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let mut degree = vec![0usize; num_nodes];
        for &(u, v) in &edges {
            for x in [u, v] {
                if x >= num_nodes {
                    return Err(Error::Index {
                        index: x,
                        len: num_nodes,
                    });
                }
            }
            if u == v {
                return Err(Error::data(format!("self-loop at node {u}")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(Error::data(format!("duplicate edge ({u}, {v})")));
            }
            degree[u] += 1;
            degree[v] += 1;
        }

        let mut offsets = Vec::with_capacity(num_nodes + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut fill = offsets[..num_nodes].to_vec();
        let mut adjacency = vec![0usize; offsets[num_nodes]];
        for &(u, v) in &edges {
            adjacency[fill[u]] = v;
            fill[u] += 1;
            adjacency[fill[v]] = u;
            fill[v] += 1;
        }
        for i in 0..num_nodes {
            adjacency[offsets[i]..offsets[i + 1]].sort_unstable();
        }

        Ok(Self {
            num_nodes,
            edges,
            features,
            class_labels,
            topo_labels,
            offsets,
            adjacency,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_labels(&self) -> Option<&[usize]> {
        self.class_labels.as_deref()
    }

    pub fn topo_labels(&self) -> Option<&[usize]> {
        self.topo_labels.as_deref()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Sorted, duplicate-free neighbors of `v`.
    pub fn neighbors(&self, v: usize) -> Result<&[usize]> {
        if v >= self.num_nodes {
            return Err(Error::Index {
                index: v,
                len: self.num_nodes,
            });
        }
        Ok(&self.adjacency[self.offsets[v]..self.offsets[v + 1]])
    }

    pub(crate) fn neighbors_unchecked(&self, v: usize) -> &[usize] {
        &self.adjacency[self.offsets[v]..self.offsets[v + 1]]
    }

    /// Breadth-first connectivity check. The empty graph counts as connected.
    pub fn is_connected(&self) -> bool {
        if self.num_nodes == 0 {
            return true;
        }
        let mut seen = vec![false; self.num_nodes];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &u in self.neighbors_unchecked(v) {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
        count == self.num_nodes
    }

    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        Graph::new(
            self.num_nodes,
            self.edges.clone(),
            features,
            self.class_labels.clone(),
            self.topo_labels.clone(),
        )
    }

    pub fn with_labels(
        &self,
        class_labels: Option<Vec<usize>>,
        topo_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        Graph::new(
            self.num_nodes,
            self.edges.clone(),
            self.features.clone(),
            class_labels,
            topo_labels,
        )
    }

    /// Renumbers nodes so that old node `i` becomes `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes;
        if perm.len() != n {
            return Err(Error::contract("permutation length differs from node count"));
        }
        let mut inverse = vec![usize::MAX; n];
        for (old, &new) in perm.iter().enumerate() {
            if new >= n || inverse[new] != usize::MAX {
                return Err(Error::contract("not a permutation"));
            }
            inverse[new] = old;
        }
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let features = Array2::from_shape_fn((n, self.feature_dim()), |(i, j)| {
            self.features[(inverse[i], j)]
        });
        let relabel = |l: &Vec<usize>| (0..n).map(|i| l[inverse[i]]).collect::<Vec<_>>();
        Graph::new(
            n,
            edges,
            features,
            self.class_labels.as_ref().map(relabel),
            self.topo_labels.as_ref().map(relabel),
        )
    }

    /// Symmetrically normalized adjacency with self-loops, `D^-1/2 (A + I) D^-1/2`.
    pub fn normalized_adjacency(&self) -> SparseMatrix {
        let n = self.num_nodes;
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|i| 1.0 / ((self.degree(i) + 1) as f64).sqrt())
            .collect();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(self.adjacency.len() + n);
        let mut values = Vec::with_capacity(self.adjacency.len() + n);
        offsets.push(0);
        for i in 0..n {
            let nbrs = self.neighbors_unchecked(i);
            let split = nbrs.partition_point(|&j| j < i);
            let row = nbrs[..split]
                .iter()
                .copied()
                .chain(std::iter::once(i))
                .chain(nbrs[split..].iter().copied());
            for j in row {
                cols.push(j);
                values.push(inv_sqrt[i] * inv_sqrt[j]);
            }
            offsets.push(cols.len());
        }
        SparseMatrix {
            rows: n,
            cols: n,
            offsets,
            indices: cols,
            values,
        }
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            num_nodes: self.num_nodes,
            edges: self.edges.iter().map(|&(u, v)| [u, v]).collect(),
            features: self.features.rows().into_iter().map(|r| r.to_vec()).collect(),
            class_labels: self.class_labels.clone(),
            topo_labels: self.topo_labels.clone(),
        }
    }

    pub fn from_document(doc: GraphDocument) -> Result<Self> {
        let dim = doc.features.first().map_or(0, Vec::len);
        if doc.features.iter().any(|r| r.len() != dim) {
            return Err(Error::data("ragged feature rows"));
        }
        let flat: Vec<f64> = doc.features.into_iter().flatten().collect();
        let rows = if dim == 0 { doc.num_nodes } else { flat.len() / dim };
        let features = Array2::from_shape_vec((rows, dim), flat)
            .map_err(|e| Error::data(e.to_string()))?;
        Graph::new(
            doc.num_nodes,
            doc.edges.into_iter().map(|[u, v]| (u, v)).collect(),
            features,
            doc.class_labels,
            doc.topo_labels,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Graph::from_document(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Graph::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Compressed sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[i]..self.offsets[i + 1];
        self.indices[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                out[(i, j)] += v;
            }
        }
        out
    }
}

/// On-disk form of a [`Graph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub num_nodes: usize,
    pub edges: Vec<[usize; 2]>,
    pub features: Vec<Vec<f64>>,
    pub class_labels: Option<Vec<usize>>,
    pub topo_labels: Option<Vec<usize>>,
}

/// A labeled collection of graphs for graph classification.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSet {
    graphs: Vec<Graph>,
    class_labels: Vec<usize>,
    topo_labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSetDocument {
    pub graphs: Vec<GraphDocument>,
    pub graph_class_labels: Vec<usize>,
    pub graph_topo_labels: Option<Vec<usize>>,
}

impl GraphSet {
    pub fn new(
        graphs: Vec<Graph>,
        class_labels: Vec<usize>,
        topo_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if class_labels.len() != graphs.len() {
            return Err(Error::data(format!(
                "{} class labels for {} graphs",
                class_labels.len(),
                graphs.len()
            )));
        }
        if let Some(t) = &topo_labels {
            if t.len() != graphs.len() {
                return Err(Error::data(format!(
                    "{} topology labels for {} graphs",
                    t.len(),
                    graphs.len()
                )));
            }
        }
        if let Some(g) = graphs.first() {
            let d = g.feature_dim();
            if graphs.iter().any(|h| h.feature_dim() != d) {
                return Err(Error::data("graphs disagree on feature dimension"));
            }
        }
        Ok(Self {
            graphs,
            class_labels,
            topo_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn class_labels(&self) -> &[usize] {
        &self.class_labels
    }

    pub fn topo_labels(&self) -> Option<&[usize]> {
        self.topo_labels.as_deref()
    }

    pub fn feature_dim(&self) -> usize {
        self.graphs.first().map_or(0, Graph::feature_dim)
    }

    pub fn to_document(&self) -> GraphSetDocument {
        GraphSetDocument {
            graphs: self.graphs.iter().map(Graph::to_document).collect(),
            graph_class_labels: self.class_labels.clone(),
            graph_topo_labels: self.topo_labels.clone(),
        }
    }

    pub fn from_document(doc: GraphSetDocument) -> Result<Self> {
        let graphs = doc
            .graphs
            .into_iter()
            .map(Graph::from_document)
            .collect::<Result<Vec<_>>>()?;
        GraphSet::new(graphs, doc.graph_class_labels, doc.graph_topo_labels)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        GraphSet::from_document(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        GraphSet::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Disjoint train/validation/test index sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(train: Vec<usize>, val: Vec<usize>, test: Vec<usize>, len: usize) -> Result<Self> {
        let mut seen = vec![false; len];
        for &i in train.iter().chain(&val).chain(&test) {
            if i >= len {
                return Err(Error::Index { index: i, len });
            }
            if seen[i] {
                return Err(Error::data(format!("index {i} appears in more than one split")));
            }
            seen[i] = true;
        }
        Ok(Self { train, val, test })
    }
}

/// Train/val/test fractions, `1:3:6` by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.1,
            val: 0.3,
            test: 0.6,
        }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || parts.iter().sum::<f64>() > 1.0 + 1e-12
        {
            return Err(Error::config(format!("invalid split fractions {self:?}")));
        }
        Ok(())
    }
}

/// Step-imbalance labeling: the first half of the classes (rounded up) get
/// `n_train / C` training instances, the rest `ratio` times that (at least one).
/// Validation and test sets are drawn per class from what remains.
pub fn step_imbalance_split(
    labels: &[usize],
    ratio: f64,
    fractions: SplitFractions,
    seed: u64,
) -> Result<Split> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("imbalance ratio {ratio} not in (0, 1]")));
    }
    fractions.validate()?;
    let by_class = group_by_class(labels)?;
    let n_classes = by_class.len();
    let n_train = fractions.train * labels.len() as f64;
    let majority = (n_train / n_classes as f64).floor() as usize;
    let minority = ((ratio * majority as f64).floor() as usize).max(1);
    let n_majority_classes = n_classes.div_ceil(2);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (c, members) in by_class.into_iter().enumerate() {
        let mut members = members;
        members.shuffle(&mut rng);
        let budget = if c < n_majority_classes { majority } else { minority };
        let n_c = members.len();
        let n_tr = budget.max(1).min(n_c);
        let n_va = ((fractions.val * n_c as f64).floor() as usize).min(n_c - n_tr);
        let n_te = ((fractions.test * n_c as f64).floor() as usize).min(n_c - n_tr - n_va);
        split.train.extend_from_slice(&members[..n_tr]);
        split.val.extend_from_slice(&members[n_tr..n_tr + n_va]);
        split.test.extend_from_slice(&members[n_tr + n_va..n_tr + n_va + n_te]);
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_unstable();
    }
    Ok(split)
}

/// Stratified random split: every class contributes its own fractions.
pub fn stratified_split(labels: &[usize], fractions: SplitFractions, seed: u64) -> Result<Split> {
    fractions.validate()?;
    let by_class = group_by_class(labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for members in by_class {
        let mut members = members;
        members.shuffle(&mut rng);
        let n_c = members.len();
        let n_tr = ((fractions.train * n_c as f64).round() as usize).clamp(1, n_c);
        let n_va = ((fractions.val * n_c as f64).round() as usize).min(n_c - n_tr);
        let n_te = ((fractions.test * n_c as f64).round() as usize).min(n_c - n_tr - n_va);
        split.train.extend_from_slice(&members[..n_tr]);
        split.val.extend_from_slice(&members[n_tr..n_tr + n_va]);
        split.test.extend_from_slice(&members[n_tr + n_va..n_tr + n_va + n_te]);
    }
    for part in [&mut split.train, &mut split.val, &mut split.test] {
        part.sort_unstable();
    }
    Ok(split)
}

fn group_by_class(labels: &[usize]) -> Result<Vec<Vec<usize>>> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    if n_classes == 0 {
        return Err(Error::config("no labels to split"));
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::config(format!("class {c} has no instances")));
    }
    Ok(by_class)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::new(n, edges.to_vec(), Array2::zeros((n, 1)), None, None).unwrap()
    }

    fn cycle(n: usize) -> Graph {
        plain(n, &(0..n).map(|i| (i, (i + 1) % n)).collect::<Vec<_>>())
    }

    #[test]
    fn cycle_neighbors() {
        assert_eq!(cycle(5).neighbors(0).unwrap(), &[1, 4]);
    }

    #[test]
    fn isolated_node_has_no_neighbors() {
        let g = plain(3, &[(0, 1)]);
        assert!(g.neighbors(2).unwrap().is_empty());
    }

    #[test]
    fn house_base_node_neighbors() {
        // b1=0 b2=1 m2=2 m1=3 roof=4
        let g = plain(5, &[(0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (3, 4)]);
        assert_eq!(g.neighbors(0).unwrap(), &[1, 3]);
        assert_eq!(g.neighbors(4).unwrap(), &[2, 3]);
    }

    #[test]
    fn neighbor_index_error() {
        assert!(matches!(
            cycle(5).neighbors(5),
            Err(Error::Index { index: 5, len: 5 })
        ));
    }

    #[test]
    fn rejects_bad_edges() {
        let f = Array2::zeros((3, 1));
        assert!(Graph::new(3, vec![(0, 3)], f.clone(), None, None).is_err());
        assert!(Graph::new(3, vec![(0, 1), (1, 0)], f.clone(), None, None).is_err());
        assert!(Graph::new(3, vec![(1, 1)], f.clone(), None, None).is_err());
        assert!(Graph::new(3, vec![], f, Some(vec![0, 1]), None).is_err());
        let mut bad = Array2::zeros((3, 1));
        bad[(1, 0)] = f64::NAN;
        assert!(Graph::new(3, vec![], bad, None, None).is_err());
    }

    #[test]
    fn normalized_adjacency_small_cases() {
        let single = plain(1, &[]).normalized_adjacency().to_dense();
        assert_eq!(single, ndarray::arr2(&[[1.0]]));

        let pair = plain(2, &[(0, 1)]).normalized_adjacency().to_dense();
        for v in pair.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }

        let ring = cycle(5).normalized_adjacency().to_dense();
        for row in ring.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        for i in 0..5 {
            for j in 0..5 {
                assert!((ring[(i, j)] - ring[(j, i)]).abs() < 1e-12);
                assert!(ring[(i, j)] >= 0.0);
            }
        }
    }

    #[test]
    fn balanced_step_split() {
        let labels: Vec<usize> = (0..200).map(|i| i / 100).collect();
        let s = step_imbalance_split(&labels, 1.0, SplitFractions::default(), 3).unwrap();
        for c in 0..2 {
            assert_eq!(s.train.iter().filter(|&&i| labels[i] == c).count(), 10);
        }
        Split::new(s.train.clone(), s.val.clone(), s.test.clone(), 200).unwrap();
    }

    #[test]
    fn step_split_minority_budget() {
        let labels: Vec<usize> = (0..1000).map(|i| i / 250).collect();
        let s = step_imbalance_split(&labels, 0.2, SplitFractions::default(), 0).unwrap();
        let count = |c| s.train.iter().filter(|&&i| labels[i] == c).count();
        assert_eq!(count(0), 25);
        assert_eq!(count(1), 25);
        assert_eq!(count(2), 5);
        assert_eq!(count(3), 5);

        let s = step_imbalance_split(&labels, 0.1, SplitFractions::default(), 0).unwrap();
        assert_eq!(
            s.train.iter().filter(|&&i| labels[i] == 3).count(),
            2 // floor(0.1 * 25)
        );
    }

    #[test]
    fn step_split_errors() {
        assert!(step_imbalance_split(&[0, 2, 2], 0.5, SplitFractions::default(), 0).is_err());
        assert!(step_imbalance_split(&[0, 1], 0.0, SplitFractions::default(), 0).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let a = step_imbalance_split(&labels, 0.2, SplitFractions::default(), 9).unwrap();
        let b = step_imbalance_split(&labels, 0.2, SplitFractions::default(), 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_roundtrip_keeps_graph() {
        let g = Graph::new(
            3,
            vec![(0, 1), (2, 1)],
            ndarray::arr2(&[[0.5, -1.25], [0.1, 2.0], [3.0, 0.0]]),
            Some(vec![0, 1, 1]),
            None,
        )
        .unwrap();
        let s = g.to_json().unwrap();
        assert!(s.contains("\"topo_labels\":null"));
        assert_eq!(Graph::from_json(&s).unwrap(), g);
    }
}
