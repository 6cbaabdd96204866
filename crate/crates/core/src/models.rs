//! Trainable networks: GNN backbones, the template-memory topology
//! extractor, the weight assigner and the auxiliary topology head.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamId, Params, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;

/// Floor on the weight normalizer.
pub const WEIGHT_SUM_FLOOR: f64 = 1e-12;

/// Graph membership of each node in a batched [`Propagation`].
#[derive(Debug, Clone)]
struct Segments {
    graph_of_node: Arc<Vec<usize>>,
    num_graphs: usize,
    inv_size: Matrix,
}

/// Constant index arrays for message passing over one graph or over a
/// block-diagonal batch of graphs.
#[derive(Debug, Clone)]
pub struct Propagation {
    num_nodes: usize,
    src: Arc<Vec<usize>>,
    dst: Arc<Vec<usize>>,
    inv_degree: Matrix,
    gcn_src: Arc<Vec<usize>>,
    gcn_dst: Arc<Vec<usize>>,
    gcn_weight: Matrix,
    segments: Segments,
}

impl Propagation {
    pub fn for_graph(g: &Graph) -> Self {
        Self::for_batch(&[g])
    }

    /// Builds the block-diagonal union; node ids of graph `k` are offset by
    /// the sizes of graphs `0..k`.
    pub fn for_batch(graphs: &[&Graph]) -> Self {
        let num_nodes: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut gcn_src = Vec::new();
        let mut gcn_dst = Vec::new();
        let mut gcn_weight = Vec::new();
        let mut inv_degree = Matrix::zeros((num_nodes, 1));
        let mut graph_of_node = Vec::with_capacity(num_nodes);
        let mut inv_size = Matrix::zeros((graphs.len(), 1));
        let mut offset = 0;
        for (k, g) in graphs.iter().enumerate() {
            let adj = g.normalized_adjacency();
            for v in 0..g.num_nodes() {
                let nbrs = g.neighbors_unchecked(v);
                for &u in nbrs {
                    src.push(u + offset);
                    dst.push(v + offset);
                }
                if !nbrs.is_empty() {
                    inv_degree[(v + offset, 0)] = 1.0 / nbrs.len() as f64;
                }
                for (u, w) in adj.row(v) {
                    gcn_src.push(u + offset);
                    gcn_dst.push(v + offset);
                    gcn_weight.push(w);
                }
                graph_of_node.push(k);
            }
            inv_size[(k, 0)] = 1.0 / g.num_nodes().max(1) as f64;
            offset += g.num_nodes();
        }
        let n_gcn = gcn_weight.len();
        Self {
            num_nodes,
            src: Arc::new(src),
            dst: Arc::new(dst),
            inv_degree,
            gcn_src: Arc::new(gcn_src),
            gcn_dst: Arc::new(gcn_dst),
            gcn_weight: Matrix::from_shape_vec((n_gcn, 1), gcn_weight).expect("column"),
            segments: Segments {
                graph_of_node: Arc::new(graph_of_node),
                num_graphs: graphs.len(),
                inv_size,
            },
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_graphs(&self) -> usize {
        self.segments.num_graphs
    }

    /// Row `v` of the result is the sum of `x` over the neighbors of `v`.
    pub fn sum_neighbors(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let msg = tape.gather_rows(x, self.src.clone())?;
        tape.scatter_add_rows(msg, self.dst.clone(), self.num_nodes)
    }

    pub fn mean_neighbors(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let sum = self.sum_neighbors(tape, x)?;
        let scale = tape.constant(self.inv_degree.clone());
        tape.mul(sum, scale)
    }

    /// `Â·x` with the symmetrically normalized self-looped adjacency.
    pub fn gcn(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let msg = tape.gather_rows(x, self.gcn_src.clone())?;
        let w = tape.constant(self.gcn_weight.clone());
        let msg = tape.mul(msg, w)?;
        tape.scatter_add_rows(msg, self.gcn_dst.clone(), self.num_nodes)
    }

    /// Per-graph mean of node rows.
    pub fn mean_pool(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = &self.segments;
        let sum = tape.scatter_add_rows(x, s.graph_of_node.clone(), s.num_graphs)?;
        let scale = tape.constant(s.inv_size.clone());
        tape.mul(sum, scale)
    }

    /// Per-graph softmax of `scores` (one column) used to average node rows.
    pub fn attention_pool(&self, tape: &mut Tape, scores: Var, x: Var) -> Result<Var> {
        let s = &self.segments;
        if self.num_nodes == 0 {
            return Err(Error::contract("attention pooling over an empty graph"));
        }
        let mut max = vec![f64::NEG_INFINITY; s.num_graphs];
        for (i, &k) in s.graph_of_node.iter().enumerate() {
            max[k] = max[k].max(tape.value(scores)[(i, 0)]);
        }
        let shift = Matrix::from_shape_fn((self.num_nodes, 1), |(i, _)| max[s.graph_of_node[i]]);
        let shift = tape.constant(shift);
        let centered = tape.sub(scores, shift)?;
        let e = tape.exp(centered);
        let denom = tape.scatter_add_rows(e, s.graph_of_node.clone(), s.num_graphs)?;
        let denom = tape.gather_rows(denom, s.graph_of_node.clone())?;
        let alpha = tape.div(e, denom)?;
        let weighted = tape.mul(x, alpha)?;
        tape.scatter_add_rows(weighted, s.graph_of_node.clone(), s.num_graphs)
    }
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Affine layer `x·W + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: params.add(format!("{name}.weight"), glorot(rng, input, output)),
            bias: params.add(format!("{name}.bias"), Matrix::zeros((1, output))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var, trainable: bool) -> Result<Var> {
        let w = tape.param(params, self.weight, trainable);
        let b = tape.param(params, self.bias, trainable);
        tape.linear(x, w, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// `Linear → ReLU → Linear`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(
        params: &mut Params,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            first: Linear::new(params, &format!("{name}.0"), input, hidden, rng),
            second: Linear::new(params, &format!("{name}.1"), hidden, output, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var, trainable: bool) -> Result<Var> {
        let h = self.first.forward(tape, params, x, trainable)?;
        let h = tape.relu(h);
        self.second.forward(tape, params, h, trainable)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.first.ids(), self.second.ids()].concat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Gcn,
    Sage,
    Gin,
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Backbone::Gcn),
            "sage" | "graphsage" => Ok(Backbone::Sage),
            "gin" => Ok(Backbone::Gin),
            other => Err(Error::config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GnnLayer {
    Gcn(Linear),
    Sage(Linear),
    Gin { eps: ParamId, mlp: Mlp },
}

impl GnnLayer {
    pub fn new(params: &mut Params, kind: Backbone, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        match kind {
            Backbone::Gcn => GnnLayer::Gcn(Linear::new(params, name, input, output, rng)),
            Backbone::Sage => GnnLayer::Sage(Linear::new(params, name, 2 * input, output, rng)),
            Backbone::Gin => GnnLayer::Gin {
                eps: params.add(format!("{name}.eps"), Matrix::zeros((1, 1))),
                mlp: Mlp::new(params, &format!("{name}.mlp"), input, output, output, rng),
            },
        }
    }

    /// One message-passing step followed by ReLU.
    pub fn forward(&self, tape: &mut Tape, params: &Params, prop: &Propagation, h: Var, trainable: bool) -> Result<Var> {
        let pre = match self {
            GnnLayer::Gcn(lin) => {
                let xw = {
                    let w = tape.param(params, lin.weight, trainable);
                    tape.matmul(h, w)?
                };
                let agg = prop.gcn(tape, xw)?;
                let b = tape.param(params, lin.bias, trainable);
                tape.add(agg, b)?
            }
            GnnLayer::Sage(lin) => {
                let nbr = prop.mean_neighbors(tape, h)?;
                let cat = tape.concat_cols(&[h, nbr])?;
                lin.forward(tape, params, cat, trainable)?
            }
            GnnLayer::Gin { eps, mlp } => {
                let e = tape.param(params, *eps, trainable);
                let one = tape.constant(Matrix::ones((1, 1)));
                let factor = tape.add(one, e)?;
                let own = tape.mul(h, factor)?;
                let nbr = prop.sum_neighbors(tape, h)?;
                let agg = tape.add(own, nbr)?;
                mlp.forward(tape, params, agg, trainable)?
            }
        };
        Ok(tape.relu(pre))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            GnnLayer::Gcn(l) | GnnLayer::Sage(l) => l.ids().to_vec(),
            GnnLayer::Gin { eps, mlp } => [vec![*eps], mlp.ids()].concat(),
        }
    }
}

/// The target classifier: two message-passing layers and a softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct Gnn {
    pub kind: Backbone,
    pub layers: Vec<GnnLayer>,
    pub head: Linear,
    /// Mean-pool node embeddings per graph before the head.
    pub graph_level: bool,
}

impl Gnn {
    pub fn new(
        params: &mut Params,
        kind: Backbone,
        input: usize,
        hidden: usize,
        classes: usize,
        graph_level: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = vec![
            GnnLayer::new(params, kind, "gnn.0", input, hidden, rng),
            GnnLayer::new(params, kind, "gnn.1", hidden, hidden, rng),
        ];
        Self {
            kind,
            layers,
            head: Linear::new(params, "gnn.head", hidden, classes, rng),
            graph_level,
        }
    }

    pub fn embed(&self, tape: &mut Tape, params: &Params, prop: &Propagation, x: Var, trainable: bool) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, params, prop, h, trainable)?;
        }
        Ok(h)
    }

    /// Class probability rows per node, or per graph when `graph_level`.
    pub fn forward(&self, tape: &mut Tape, params: &Params, prop: &Propagation, x: Var, trainable: bool) -> Result<Var> {
        let mut h = self.embed(tape, params, prop, x, trainable)?;
        if self.graph_level {
            h = prop.mean_pool(tape, h)?;
        }
        let logits = self.head.forward(tape, params, h, trainable)?;
        Ok(tape.row_softmax(logits))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.layers.iter().flat_map(GnnLayer::ids).collect();
        ids.extend(self.head.ids());
        ids
    }
}

/// Per-layer memory of `K + 1` templates; the last one is the default slot
/// whose similarity is the constant `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    pub templates: Vec<ParamId>,
    pub delta: f64,
    pub k: usize,
}

impl TemplateBank {
    pub fn new(params: &mut Params, dims: &[usize], k: usize, delta: f64, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("template count K must be at least 1"));
        }
        if !delta.is_finite() {
            return Err(Error::config("default similarity must be finite"));
        }
        let templates = dims
            .iter()
            .enumerate()
            .map(|(l, &d)| {
                let scale = 1.0 / (d as f64).sqrt();
                let t = Array2::from_shape_fn((k + 1, d), |_| {
                    scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                });
                params.add(format!("templates.{l}"), t)
            })
            .collect();
        Ok(Self { templates, delta, k })
    }
}

pub struct ExtractorOutput {
    /// Concatenation of every layer's output, `n × D`.
    pub embedding: Var,
    /// Raw similarities per layer, `n × (K+1)`.
    pub scores: Vec<Var>,
    /// Template selection distributions per layer.
    pub selection: Vec<Var>,
}

/// Topology extractor: sum-aggregating MLP layers whose outputs are
/// re-expressed as mixtures of learned templates.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub layers: Vec<Mlp>,
    pub bank: TemplateBank,
    pub dims: Vec<usize>,
}

impl Extractor {
    pub fn new(params: &mut Params, input: usize, dims: &[usize], k: usize, delta: f64, rng: &mut impl Rng) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::config("extractor needs at least one layer"));
        }
        let mut layers = Vec::with_capacity(dims.len());
        let mut prev = input;
        for (l, &d) in dims.iter().enumerate() {
            layers.push(Mlp::new(params, &format!("extractor.{l}"), 2 * prev, d, d, rng));
            prev = d;
        }
        let bank = TemplateBank::new(params, dims, k, delta, rng)?;
        Ok(Self {
            layers,
            bank,
            dims: dims.to_vec(),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    /// One extractor layer; returns `(H', S, softmax(S))`.
    #[allow(clippy::too_many_arguments)]
    pub fn layer(
        &self,
        tape: &mut Tape,
        params: &Params,
        prop: &Propagation,
        h: Var,
        l: usize,
        train_mlp: bool,
        train_templates: bool,
    ) -> Result<(Var, Var, Var)> {
        let nbr = prop.sum_neighbors(tape, h)?;
        let cat = tape.concat_cols(&[h, nbr])?;
        let z = self.layers[l].forward(tape, params, cat, train_mlp)?;
        let t = tape.param(params, self.bank.templates[l], train_templates);
        let tt = tape.transpose(t);
        let raw = tape.matmul(z, tt)?;
        let k = self.bank.k;
        let mask = tape.constant(Array2::from_shape_fn((1, k + 1), |(_, j)| if j < k { 1.0 } else { 0.0 }));
        let default = tape.constant(Array2::from_shape_fn((1, k + 1), |(_, j)| if j < k { 0.0 } else { self.bank.delta }));
        let masked = tape.mul(raw, mask)?;
        let scores = tape.add(masked, default)?;
        let selection = tape.row_softmax(scores);
        let out = tape.matmul(selection, t)?;
        Ok((out, scores, selection))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        prop: &Propagation,
        x: Var,
        train_mlp: bool,
        train_templates: bool,
    ) -> Result<ExtractorOutput> {
        let mut h = x;
        let mut outs = Vec::new();
        let mut scores = Vec::new();
        let mut selection = Vec::new();
        for l in 0..self.layers.len() {
            let (next, s, sel) = self.layer(tape, params, prop, h, l, train_mlp, train_templates)?;
            outs.push(next);
            scores.push(s);
            selection.push(sel);
            h = next;
        }
        Ok(ExtractorOutput {
            embedding: tape.concat_cols(&outs)?,
            scores,
            selection,
        })
    }

    pub fn mlp_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Mlp::ids).collect()
    }

    pub fn template_ids(&self) -> Vec<ParamId> {
        self.bank.templates.clone()
    }
}

/// Plain two-layer GCN used as an instance-level reweighting tower.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnTower {
    pub layers: Vec<GnnLayer>,
    pub dims: Vec<usize>,
}

impl GcnTower {
    pub fn new(params: &mut Params, input: usize, dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut prev = input;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(l, &d)| {
                let layer = GnnLayer::new(params, Backbone::Gcn, &format!("tower.{l}"), prev, d, rng);
                prev = d;
                layer
            })
            .collect();
        Self {
            layers,
            dims: dims.to_vec(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, prop: &Propagation, x: Var, trainable: bool) -> Result<Var> {
        let mut h = x;
        let mut outs = Vec::new();
        for layer in &self.layers {
            h = layer.forward(tape, params, prop, h, trainable)?;
            outs.push(h);
        }
        tape.concat_cols(&outs)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(GnnLayer::ids).collect()
    }
}

/// Attention pooling `softmax(H·a)ᵀ·H` per graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionPool {
    pub query: ParamId,
}

impl AttentionPool {
    pub fn new(params: &mut Params, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: params.add(format!("{name}.query"), glorot(rng, dim, 1)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, prop: &Propagation, h: Var, trainable: bool) -> Result<Var> {
        let a = tape.param(params, self.query, trainable);
        let scores = tape.matmul(h, a)?;
        prop.attention_pool(tape, scores, h)
    }
}

/// Normalizes positive raw weights so they sum to the batch size.
pub fn normalize_weights(tape: &mut Tape, raw: Var) -> Result<Var> {
    let b = tape.value(raw).nrows();
    if b == 0 {
        return Err(Error::contract("weights for an empty batch"));
    }
    let total = tape.sum(raw);
    let total = tape.clamp_min(total, WEIGHT_SUM_FLOOR);
    let w = tape.div(raw, total)?;
    Ok(tape.scale(w, b as f64))
}

/// Two-layer MLP scoring instance embeddings; weights are `softplus`
/// outputs normalized to sum to the batch size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightNet {
    pub mlp: Mlp,
}

impl WeightNet {
    pub fn new(params: &mut Params, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(params, "weight_net", input, hidden, 1, rng),
        }
    }

    pub fn raw(&self, tape: &mut Tape, params: &Params, rows: Var, trainable: bool) -> Result<Var> {
        let out = self.mlp.forward(tape, params, rows, trainable)?;
        Ok(tape.softplus(out))
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, rows: Var, trainable: bool) -> Result<Var> {
        let raw = self.raw(tape, params, rows, trainable)?;
        normalize_weights(tape, raw)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.mlp.ids()
    }
}

/// Learnable per-class weight logits: every instance of a class shares its weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub logits: ParamId,
}

impl ClassWeights {
    pub fn new(params: &mut Params, classes: usize) -> Self {
        // softplus(0.5413) = 1
        Self {
            logits: params.add("class_weights", Matrix::from_elem((classes, 1), 0.541_324_854_612_918_1)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, labels: Arc<Vec<usize>>, trainable: bool) -> Result<Var> {
        let v = tape.param(params, self.logits, trainable);
        let picked = tape.gather_rows(v, labels)?;
        let raw = tape.softplus(picked);
        normalize_weights(tape, raw)
    }
}

/// Linear classifier of pseudo topology labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxHead {
    pub linear: Linear,
}

impl AuxHead {
    pub fn new(params: &mut Params, input: usize, groups: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new(params, "aux", input, groups, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, rows: Var, trainable: bool) -> Result<Var> {
        let logits = self.linear.forward(tape, params, rows, trainable)?;
        Ok(tape.row_softmax(logits))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.linear.ids().to_vec()
    }
}
