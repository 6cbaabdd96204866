#![allow(dead_code)]

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use topoimb::autodiff::{Matrix, ParamId, Params, Tape, Var};
use topoimb::graph::Graph;
use topoimb::models::{
    normalize_weights, AttentionPool, AuxHead, Backbone, Extractor, Gnn, Propagation, WeightNet,
};
use topoimb::synth::gen_ba;
use topoimb::training::{loss_aux, loss_ce, loss_re};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub type LossFn = Box<dyn Fn(&mut Tape, &Params) -> Var>;

pub struct GradCase {
    pub name: String,
    pub params: Params,
    pub loss: LossFn,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> Matrix {
    Array2::from_shape_fn(shape, |_| rng.random_range(lo..hi))
}

/// Entries bounded away from zero, for kinked primitives.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Matrix {
    Array2::from_shape_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn loss_value(loss: &LossFn, params: &Params) -> f64 {
    let mut tape = Tape::new();
    let v = loss(&mut tape, params);
    tape.scalar(v)
}

/// Below this gradient norm central differences are at round-off level.
pub const FD_FLOOR: f64 = 1e-6;

/// Largest per-tensor relative error `‖g − ĝ‖ / max(‖g‖ + ‖ĝ‖, FD_FLOOR)`
/// between the analytic gradient and central differences with step [`FD_STEP`].
pub fn max_relative_error(case: &mut GradCase) -> f64 {
    case.params.zero_grads();
    let mut tape = Tape::new();
    let v = (case.loss)(&mut tape, &case.params);
    tape.backward(v, &mut case.params).unwrap();

    let ids: Vec<ParamId> = case.params.ids().collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = case.params.grad(id).clone();
        let mut numeric = Matrix::zeros(analytic.dim());
        for idx in 0..analytic.len() {
            let (r, c) = (idx / analytic.ncols(), idx % analytic.ncols());
            let orig = case.params.value(id)[[r, c]];
            case.params.value_mut(id)[[r, c]] = orig + FD_STEP;
            let up = loss_value(&case.loss, &case.params);
            case.params.value_mut(id)[[r, c]] = orig - FD_STEP;
            let down = loss_value(&case.loss, &case.params);
            case.params.value_mut(id)[[r, c]] = orig;
            numeric[[r, c]] = (up - down) / (2.0 * FD_STEP);
        }
        let diff = (&analytic - &numeric).mapv(|x| x * x).sum().sqrt();
        let scale = analytic.mapv(|x| x * x).sum().sqrt() + numeric.mapv(|x| x * x).sum().sqrt();
        worst = worst.max(diff / scale.max(FD_FLOOR));
    }
    worst
}

/// `Σ f(x) ⊙ R` for a fixed random `R`, so every output entry matters.
fn probe(tape: &mut Tape, out: Var, r: &Matrix) -> Var {
    let rv = tape.constant(r.clone());
    let m = tape.mul(out, rv).unwrap();
    tape.sum(m)
}

type Unary = fn(&mut Tape, Var) -> Var;
type Binary = fn(&mut Tape, Var, Var) -> topoimb::Result<Var>;

fn unary_case(name: &str, x: Matrix, out_shape: (usize, usize), f: Unary, seed: u64) -> GradCase {
    let mut r = rng(seed);
    let weights = uniform(&mut r, out_shape, -1.0, 1.0);
    let mut params = Params::new();
    let id = params.add("x", x);
    GradCase {
        name: name.to_string(),
        params,
        loss: Box::new(move |tape, p| {
            let x = tape.param(p, id, true);
            let y = f(tape, x);
            probe(tape, y, &weights)
        }),
    }
}

fn binary_case(name: &str, a: Matrix, b: Matrix, out_shape: (usize, usize), f: Binary, seed: u64) -> GradCase {
    let mut r = rng(seed);
    let weights = uniform(&mut r, out_shape, -1.0, 1.0);
    let mut params = Params::new();
    let ia = params.add("a", a);
    let ib = params.add("b", b);
    GradCase {
        name: name.to_string(),
        params,
        loss: Box::new(move |tape, p| {
            let a = tape.param(p, ia, true);
            let b = tape.param(p, ib, true);
            let y = f(tape, a, b).unwrap();
            probe(tape, y, &weights)
        }),
    }
}

pub fn small_graph(n: usize, seed: u64) -> Graph {
    let mut r = rng(seed);
    let edges = gen_ba(n, 2, &mut r).unwrap();
    let features = uniform(&mut r, (n, 3), -1.0, 1.0);
    Graph::new(n, edges, features, None, None).unwrap()
}

/// One case per tape primitive and per message-passing operator.
pub fn primitive_cases() -> Vec<GradCase> {
    let mut r = rng(7);
    let mut cases = Vec::new();
    let s = (3, 4);

    cases.push(binary_case("matmul", uniform(&mut r, (3, 4), -1.0, 1.0), uniform(&mut r, (4, 2), -1.0, 1.0), (3, 2), Tape::matmul, 1));
    let binaries: [(&str, Binary); 4] = [("add", Tape::add), ("sub", Tape::sub), ("mul", Tape::mul), ("div", Tape::div)];
    for (name, f) in binaries {
        for (suffix, bshape) in [("", s), ("/row", (1, 4)), ("/col", (3, 1)), ("/scalar", (1, 1))] {
            let a = uniform(&mut r, s, -1.0, 1.0);
            let b = uniform(&mut r, bshape, 0.5, 1.5);
            cases.push(binary_case(&format!("{name}{suffix}"), a, b, s, f, 2));
        }
        let a = uniform(&mut r, (1, 4), 0.5, 1.5);
        let b = uniform(&mut r, (3, 1), 0.5, 1.5);
        cases.push(binary_case(&format!("{name}/outer"), a, b, s, f, 3));
    }

    let x = uniform(&mut r, s, -1.0, 1.0);
    cases.push(unary_case("scale", x.clone(), s, |t, v| t.scale(v, -2.5), 4));
    cases.push(unary_case("relu", away_from_zero(&mut r, s), s, |t, v| t.relu(v), 4));
    cases.push(unary_case("softplus", x.clone(), s, |t, v| t.softplus(v), 4));
    cases.push(unary_case("sigmoid", x.clone(), s, |t, v| t.sigmoid(v), 4));
    cases.push(unary_case("row_softmax", x.clone(), s, |t, v| t.row_softmax(v), 4));
    cases.push(unary_case("log", uniform(&mut r, s, 0.5, 2.0), s, |t, v| t.log(v), 4));
    cases.push(unary_case("exp", x.clone(), s, |t, v| t.exp(v), 4));
    cases.push(unary_case("clamp_min", away_from_zero(&mut r, s), s, |t, v| t.clamp_min(v, 0.0), 4));
    cases.push(unary_case("sum", x.clone(), (1, 1), |t, v| t.sum(v), 4));
    cases.push(unary_case("mean", x.clone(), (1, 1), |t, v| t.mean(v).unwrap(), 4));
    cases.push(unary_case("transpose", x.clone(), (4, 3), |t, v| t.transpose(v), 4));
    cases.push(binary_case("concat_cols", x.clone(), uniform(&mut r, (3, 2), -1.0, 1.0), (3, 10), |t, a, b| t.concat_cols(&[a, b, a]), 5));
    cases.push(unary_case("gather_rows", x.clone(), (5, 4), |t, v| t.gather_rows(v, Arc::new(vec![2, 0, 2, 1, 2])).unwrap(), 6));
    cases.push(unary_case("scatter_add_rows", x.clone(), (2, 4), |t, v| t.scatter_add_rows(v, Arc::new(vec![1, 0, 1]), 2).unwrap(), 6));
    cases.push(unary_case("pick_cols", x.clone(), (3, 1), |t, v| t.pick_cols(v, Arc::new(vec![3, 0, 2])).unwrap(), 6));
    cases.push(unary_case("normalize_weights", uniform(&mut r, (5, 1), 0.2, 2.0), (5, 1), |t, v| normalize_weights(t, v).unwrap(), 6));

    let mut params = Params::new();
    let ix = params.add("x", uniform(&mut r, (4, 3), -1.0, 1.0));
    let iw = params.add("w", uniform(&mut r, (3, 2), -1.0, 1.0));
    let ib = params.add("b", uniform(&mut r, (1, 2), -1.0, 1.0));
    let weights = uniform(&mut r, (4, 2), -1.0, 1.0);
    cases.push(GradCase {
        name: "linear".into(),
        params,
        loss: Box::new(move |t, p| {
            let (x, w, b) = (t.param(p, ix, true), t.param(p, iw, true), t.param(p, ib, true));
            let y = t.linear(x, w, b).unwrap();
            probe(t, y, &weights)
        }),
    });

    let graphs = [small_graph(6, 1), small_graph(5, 2)];
    let prop = Arc::new(Propagation::for_batch(&[&graphs[0], &graphs[1]]));
    let n = prop.num_nodes();
    type PropOp = fn(&Propagation, &mut Tape, Var) -> topoimb::Result<Var>;
    let ops: [(&str, PropOp, usize); 4] = [
        ("sum_neighbors", Propagation::sum_neighbors, n),
        ("mean_neighbors", Propagation::mean_neighbors, n),
        ("gcn", Propagation::gcn, n),
        ("mean_pool", Propagation::mean_pool, 2),
    ];
    for (name, op, rows) in ops {
        let mut params = Params::new();
        let ix = params.add("x", uniform(&mut r, (n, 3), -1.0, 1.0));
        let weights = uniform(&mut r, (rows, 3), -1.0, 1.0);
        let prop = prop.clone();
        cases.push(GradCase {
            name: name.into(),
            params,
            loss: Box::new(move |t, p| {
                let x = t.param(p, ix, true);
                let y = op(&prop, t, x).unwrap();
                probe(t, y, &weights)
            }),
        });
    }
    let mut params = Params::new();
    let is = params.add("scores", uniform(&mut r, (n, 1), -2.0, 2.0));
    let ix = params.add("x", uniform(&mut r, (n, 3), -1.0, 1.0));
    let weights = uniform(&mut r, (2, 3), -1.0, 1.0);
    cases.push(GradCase {
        name: "attention_pool".into(),
        params,
        loss: Box::new(move |t, p| {
            let (s, x) = (t.param(p, is, true), t.param(p, ix, true));
            let y = prop.attention_pool(t, s, x).unwrap();
            probe(t, y, &weights)
        }),
    });
    cases
}

/// Redraws every parameter so no unit sits exactly on a ReLU kink (zero
/// biases would put dead units there).
fn randomize(params: &mut Params, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let shape = params.value(id).dim();
        *params.value_mut(id) = uniform(rng, shape, -0.8, 0.8);
    }
}

/// Three randomized networks: a node-level backbone with cross-entropy, the
/// full extractor + weight net + aux head objective, and a graph-level GIN
/// with attention-pooled weights.
pub fn composite_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let mut cases = Vec::new();

    let g = small_graph(9, seed);
    let prop = Arc::new(Propagation::for_graph(&g));
    let x = g.features().clone();
    let labels = Arc::new((0..9).map(|i| i % 3).collect::<Vec<_>>());

    let backbone = [Backbone::Gcn, Backbone::Sage, Backbone::Gin][(seed % 3) as usize];
    let mut params = Params::new();
    let gnn = Gnn::new(&mut params, backbone, 3, 4, 3, false, &mut r);
    {
        let (prop, x, labels) = (prop.clone(), x.clone(), labels.clone());
        randomize(&mut params, &mut r);
        cases.push(GradCase {
            name: format!("{backbone:?} classifier + cross-entropy"),
            params,
            loss: Box::new(move |t, p| {
                let xv = t.constant(x.clone());
                let probs = gnn.forward(t, p, &prop, xv, true).unwrap();
                loss_ce(t, probs, labels.clone()).unwrap()
            }),
        });
    }

    let mut params = Params::new();
    let gnn = Gnn::new(&mut params, Backbone::Gcn, 3, 4, 3, false, &mut r);
    let ext = Extractor::new(&mut params, 3, &[4, 3], 3, 0.3, &mut r).unwrap();
    let wnet = WeightNet::new(&mut params, ext.output_dim(), 4, &mut r);
    let aux = AuxHead::new(&mut params, ext.output_dim(), 4, &mut r);
    let pseudo = Arc::new((0..9).map(|i| i % 4).collect::<Vec<_>>());
    {
        let (prop, x, labels) = (prop.clone(), x.clone(), labels.clone());
        randomize(&mut params, &mut r);
        cases.push(GradCase {
            name: "extractor + weight net + aux head".into(),
            params,
            loss: Box::new(move |t, p| {
                let xv = t.constant(x.clone());
                let probs = gnn.forward(t, p, &prop, xv, true).unwrap();
                let out = ext.forward(t, p, &prop, xv, true, true).unwrap();
                let w = wnet.forward(t, p, out.embedding, true).unwrap();
                let re = loss_re(t, probs, labels.clone(), w).unwrap();
                let a = aux.forward(t, p, out.embedding, true).unwrap();
                let la = loss_aux(t, a, pseudo.clone()).unwrap();
                let neg = t.scale(re, -0.7);
                t.add(neg, la).unwrap()
            }),
        });
    }

    let graphs = [small_graph(7, seed + 10), small_graph(6, seed + 11), small_graph(8, seed + 12)];
    let batch = Arc::new(Propagation::for_batch(&[&graphs[0], &graphs[1], &graphs[2]]));
    let xb = ndarray::concatenate(
        ndarray::Axis(0),
        &[graphs[0].features().view(), graphs[1].features().view(), graphs[2].features().view()],
    )
    .unwrap();
    let glabels = Arc::new(vec![0, 1, 1]);
    let mut params = Params::new();
    let gnn = Gnn::new(&mut params, Backbone::Gin, 3, 4, 2, true, &mut r);
    let ext = Extractor::new(&mut params, 3, &[4], 2, 0.0, &mut r).unwrap();
    let pool = AttentionPool::new(&mut params, "pool", ext.output_dim(), &mut r);
    let wnet = WeightNet::new(&mut params, ext.output_dim(), 3, &mut r);
    randomize(&mut params, &mut r);
    cases.push(GradCase {
        name: "graph-level GIN + pooled weights".into(),
        params,
        loss: Box::new(move |t, p| {
            let xv = t.constant(xb.clone());
            let probs = gnn.forward(t, p, &batch, xv, true).unwrap();
            let out = ext.forward(t, p, &batch, xv, true, true).unwrap();
            let pooled = pool.forward(t, p, &batch, out.embedding, true).unwrap();
            let w = wnet.forward(t, p, pooled, true).unwrap();
            loss_re(t, probs, glabels.clone(), w).unwrap()
        }),
    });
    cases
}
