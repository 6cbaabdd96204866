//! Dense reverse-mode differentiation over `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constants or bindings of entries in a [`Params`] store; [`Tape::backward`]
//! accumulates gradients into the store for every bound parameter.
//!
//! Binary elementwise ops broadcast an operand shaped `1×c`, `r×1` or `1×1`
//! against the other operand; nothing more general is supported.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter in a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable matrices with accumulated gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.grads.push(Matrix::zeros(value.raw_dim()));
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn zero_grad(&mut self, id: ParamId) {
        self.grads[id.0].fill(0.0);
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Number of scalar entries over all parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    RowSoftmax(Var),
    Log(Var),
    Exp(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterAddRows(Var, Arc<Vec<usize>>),
    PickCols(Var, Arc<Vec<usize>>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape(m: &Matrix) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape { op, lhs: a, rhs: b }),
    }
}

/// Sums `grad` down to `target` along broadcast axes.
fn reduce_to(grad: Matrix, target: (usize, usize)) -> Matrix {
    let mut g = grad;
    if target.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if target.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn row_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a `1×1` var.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter. When `trainable` is false the parameter enters as a
    /// constant and receives no gradient.
    pub fn param(&mut self, params: &Params, id: ParamId, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: params.value(id).clone(),
            op: Op::Leaf,
            requires_grad: trainable,
            param: trainable.then_some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (shape(self.value(a)), shape(self.value(b)));
        if sa.1 != sb.0 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = broadcast_shape(name, shape(va), shape(vb))?;
        let ea = va.broadcast(out).expect("checked broadcast");
        let eb = vb.broadcast(out).expect("checked broadcast");
        let value = Zip::from(&ea).and(&eb).map_collect(|&x, &y| f(x, y));
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = row_softmax(self.value(a));
        self.push(value, Op::RowSoftmax(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    /// `max(x, floor)` elementwise; the gradient is zero where the floor binds.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(floor));
        self.push(value, Op::ClampMin(a, floor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let len = self.value(a).len();
        if len == 0 {
            return Err(Error::contract("mean of an empty matrix"));
        }
        let value = Matrix::from_elem((1, 1), self.value(a).sum() / len as f64);
        Ok(self.push(value, Op::Mean(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_cols of nothing"));
        };
        let rows = self.value(first).nrows();
        for &p in parts {
            let sp = shape(self.value(p));
            if sp.0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: shape(self.value(first)),
                    rhs: sp,
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("checked rows");
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// `out[i] = x[index[i]]`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= x.nrows()) {
            return Err(Error::Index {
                index: bad,
                len: x.nrows(),
            });
        }
        let value = x.select(Axis(0), &index);
        Ok(self.push(value, Op::GatherRows(a, index), &[a]))
    }

    /// `out[target[i]] += x[i]` into `n_out` rows.
    pub fn scatter_add_rows(&mut self, a: Var, target: Arc<Vec<usize>>, n_out: usize) -> Result<Var> {
        let x = self.value(a);
        if target.len() != x.nrows() {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                lhs: shape(x),
                rhs: (target.len(), 1),
            });
        }
        if let Some(&bad) = target.iter().find(|&&i| i >= n_out) {
            return Err(Error::Index {
                index: bad,
                len: n_out,
            });
        }
        let mut value = Matrix::zeros((n_out, x.ncols()));
        for (i, &t) in target.iter().enumerate() {
            let mut dst = value.row_mut(t);
            dst += &x.row(i);
        }
        Ok(self.push(value, Op::ScatterAddRows(a, target), &[a]))
    }

    /// `out[i, 0] = x[i, cols[i]]`.
    pub fn pick_cols(&mut self, a: Var, cols: Arc<Vec<usize>>) -> Result<Var> {
        let x = self.value(a);
        if cols.len() != x.nrows() {
            return Err(Error::Shape {
                op: "pick_cols",
                lhs: shape(x),
                rhs: (cols.len(), 1),
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= x.ncols()) {
            return Err(Error::Index {
                index: bad,
                len: x.ncols(),
            });
        }
        let value = Matrix::from_shape_fn((cols.len(), 1), |(i, _)| x[(i, cols[i])]);
        Ok(self.push(value, Op::PickCols(a, cols), &[a]))
    }

    /// Row-broadcast affine map `x·w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Reverse pass from a scalar `loss`, accumulating into `params`.
    pub fn backward(&self, loss: Var, params: &mut Params) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                params.grads[id.0] += &g;
            }
        }
        Ok(())
    }

    /// Gradient of a scalar `loss` with respect to every recorded value.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Matrix>>> {
        let ls = shape(self.value(loss));
        if ls != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a 1x1 loss, got {}x{}",
                ls.0, ls.1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut send = |v: Var, delta: Matrix| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &delta,
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    send(*a, g.dot(&self.value(*b).t()));
                    send(*b, self.value(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    send(*a, reduce_to(g.clone(), shape(self.value(*a))));
                    send(*b, reduce_to(g, shape(self.value(*b))));
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to(g.clone(), shape(self.value(*a))));
                    send(*b, reduce_to(-g, shape(self.value(*b))));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    send(*a, reduce_to(&g * vb, shape(va)));
                    send(*b, reduce_to(&g * va, shape(vb)));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    send(*a, reduce_to(&g / vb, shape(va)));
                    let gb = -(&g * &node.value) / vb;
                    send(*b, reduce_to(gb, shape(vb)));
                }
                Op::Scale(a, k) => send(*a, g * *k),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    send(*a, Zip::from(&g).and(x).map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 }));
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    send(*a, Zip::from(&g).and(x).map_collect(|&g, &x| g * sigmoid(x)));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    send(*a, Zip::from(&g).and(y).map_collect(|&g, &y| g * y * (1.0 - y)));
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let gy = &g * y;
                    let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*a, gy - y * &dot);
                }
                Op::Log(a) => send(*a, &g / self.value(*a)),
                Op::Exp(a) => send(*a, &g * &node.value),
                Op::ClampMin(a, floor) => {
                    let x = self.value(*a);
                    send(*a, Zip::from(&g).and(x).map_collect(|&g, &x| if x > *floor { g } else { 0.0 }));
                }
                Op::Sum(a) => {
                    let sa = self.value(*a).raw_dim();
                    send(*a, Matrix::from_elem(sa, g[(0, 0)]));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    send(*a, Matrix::from_elem(x.raw_dim(), g[(0, 0)] / x.len() as f64));
                }
                Op::Transpose(a) => send(*a, g.t().to_owned()),
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        send(*p, g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::GatherRows(a, index) => {
                    let x = self.value(*a);
                    let mut out = Matrix::zeros(x.raw_dim());
                    for (i, &src) in index.iter().enumerate() {
                        let mut dst = out.row_mut(src);
                        dst += &g.row(i);
                    }
                    send(*a, out);
                }
                Op::ScatterAddRows(a, target) => send(*a, g.select(Axis(0), target)),
                Op::PickCols(a, cols) => {
                    let x = self.value(*a);
                    let mut out = Matrix::zeros(x.raw_dim());
                    for (i, &c) in cols.iter().enumerate() {
                        out[(i, c)] = g[(i, 0)];
                    }
                    send(*a, out);
                }
            }
        }
        Ok(grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer bound to a fixed group of parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    group: Vec<ParamId>,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    steps: u64,
}

impl Optimizer {
    pub fn sgd(group: Vec<ParamId>, params: &Params, lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, group, params, lr)
    }

    /// Adam with `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    pub fn adam(group: Vec<ParamId>, params: &Params, lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, group, params, lr)
    }

    pub fn new(kind: OptimizerKind, group: Vec<ParamId>, params: &Params, lr: f64) -> Self {
        let zeros: Vec<Matrix> = group
            .iter()
            .map(|&id| Matrix::zeros(params.value(id).raw_dim()))
            .collect();
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            group,
            second: zeros.clone(),
            first: zeros,
            steps: 0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn group(&self) -> &[ParamId] {
        &self.group
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to the group and zeroes its gradients.
    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        for &id in &self.group {
            if params.grad(id).iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter `{}`",
                    params.name(id)
                )));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (k, &id) in self.group.iter().enumerate() {
            let mut grad = params.grads[id.0].clone();
            if self.weight_decay != 0.0 {
                grad.scaled_add(self.weight_decay, &params.values[id.0]);
            }
            match self.kind {
                OptimizerKind::Sgd => params.values[id.0].scaled_add(-self.lr, &grad),
                OptimizerKind::Adam => {
                    let (b1, b2) = (self.beta1, self.beta2);
                    let m = &mut self.first[k];
                    let v = &mut self.second[k];
                    Zip::from(&mut *m).and(&grad).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
                    Zip::from(&mut *v).and(&grad).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    let (lr, eps) = (self.lr, self.eps);
                    Zip::from(&mut params.values[id.0])
                        .and(&*m)
                        .and(&*v)
                        .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + eps));
                }
            }
            params.zero_grad(id);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(arr2(&[[0.0, 0.0]]));
        let y = t.row_softmax(x);
        assert_eq!(t.value(y), &arr2(&[[0.5, 0.5]]));
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.constant(Matrix::eye(3));
        let x = t.constant(arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]));
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn scatter_over_ring() {
        // messages along both directions of a 5-cycle, one-hot node features
        let n = 5;
        let mut src = Vec::new();
        let mut dst = Vec::new();
        for i in 0..n {
            let j = (i + 1) % n;
            src.extend([i, j]);
            dst.extend([j, i]);
        }
        let mut t = Tape::new();
        let x = t.constant(Matrix::eye(n));
        let msg = t.gather_rows(x, Arc::new(src)).unwrap();
        let agg = t.scatter_add_rows(msg, Arc::new(dst), n).unwrap();
        let out = t.value(agg);
        for i in 0..n {
            for j in 0..n {
                let expect = if j == (i + 1) % n || j == (i + n - 1) % n { 1.0 } else { 0.0 };
                assert_eq!(out[(i, j)], expect);
            }
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros((2, 3)));
        let b = t.constant(Matrix::zeros((2, 3)));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("(2, 3) vs (2, 3)"));
        let c = t.constant(Matrix::zeros((3, 2)));
        assert!(matches!(t.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut p = Params::new();
        let id = p.add("x", arr2(&[[1.0, -2.0], [3.0, 0.5]]));
        let mut t = Tape::new();
        let x = t.param(&p, id, true);
        let l = t.sum(x);
        t.backward(l, &mut p).unwrap();
        assert_eq!(p.grad(id), &Matrix::ones((2, 2)));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut p = Params::new();
        let id = p.add("logits", arr2(&[[0.3, -1.2, 2.0]]));
        let mut t = Tape::new();
        let z = t.param(&p, id, true);
        let prob = t.row_softmax(z);
        let picked = t.pick_cols(prob, Arc::new(vec![1])).unwrap();
        let lp = t.log(picked);
        let loss = t.scale(lp, -1.0);
        t.backward(loss, &mut p).unwrap();
        let sm = row_softmax(p.value(id));
        for c in 0..3 {
            let expect = sm[(0, c)] - if c == 1 { 1.0 } else { 0.0 };
            assert!((p.grad(id)[(0, c)] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut p = Params::new();
        let id = p.add("x", Matrix::zeros((2, 1)));
        let mut t = Tape::new();
        let x = t.param(&p, id, true);
        assert!(matches!(t.backward(x, &mut p), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut p = Params::new();
        let a = p.add("a", arr2(&[[2.0]]));
        let b = p.add("b", arr2(&[[3.0]]));
        let mut t = Tape::new();
        let va = t.param(&p, a, true);
        let vb = t.param(&p, b, false);
        let y = t.mul(va, vb).unwrap();
        t.backward(y, &mut p).unwrap();
        assert_eq!(p.grad(a)[(0, 0)], 3.0);
        assert_eq!(p.grad(b)[(0, 0)], 0.0);
    }

    #[test]
    fn constants_are_not_recorded_as_ops() {
        let mut t = Tape::new();
        let a = t.constant(arr2(&[[1.0]]));
        let b = t.relu(a);
        assert!(!t.requires_grad(b));
        assert!(matches!(t.nodes[b.0].op, Op::Leaf));
    }

    #[test]
    fn sgd_unit_rate_subtracts_gradient() {
        let mut p = Params::new();
        let id = p.add("w", arr2(&[[1.0, 2.0]]));
        p.grads[id.0] = arr2(&[[0.5, -1.0]]);
        let mut opt = Optimizer::sgd(vec![id], &p, 1.0);
        opt.step(&mut p).unwrap();
        assert_eq!(p.value(id), &arr2(&[[0.5, 3.0]]));
        assert_eq!(p.grad(id), &Matrix::zeros((1, 2)));
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut p = Params::new();
        let id = p.add("w", arr2(&[[0.0, 0.0, 0.0]]));
        p.grads[id.0] = arr2(&[[3.0, -0.02, 1e3]]);
        let mut opt = Optimizer::adam(vec![id], &p, 0.01);
        opt.step(&mut p).unwrap();
        for (v, s) in p.value(id).iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - 0.01 * s).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Params::new();
        let id = p.add("w", arr2(&[[1.5, -0.5]]));
        let before = p.value(id).clone();
        let mut opt = Optimizer::adam(vec![id], &p, 0.1);
        opt.step(&mut p).unwrap();
        assert_eq!(p.value(id), &before);
        let mut opt = Optimizer::sgd(vec![id], &p, 0.1);
        opt.step(&mut p).unwrap();
        assert_eq!(p.value(id), &before);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = Params::new();
        let id = p.add("templates.0", arr2(&[[1.0]]));
        p.grads[id.0] = arr2(&[[f64::NAN]]);
        let err = Optimizer::adam(vec![id], &p, 0.1).step(&mut p).unwrap_err();
        assert!(err.to_string().contains("templates.0"));
    }
}
