use std::rc::Rc;

use super::{AutodiffError, SparseMatrix, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    DivEps { num: Var, den: Var, eps: f64 },
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Sqrt(Var),
    Softmax { x: Var, tau: f64 },
    MaxConst { x: Var, floor: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    RowScale(Var, Var),
    SpMM(Rc<SparseMatrix>, Var),
    Reshape(Var),
    Column(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Every node's inputs are
/// recorded before it, so a single reverse sweep is a valid backward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Values handed out by successive `stop_gradient` calls instead of
    /// their inputs (see [`Tape::with_frozen_stops`]).
    frozen: Option<Vec<Tensor>>,
    stops_seen: usize,
}

/// Gradient of a scalar loss with respect to every leaf that requires one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or exact zeros when `v` is unreachable from the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn is_reachable(&self, v: Var) -> bool {
        matches!(self.grads.get(v.0), Some(Some(_)))
    }
}

fn suffix_of(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push("param", t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    /// A tape whose k-th `stop_gradient` returns `values[k]` instead of its
    /// input. Replaying a computation this way treats detached quantities as
    /// the constants they are from the gradient's point of view, which is
    /// what a finite-difference check of that gradient needs.
    pub fn with_frozen_stops(values: Vec<Tensor>) -> Self {
        Self {
            frozen: Some(values),
            ..Self::default()
        }
    }

    /// Values of every `stop_gradient` node, in recording order.
    pub fn stop_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGrad))
            .map(|n| n.value.clone())
            .collect()
    }

    /// Same forward value; contributes nothing to the gradient of any ancestor.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let k = self.stops_seen;
        self.stops_seen += 1;
        let value = match &self.frozen {
            Some(vals) => {
                let v = vals
                    .get(k)
                    .ok_or_else(|| shape_err("stop_gradient", format!("no frozen value #{k}")))?;
                if v.shape() != self.value(x).shape() {
                    return Err(shape_err(
                        "stop_gradient",
                        format!("frozen {:?} vs {:?}", v.shape(), self.value(x).shape()),
                    ));
                }
                v.clone()
            }
            None => self.value(x).clone(),
        };
        self.push("stop_gradient", value, Op::StopGrad, false)
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if suffix_of(sb, sa) {
            Ok(sa.to_vec())
        } else if suffix_of(sa, sb) {
            Ok(sb.to_vec())
        } else {
            Err(shape_err(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        kind: Op,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(op, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(da[i % da.len()], db[i % db.len()])).collect();
        let rg = self.rg(&[a, b]);
        self.push(op, Tensor::new(shape, data)?, kind, rg)
    }

    /// Elementwise sum; the shorter operand is repeated over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `num / (den + eps)`, elementwise with leading-axis broadcast.
    pub fn div_eps(&mut self, num: Var, den: Var, eps: f64) -> Result<Var> {
        self.binary("div_eps", num, den, |x, y| x / (y + eps), Op::DivEps { num, den, eps })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x]);
        self.push("scale", value, Op::Scale(x, k), rg)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v + k);
        let rg = self.rg(&[x]);
        self.push("add_scalar", value, Op::AddScalar(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push("sum", value, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over one axis of a rank-2 tensor (rank-1 input reduces to a scalar).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        match (t.rank(), axis) {
            (1, 0) => self.sum(x),
            (2, 0 | 1) => {
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let d = t.data();
                let value = if axis == 0 {
                    let mut out = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            out[j] += d[i * c + j];
                        }
                    }
                    Tensor::vector(out)
                } else {
                    Tensor::vector((0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect())
                };
                let rg = self.rg(&[x]);
                self.push("sum_axis", value, Op::SumAxis(x, axis), rg)
            }
            _ => Err(shape_err("sum_axis", format!("axis {axis} of {:?}", t.shape()))),
        }
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .value(x)
            .shape()
            .get(axis)
            .ok_or_else(|| shape_err("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(f64) -> f64, kind: Op) -> Result<Var> {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(op, value, kind, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.max_const(x, 0.0)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    /// `max(x, floor)` elementwise. The subgradient at the kink is 0.
    pub fn max_const(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary("max_const", x, |v| v.max(floor), Op::MaxConst { x, floor })
    }

    /// Softmax over the last axis of `x / tau`.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        if tau <= 0.0 {
            return Err(shape_err("softmax", format!("temperature must be positive, got {tau}")));
        }
        let t = self.value(x);
        let width = *t.shape().last().ok_or_else(|| shape_err("softmax", "scalar input".into()))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(width) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = ((*v - m) / tau).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("softmax", value, Op::Softmax { x, tau }, rg)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} of {base:?}")));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Scales row `i` of a rank-2 `x` by `s[i]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if tx.rank() != 2 || ts.rank() != 1 || ts.len() != tx.shape()[0] {
            return Err(shape_err("row_scale", format!("{:?} by {:?}", tx.shape(), ts.shape())));
        }
        let c = tx.shape()[1];
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * ts.data()[i / c.max(1)])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, s]);
        self.push("row_scale", value, Op::RowScale(x, s), rg)
    }

    /// Constant sparse matrix times a rank-2 (or rank-1, treated as one column) tensor.
    pub fn spmm(&mut self, m: &Rc<SparseMatrix>, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, width) = match t.rank() {
            1 => (t.len(), 1),
            2 => (t.shape()[0], t.shape()[1]),
            _ => return Err(shape_err("spmm", format!("{:?}", t.shape()))),
        };
        if rows != m.cols() {
            return Err(shape_err("spmm", format!("{}x{} times {:?}", m.rows(), m.cols(), t.shape())));
        }
        let out = m.mul_dense(t.data(), width);
        let shape = if t.rank() == 1 {
            vec![m.rows()]
        } else {
            vec![m.rows(), width]
        };
        let rg = self.rg(&[x]);
        self.push("spmm", Tensor::new(shape, out)?, Op::SpMM(Rc::clone(m), x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    /// Column `j` of a rank-2 tensor as a vector.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || j >= t.shape()[1] {
            return Err(shape_err("column", format!("column {j} of {:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let value = Tensor::vector((0..r).map(|i| t.data()[i * c + j]).collect());
        let rg = self.rg(&[x]);
        self.push("column", value, Op::Column(x, j), rg)
    }

    /// Stacks equal-length vectors as the columns of a matrix.
    pub fn stack_columns(&mut self, cols: &[Var]) -> Result<Var> {
        let mut reshaped = Vec::with_capacity(cols.len());
        for &c in cols {
            let n = self.value(c).len();
            reshaped.push(self.reshape(c, vec![n, 1])?);
        }
        self.concat(&reshaped, 1)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Per-element distance of every hinge input to its kink, in recording order.
    pub fn hinge_margins(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::MaxConst { x, floor } = node.op {
                out.extend(self.value(x).data().iter().map(|v| v - floor));
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                if !g.is_finite() {
                    return Err(AutodiffError::NonFiniteGradient { node: id });
                }
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduces a broadcast gradient back onto an operand of `len` elements.
    fn unbroadcast(&self, v: Var, full: Vec<f64>) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        let len = self.value(v).len();
        if full.len() == len {
            return Tensor::new(shape, full).expect("same size");
        }
        let mut out = vec![0.0; len];
        for (i, g) in full.into_iter().enumerate() {
            out[i % len] += g;
        }
        Tensor::new(shape, out).expect("reduced size")
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                for &v in &[*a, *b] {
                    if self.requires_grad(v) {
                        let t = self.unbroadcast(v, gd.to_vec());
                        self.accumulate(grads, v, t);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    let t = self.unbroadcast(*a, gd.to_vec());
                    self.accumulate(grads, *a, t);
                }
                if self.requires_grad(*b) {
                    let t = self.unbroadcast(*b, gd.iter().map(|v| -v).collect());
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let full = gd.iter().enumerate().map(|(i, g)| g * db[i % db.len()]).collect();
                    let t = self.unbroadcast(*a, full);
                    self.accumulate(grads, *a, t);
                }
                if self.requires_grad(*b) {
                    let full = gd.iter().enumerate().map(|(i, g)| g * da[i % da.len()]).collect();
                    let t = self.unbroadcast(*b, full);
                    self.accumulate(grads, *b, t);
                }
            }
            Op::DivEps { num, den, eps } => {
                let (dn, dd) = (self.value(*num).data(), self.value(*den).data());
                if self.requires_grad(*num) {
                    let full = gd
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g / (dd[i % dd.len()] + eps))
                        .collect();
                    let t = self.unbroadcast(*num, full);
                    self.accumulate(grads, *num, t);
                }
                if self.requires_grad(*den) {
                    let full = gd
                        .iter()
                        .enumerate()
                        .map(|(i, g)| {
                            let d = dd[i % dd.len()] + eps;
                            -g * dn[i % dn.len()] / (d * d)
                        })
                        .collect();
                    let t = self.unbroadcast(*den, full);
                    self.accumulate(grads, *den, t);
                }
            }
            Op::Scale(x, k) => {
                let t = g.map(|v| v * k);
                self.accumulate(grads, *x, t);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let t = Tensor::new(self.value(*x).shape().to_vec(), gd.to_vec())?;
                self.accumulate(grads, *x, t);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    // dA = G Bᵀ
                    let mut out = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gd[i * n + j] * tb.data()[p * n + j];
                            }
                            out[i * k + p] = s;
                        }
                    }
                    self.accumulate(grads, *a, Tensor::matrix(m, k, out)?);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ G
                    let mut out = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let row = &mut out[p * n..(p + 1) * n];
                            for (o, gv) in row.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                                *o += av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::matrix(k, n, out)?);
                }
            }
            Op::SumAll(x) => {
                let t = Tensor::full(self.value(*x).shape(), g.item());
                self.accumulate(grads, *x, t);
            }
            Op::SumAxis(x, axis) => {
                let s = self.value(*x).shape().to_vec();
                let (r, c) = (s[0], s[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = if *axis == 0 { gd[j] } else { gd[i] };
                    }
                }
                self.accumulate(grads, *x, Tensor::new(s, out)?);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let t = elementwise(g, |i, gv| gv * y[i] * (1.0 - y[i]));
                self.accumulate(grads, *x, t);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let t = elementwise(g, |i, gv| gv * (1.0 - y[i] * y[i]));
                self.accumulate(grads, *x, t);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let t = elementwise(g, |i, gv| 2.0 * gv * xv[i]);
                self.accumulate(grads, *x, t);
            }
            Op::Sqrt(x) => {
                let y = node.value.data();
                // sqrt has no derivative at 0; use 0 there.
                let t = elementwise(g, |i, gv| if y[i] > 0.0 { gv / (2.0 * y[i]) } else { 0.0 });
                self.accumulate(grads, *x, t);
            }
            Op::MaxConst { x, floor } => {
                let xv = self.value(*x).data();
                let t = elementwise(g, |i, gv| if xv[i] > *floor { gv } else { 0.0 });
                self.accumulate(grads, *x, t);
            }
            Op::Softmax { x, tau } => {
                let y = node.value.data();
                let width = *node.value.shape().last().expect("softmax rank >= 1");
                let mut out = vec![0.0; y.len()];
                for (r, (yr, gr)) in y.chunks(width).zip(gd.chunks(width)).enumerate() {
                    let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..width {
                        out[r * width + j] = yr[j] * (gr[j] - dotp) / tau;
                    }
                }
                let t = Tensor::new(node.value.shape().to_vec(), out)?;
                self.accumulate(grads, *x, t);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total_block = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let ps = self.value(*p).shape().to_vec();
                    let block = ps[*axis] * inner;
                    if self.requires_grad(*p) {
                        let mut out = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let start = o * total_block + offset;
                            out.extend_from_slice(&gd[start..start + block]);
                        }
                        self.accumulate(grads, *p, Tensor::new(ps, out)?);
                    }
                    offset += block;
                }
            }
            Op::RowScale(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let c = tx.shape()[1];
                if self.requires_grad(*x) {
                    let t = elementwise(g, |i, gv| gv * ts.data()[i / c.max(1)]);
                    self.accumulate(grads, *x, t);
                }
                if self.requires_grad(*s) {
                    let mut out = vec![0.0; ts.len()];
                    for (i, (gv, xv)) in gd.iter().zip(tx.data()).enumerate() {
                        out[i / c.max(1)] += gv * xv;
                    }
                    self.accumulate(grads, *s, Tensor::vector(out));
                }
            }
            Op::SpMM(m, x) => {
                let tx = self.value(*x);
                let width = if tx.rank() == 1 { 1 } else { tx.shape()[1] };
                let out = m.mul_dense_transposed(gd, width);
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), out)?);
            }
            Op::Column(x, j) => {
                let s = self.value(*x).shape().to_vec();
                let (r, c) = (s[0], s[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c + j] = gd[i];
                }
                self.accumulate(grads, *x, Tensor::new(s, out)?);
            }
        }
        Ok(())
    }
}

fn elementwise(g: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
    let data = g.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}
