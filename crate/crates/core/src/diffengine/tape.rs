use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;
use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::graph::RoadNetwork;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    MatMul(usize, usize),
    MatVec(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>, usize),
    Slice { input: usize, axis: usize, start: usize },
    Transpose(usize),
    Reshape(usize),
    Broadcast(usize),
    GraphGradient(usize, Arc<RoadNetwork>),
    GraphDivergence(usize, Arc<RoadNetwork>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Records primitive applications for one reverse pass.
///
/// Nodes are appended in evaluation order, so the record is topologically
/// sorted by construction. A tape supports exactly one call to
/// [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Result of a reverse pass: gradients for every differentiable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: BTreeMap<String, Tensor>,
    loss: f64,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&v.id)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "subtract",
        Op::Mul(..) => "hadamard",
        Op::Scale(..) => "scale",
        Op::MatMul(..) => "matmul",
        Op::MatVec(..) => "matvec",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::Softplus(_) => "softplus",
        Op::Exp(_) => "exp",
        Op::Log(_) => "log",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Concat(..) => "concat",
        Op::Slice { .. } => "slice",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::Broadcast(_) => "broadcast",
        Op::GraphGradient(..) => "graph_gradient",
        Op::GraphDivergence(..) => "graph_divergence",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Splits `shape` around `axis` into (outer, axis length, inner) sizes.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For every output element of a broadcast, the flat index into the input.
fn broadcast_index(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let dims: Vec<usize> = (0..rank).map(|k| if k < pad { 1 } else { in_shape[k - pad] }).collect();
    let mut in_strides = vec![0; rank];
    let mut acc = 1;
    for k in (0..rank).rev() {
        in_strides[k] = if dims[k] == 1 { 0 } else { acc };
        acc *= dims[k];
    }
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        out.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, param: Option<String>) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name(&op)));
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param,
        });
        Ok(Var { tape: self, id })
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(value, Op::Leaf, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.push(value, Op::Leaf, false, None)
    }

    /// Leaf bound to a named parameter; its gradient is reported by name.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var<'_>> {
        let value = store.get(name)?.clone();
        self.push(value, Op::Leaf, true, Some(name.to_string()))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "at least one input", 0))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis < {}", base.len()), axis));
        }
        let mut axis_total = 0;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| self.value(p.id)).collect();
        for v in &values {
            let s = v.shape();
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !same {
                return Err(shape_err("concat", &base, s));
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let requires = parts.iter().any(|p| self.requires(p.id));
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(Tensor::new(shape, data)?, Op::Concat(ids, axis), requires, None)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients accumulate additively where a value fans out. Intermediate
    /// values are released afterwards; leaves keep theirs.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::BackwardTwice);
        }
        let loss_value = Rc::clone(&inner.nodes[loss.id].value);
        if loss_value.len() != 1 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(loss_value.shape()));
        let loss_value = loss_value.data()[0];

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(nodes, node, &g, &mut grads);
            // leave non-leaf gradients released
        }

        let mut out = Gradients {
            loss: loss_value,
            ..Default::default()
        };
        for (id, node) in nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                continue;
            }
            let g = grads
                .get_mut(id)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            if let Some(name) = &node.param {
                match out.params.get_mut(name) {
                    Some(acc) => acc.axpy(1.0, &g)?,
                    None => {
                        out.params.insert(name.clone(), g.clone());
                    }
                }
            }
            out.leaves.insert(id, g);
        }
        let released = Rc::new(Tensor::scalar(0.0));
        for node in inner.nodes.iter_mut() {
            if !matches!(node.op, Op::Leaf) {
                node.value = Rc::clone(&released);
            }
        }
        Ok(out)
    }

    /// Runs backward and stores the result in `store`'s gradient slots,
    /// overwriting previous contents.
    pub fn backward_into(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<f64> {
        let grads = self.backward(loss)?;
        store.zero_grad();
        store.accumulate(&grads)?;
        Ok(grads.loss())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, contribution: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Gradient of a broadcast binary operand: reduce to a scalar if it was
/// broadcast, otherwise pass through.
fn reduce_if(broadcast: bool, shape: &[usize], g: Tensor) -> Tensor {
    if broadcast {
        let s = g.sum();
        Tensor::full(shape, s)
    } else {
        g
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let ga = reduce_if(*bc == Bcast::Lhs, val(*a).shape(), g.clone());
            accumulate(grads, nodes, *a, ga);
            let gb = reduce_if(*bc == Bcast::Rhs, val(*b).shape(), g.scaled(sign));
            accumulate(grads, nodes, *b, gb);
        }
        Op::Mul(a, b, bc) => {
            let (va, vb) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                let ga = match bc {
                    Bcast::None => zip_with(g, vb, |x, y| x * y),
                    Bcast::Lhs => Tensor::full(va.shape(), g.dot(vb)),
                    Bcast::Rhs => g.scaled(vb.data()[0]),
                };
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                let gb = match bc {
                    Bcast::None => zip_with(g, va, |x, y| x * y),
                    Bcast::Rhs => Tensor::full(vb.shape(), g.dot(va)),
                    Bcast::Lhs => g.scaled(va.data()[0]),
                };
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.scaled(*c)),
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            if nodes[*a].requires_grad {
                // dA = dC · Bᵀ
                let mut ga = Tensor::zeros(&[m, k]);
                gemm(m, n, k, g.data(), n, 1, vb.data(), 1, n, ga.data_mut(), false);
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].requires_grad {
                // dB = Aᵀ · dC
                let mut gb = Tensor::zeros(&[k, n]);
                gemm(k, m, n, va.data(), 1, k, g.data(), n, 1, gb.data_mut(), false);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::MatVec(a, x) => {
            let (va, vx) = (val(*a), val(*x));
            let (m, k) = (va.shape()[0], va.shape()[1]);
            if nodes[*a].requires_grad {
                let mut ga = Tensor::zeros(&[m, k]);
                for i in 0..m {
                    let gi = g.data()[i];
                    for (dst, xv) in ga.data_mut()[i * k..(i + 1) * k].iter_mut().zip(vx.data()) {
                        *dst = gi * xv;
                    }
                }
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*x].requires_grad {
                let mut gx = Tensor::zeros(&[k]);
                gemm(k, m, 1, va.data(), 1, k, g.data(), 1, 1, gx.data_mut(), false);
                accumulate(grads, nodes, *x, gx);
            }
        }
        Op::Tanh(a) => {
            let ga = zip_with(g, &node.value, |gi, y| gi * (1.0 - y * y));
            accumulate(grads, nodes, *a, ga);
        }
        Op::Sigmoid(a) => {
            let ga = zip_with(g, &node.value, |gi, y| gi * y * (1.0 - y));
            accumulate(grads, nodes, *a, ga);
        }
        Op::Softplus(a) => {
            let ga = zip_with(g, val(*a), |gi, x| gi * sigmoid(x));
            accumulate(grads, nodes, *a, ga);
        }
        Op::Exp(a) => {
            let ga = zip_with(g, &node.value, |gi, y| gi * y);
            accumulate(grads, nodes, *a, ga);
        }
        Op::Log(a) => {
            let ga = zip_with(g, val(*a), |gi, x| gi / x);
            accumulate(grads, nodes, *a, ga);
        }
        Op::Sum(a) => {
            let ga = Tensor::full(val(*a).shape(), g.data()[0]);
            accumulate(grads, nodes, *a, ga);
        }
        Op::Mean(a) => {
            let va = val(*a);
            let ga = Tensor::full(va.shape(), g.data()[0] / va.len() as f64);
            accumulate(grads, nodes, *a, ga);
        }
        Op::Concat(ids, axis) => {
            let (outer, _, inner) = axis_split(g.shape(), *axis);
            let mut offset = 0;
            let row = g.len() / outer;
            for &id in ids {
                let shape = val(id).shape();
                let chunk = shape[*axis] * inner;
                if nodes[id].requires_grad {
                    let mut part = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        part.extend_from_slice(&g.data()[o * row + offset..o * row + offset + chunk]);
                    }
                    accumulate(grads, nodes, id, Tensor::new(shape.to_vec(), part).expect("shape"));
                }
                offset += chunk;
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = val(*input).shape();
            let (outer, len, inner) = axis_split(in_shape, *axis);
            let width = g.shape()[*axis] * inner;
            let mut ga = Tensor::zeros(in_shape);
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                ga.data_mut()[dst..dst + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
            }
            accumulate(grads, nodes, *input, ga);
        }
        Op::Transpose(a) => {
            let (r, c) = (g.shape()[0], g.shape()[1]);
            let mut ga = Tensor::zeros(&[c, r]);
            for i in 0..r {
                for j in 0..c {
                    ga.data_mut()[j * r + i] = g.data()[i * c + j];
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Reshape(a) => {
            let ga = g.clone().reshaped(val(*a).shape()).expect("same length");
            accumulate(grads, nodes, *a, ga);
        }
        Op::Broadcast(a) => {
            let in_shape = val(*a).shape();
            let mut ga = Tensor::zeros(in_shape);
            for (o, i) in broadcast_index(in_shape, g.shape()).into_iter().enumerate() {
                ga.data_mut()[i] += g.data()[o];
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::GraphGradient(a, net) => {
            // adjoint of the gradient is the divergence
            let in_shape = val(*a).shape();
            let mut ga = Tensor::zeros(in_shape);
            net.divergence_raw(g.data(), *in_shape.last().unwrap(), ga.data_mut());
            accumulate(grads, nodes, *a, ga);
        }
        Op::GraphDivergence(a, net) => {
            let in_shape = val(*a).shape();
            let mut ga = Tensor::zeros(in_shape);
            net.gradient_raw(g.data(), *in_shape.last().unwrap(), ga.data_mut());
            accumulate(grads, nodes, *a, ga);
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Current value (a released placeholder after backward for
    /// intermediates).
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    fn requires(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let out = self.value().map(f);
        self.tape.push(out, op, self.requires(), None)
    }

    fn binary(&self, other: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, mk: impl Fn(Bcast) -> Op) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (bc, out) = if a.shape() == b.shape() {
            (Bcast::None, zip_with(&a, &b, f))
        } else if a.len() == 1 {
            let x = a.data()[0];
            (Bcast::Lhs, b.map(|y| f(x, y)))
        } else if b.len() == 1 {
            let y = b.data()[0];
            (Bcast::Rhs, a.map(|x| f(x, y)))
        } else {
            return Err(shape_err(name, a.shape(), b.shape()));
        };
        let requires = self.requires() || other.requires();
        self.tape.push(out, mk(bc), requires, None)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, "add", |x, y| x + y, |bc| Op::Add(a, b, bc))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, "subtract", |x, y| x - y, |bc| Op::Sub(a, b, bc))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, "hadamard", |x, y| x * y, |bc| Op::Mul(a, b, bc))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    /// Adds a constant scalar.
    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        let k = self.tape.constant(Tensor::scalar(c))?;
        self.add(k)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, a.data(), k, 1, b.data(), n, 1, out.data_mut(), false);
        let requires = self.requires() || other.requires();
        self.tape.push(out, Op::MatMul(self.id, other.id), requires, None)
    }

    pub fn matvec(&self, x: Var<'t>) -> Result<Var<'t>> {
        let (a, v) = (self.value(), x.value());
        if a.rank() != 2 || v.rank() != 1 || a.shape()[1] != v.shape()[0] {
            return Err(shape_err("matvec", a.shape(), v.shape()));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let mut out = Tensor::zeros(&[m]);
        gemm(m, k, 1, a.data(), k, 1, v.data(), 1, 1, out.data_mut(), false);
        let requires = self.requires() || x.requires();
        self.tape.push(out, Op::MatVec(self.id, x.id), requires, None)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.requires(), None)
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.sum() / v.len() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), self.requires(), None)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.rank() || start >= end || end > v.shape()[axis] {
            return Err(shape_err("slice", v.shape(), (axis, start, end)));
        }
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let width = (end - start) * inner;
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let src = o * len * inner + start * inner;
            data.extend_from_slice(&v.data()[src..src + width]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = end - start;
        let op = Op::Slice {
            input: self.id,
            axis,
            start,
        };
        self.tape.push(Tensor::new(shape, data)?, op, self.requires(), None)
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(shape_err("transpose", "rank 2", v.shape()));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j * r + i] = v.data()[i * c + j];
            }
        }
        self.tape.push(out, Op::Transpose(self.id), self.requires(), None)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = (*self.value()).clone().reshaped(shape)?;
        self.tape.push(out, Op::Reshape(self.id), self.requires(), None)
    }

    /// Explicit broadcast: missing leading dims and size-1 dims expand to
    /// `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let in_shape = v.shape();
        let pad = shape.len().checked_sub(in_shape.len()).ok_or_else(|| shape_err("broadcast", in_shape, shape))?;
        let ok = in_shape.iter().enumerate().all(|(k, &d)| d == 1 || d == shape[k + pad]);
        if !ok {
            return Err(shape_err("broadcast", in_shape, shape));
        }
        let data = broadcast_index(in_shape, shape).into_iter().map(|i| v.data()[i]).collect();
        self.tape.push(Tensor::new(shape.to_vec(), data)?, Op::Broadcast(self.id), self.requires(), None)
    }

    /// Edge gradient of a node field `[.., n, d]`.
    pub fn graph_gradient(&self, net: &Arc<RoadNetwork>) -> Result<Var<'t>> {
        let out = net.gradient_tensor(&self.value())?;
        self.tape.push(out, Op::GraphGradient(self.id, Arc::clone(net)), self.requires(), None)
    }

    /// Node divergence of an edge field `[.., |E|, d]`.
    pub fn graph_divergence(&self, net: &Arc<RoadNetwork>) -> Result<Var<'t>> {
        let out = net.divergence_tensor(&self.value())?;
        self.tape.push(out, Op::GraphDivergence(self.id, Arc::clone(net)), self.requires(), None)
    }

    /// `Δz` recorded as divergence of gradient.
    pub fn graph_laplacian(&self, net: &Arc<RoadNetwork>) -> Result<Var<'t>> {
        self.graph_gradient(net)?.graph_divergence(net)
    }
}
