//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse append order and
//! accumulates vector-Jacobian products. The tape is rebuilt for every forward
//! pass; weight sharing falls out of binding the same [`Parameter`] once per
//! tape and using its handle as often as needed.
//!
//! ```
//! use heunflow::autodiff::Tape;
//! use heunflow::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let y = x.mul(x).unwrap().sum();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::{Ref, RefCell};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn eval(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    /// Multiplies the left operand by a constant; the right operand is ignored.
    Scale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCrossEntropy,
}

/// Loss target: dense values (MSE, or one-hot / soft rows for cross-entropy)
/// or one class index per row.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Values(&'a Tensor),
    Classes(&'a [usize]),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddBias(usize, usize),
    ConcatCols(usize, usize),
    SliceCols { src: usize, start: usize },
    Act(usize, Activation),
    Sum(usize),
    Mse { pred: usize, target: Tensor },
    SoftmaxCe { logits: usize, probs: Tensor, target: Tensor },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
}

/// Operation record for one forward pass. Confined to a single thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    inference: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &*self.value())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that only evaluates: every result is stored as an untracked
    /// constant and [`Tape::backward`] fails.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::default(),
            inference: true,
        }
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked leaf (an input or parameter we want gradients for).
    pub fn var(&self, value: Tensor) -> Var<'_> {
        let tracked = !self.inference;
        self.push(Op::Leaf, value, tracked)
    }

    /// Untracked leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    fn push(&self, op: Op, value: Tensor, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let (op, tracked) = if self.inference || !tracked {
            (Op::Leaf, false)
        } else {
            (op, true)
        };
        nodes.push(Node { op, value, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if self.inference {
            return Err(Error::InferenceTape);
        }
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::NotScalar(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::full(root_node.value.shape(), 1.0));

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].tracked {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.rows(), va.cols(), vb.cols());
            if nodes[*a].tracked {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, vb.data(), true, &mut da, 0.0);
                accumulate(grads, nodes, *a, Tensor::new(va.shape().to_vec(), da).unwrap());
            }
            if nodes[*b].tracked {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, va.data(), true, g.data(), false, &mut db, 0.0);
                accumulate(grads, nodes, *b, Tensor::new(vb.shape().to_vec(), db).unwrap());
            }
        }
        Op::Transpose(a) => accumulate(grads, nodes, *a, g.transpose()),
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let ga = g.zip_map(val(*b), "mul", |g, y| g * y).unwrap();
            let gb = g.zip_map(val(*a), "mul", |g, x| g * x).unwrap();
            accumulate(grads, nodes, *a, ga);
            accumulate(grads, nodes, *b, gb);
        }
        Op::Scale(a, c) => accumulate(grads, nodes, *a, g.map(|v| v * c)),
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::AddBias(x, b) => {
            accumulate(grads, nodes, *x, g.clone());
            let cols = g.cols();
            let mut gb = vec![0.0; cols];
            for r in 0..g.rows() {
                for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            let shape = val(*b).shape().to_vec();
            accumulate(grads, nodes, *b, Tensor::new(shape, gb).unwrap());
        }
        Op::ConcatCols(a, b) => {
            let wa = val(*a).cols();
            let wb = val(*b).cols();
            accumulate(grads, nodes, *a, g.col_block(0, wa));
            accumulate(grads, nodes, *b, g.col_block(wa, wb));
        }
        Op::SliceCols { src, start } => {
            let s = val(*src);
            let mut full = Tensor::zeros(s.shape());
            let (cols, width) = (s.cols(), g.cols());
            for r in 0..g.rows() {
                full.data_mut()[r * cols + start..r * cols + start + width]
                    .copy_from_slice(g.row(r));
            }
            accumulate(grads, nodes, *src, full);
        }
        Op::Act(a, kind) => {
            let dx = match kind {
                Activation::Identity => g.clone(),
                Activation::Sigmoid => g
                    .zip_map(&node.value, "sigmoid", |g, y| g * y * (1.0 - y))
                    .unwrap(),
                Activation::Tanh => g
                    .zip_map(&node.value, "tanh", |g, y| g * (1.0 - y * y))
                    .unwrap(),
                Activation::Relu => g
                    .zip_map(val(*a), "relu", |g, x| if x > 0.0 { g } else { 0.0 })
                    .unwrap(),
            };
            accumulate(grads, nodes, *a, dx);
        }
        Op::Sum(a) => {
            let s = g.data()[0];
            accumulate(grads, nodes, *a, Tensor::full(val(*a).shape(), s));
        }
        Op::Mse { pred, target } => {
            let p = val(*pred);
            let c = 2.0 * g.data()[0] / p.len() as f64;
            let d = p.zip_map(target, "mse", |p, t| c * (p - t)).unwrap();
            accumulate(grads, nodes, *pred, d);
        }
        Op::SoftmaxCe {
            logits,
            probs,
            target,
        } => {
            let rows = probs.rows();
            let cols = probs.cols();
            let c = g.data()[0] / rows as f64;
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                let t = target.row(r);
                let mass: f64 = t.iter().sum();
                for j in 0..cols {
                    d[r * cols + j] = c * (probs.row(r)[j] * mass - t[j]);
                }
            }
            let shape = val(*logits).shape().to_vec();
            accumulate(grads, nodes, *logits, Tensor::new(shape, d).unwrap());
        }
    }
}

/// Result of a backward pass: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` is tracked and
    /// reachable from the root.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::wrt`] but returns zeros for unreachable nodes.
    pub fn wrt_or_zero(&self, v: Var<'_>) -> Tensor {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn same_tape(&self, other: Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn tracked2(&self, other: Var<'_>) -> bool {
        self.is_tracked() || other.is_tracked()
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = self.value().matmul(&other.value())?;
        Ok(self
            .tape
            .push(Op::MatMul(self.id, other.id), out, self.tracked2(other)))
    }

    pub fn t(self) -> Var<'t> {
        let out = self.value().transpose();
        self.tape
            .push(Op::Transpose(self.id), out, self.is_tracked())
    }

    pub fn elementwise(self, kind: Elementwise, other: Var<'t>) -> Result<Var<'t>> {
        match kind {
            Elementwise::Add => self.add(other),
            Elementwise::Sub => self.sub(other),
            Elementwise::Mul => self.mul(other),
            Elementwise::Scale(c) => Ok(self.scale(c)),
        }
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = self.value().zip_map(&other.value(), "add", |a, b| a + b)?;
        Ok(self
            .tape
            .push(Op::Add(self.id, other.id), out, self.tracked2(other)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = self.value().zip_map(&other.value(), "sub", |a, b| a - b)?;
        Ok(self
            .tape
            .push(Op::Sub(self.id, other.id), out, self.tracked2(other)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = self.value().zip_map(&other.value(), "mul", |a, b| a * b)?;
        Ok(self
            .tape
            .push(Op::Mul(self.id, other.id), out, self.tracked2(other)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.tape.push(Op::Scale(self.id, c), out, self.is_tracked())
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.tape.push(Op::AddScalar(self.id), out, self.is_tracked())
    }

    /// Adds a bias vector (shape `[n]` or `[1, n]`) to every row of a
    /// `[batch, n]` matrix.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias);
        let out = {
            let x = self.value();
            let b = bias.value();
            if x.rank() != 2 || b.len() != x.cols() || b.rows() != 1 {
                return Err(Error::shape("add_bias", x.shape(), b.shape()));
            }
            let mut out = x.clone();
            let cols = x.cols();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % cols];
            }
            out
        };
        Ok(self
            .tape
            .push(Op::AddBias(self.id, bias.id), out, self.tracked2(bias)))
    }

    /// `[rows, a] ++ [rows, b] -> [rows, a + b]`.
    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let out = {
            let a = self.value();
            let b = other.value();
            if a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows() {
                return Err(Error::shape("concat_cols", a.shape(), b.shape()));
            }
            let (ca, cb) = (a.cols(), b.cols());
            let mut data = Vec::with_capacity(a.rows() * (ca + cb));
            for r in 0..a.rows() {
                data.extend_from_slice(a.row(r));
                data.extend_from_slice(b.row(r));
            }
            Tensor::matrix(a.rows(), ca + cb, data)?
        };
        Ok(self
            .tape
            .push(Op::ConcatCols(self.id, other.id), out, self.tracked2(other)))
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t>> {
        let out = {
            let v = self.value();
            if v.rank() != 2 || start + width > v.cols() {
                return Err(Error::shape("slice_cols", v.shape(), &[start, width]));
            }
            v.col_block(start, width)
        };
        Ok(self.tape.push(
            Op::SliceCols {
                src: self.id,
                start,
            },
            out,
            self.is_tracked(),
        ))
    }

    pub fn activation(self, kind: Activation) -> Var<'t> {
        let out = self.value().map(|v| kind.eval(v));
        self.tape.push(Op::Act(self.id, kind), out, self.is_tracked())
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.activation(Activation::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.activation(Activation::Tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.activation(Activation::Relu)
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(Op::Sum(self.id), out, self.is_tracked())
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn loss(self, kind: LossKind, target: Target<'_>) -> Result<Var<'t>> {
        match kind {
            LossKind::Mse => match target {
                Target::Values(t) => self.mse(t),
                Target::Classes(c) => {
                    let cols = self.value().cols();
                    self.mse(&one_hot(c, cols)?)
                }
            },
            LossKind::SoftmaxCrossEntropy => self.softmax_cross_entropy(target),
        }
    }

    /// Mean of squared differences over all elements.
    pub fn mse(self, target: &Tensor) -> Result<Var<'t>> {
        let loss = {
            let p = self.value();
            if p.shape() != target.shape() {
                return Err(Error::shape("mse", p.shape(), target.shape()));
            }
            let s: f64 = p
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            s / p.len() as f64
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }
        Ok(self.tape.push(
            Op::Mse {
                pred: self.id,
                target: target.clone(),
            },
            Tensor::scalar(loss),
            self.is_tracked(),
        ))
    }

    /// Row-wise softmax followed by the mean negative log-likelihood.
    pub fn softmax_cross_entropy(self, target: Target<'_>) -> Result<Var<'t>> {
        let (loss, probs, dense) = {
            let z = self.value();
            if z.rank() != 2 && z.rank() != 1 {
                return Err(Error::shape("softmax_cross_entropy", z.shape(), &[]));
            }
            let (rows, cols) = (z.rows(), z.cols());
            let dense = match target {
                Target::Classes(c) => {
                    if c.len() != rows {
                        return Err(Error::shape("softmax_cross_entropy", z.shape(), &[c.len()]));
                    }
                    one_hot(c, cols)?
                }
                Target::Values(t) => {
                    if t.rows() != rows || t.cols() != cols {
                        return Err(Error::shape("softmax_cross_entropy", z.shape(), t.shape()));
                    }
                    Tensor::matrix(rows, cols, t.data().to_vec())?
                }
            };
            let mut probs = vec![0.0; rows * cols];
            let mut total = 0.0;
            for r in 0..rows {
                let row = z.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                for (j, &v) in row.iter().enumerate() {
                    let logp = v - lse;
                    probs[r * cols + j] = logp.exp();
                    total -= dense.row(r)[j] * logp;
                }
            }
            (
                total / rows as f64,
                Tensor::matrix(rows, cols, probs)?,
                dense,
            )
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }
        Ok(self.tape.push(
            Op::SoftmaxCe {
                logits: self.id,
                probs,
                target: dense,
            },
            Tensor::scalar(loss),
            self.is_tracked(),
        ))
    }
}

pub fn one_hot(classes: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes.len() * n_classes];
    for (r, &c) in classes.iter().enumerate() {
        if c >= n_classes {
            return Err(Error::InvalidArgument(format!(
                "class {c} outside 0..{n_classes}"
            )));
        }
        data[r * n_classes + c] = 1.0;
    }
    Tensor::matrix(classes.len(), n_classes, data)
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every parameter of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape` as a tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.params.iter().map(|p| tape.var(p.value.clone())).collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the gradients of the bound handles into `Parameter::grad`.
    pub fn accumulate(&mut self, bound: &Bound<'_>, grads: &Gradients) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.wrt(*v) {
                p.grad
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
}

/// Parameter handles for one tape.
#[derive(Debug, Clone)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}
