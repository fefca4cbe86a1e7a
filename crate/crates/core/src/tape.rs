//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only list of nodes. Every forward op evaluates
//! eagerly, stores its output value and the handles of its inputs, and
//! returns a [`Var`]. Because nodes are only ever appended, the node list is
//! already in topological order and [`Tape::backward`] is a single reverse
//! sweep that visits each node once.
//!
//! Tapes are cheap and meant to be rebuilt for every training step.
//!
//! ```
//! use fsban_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.mean(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! let g = grads.get(x).unwrap();
//! assert!((g.data()[0] - 2.0 / 3.0).abs() < 1e-15);
//! ```

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, require_matrix};
use crate::{Error, Result, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    AddConst(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    PairwiseSqDist(Var, Var),
    Cosine(Var, Var),
    SoftmaxRows(Var, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node that required one.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.axpy(1.0, &g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "Var used with a foreign tape");
        &self.nodes[v.index()].value
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op_name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.index()].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Detached);
        }
        Ok(&self.nodes[v.index()].value)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let value = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)
        } else if tb.len() == 1 {
            let s = tb.item();
            ta.map(|x| f(x, s))
        } else if ta.len() == 1 {
            let s = ta.item();
            tb.map(|x| f(s, x))
        } else {
            return Err(shape_err(name, ta, tb));
        };
        self.push(name, value, op, &[a, b])
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

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (n, k) = require_matrix("matmul", ta)?;
        let (k2, m) = require_matrix("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = matmul_nn(ta.data(), tb.data(), n, k, m);
        self.push("matmul", Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), &[a, b])
    }

    /// Adds the row vector `row` (length m, or 1×m) to every row of `x` (n×m).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.check(x)?, self.check(row)?);
        let (n, m) = require_matrix("add_row", tx)?;
        if tr.len() != m {
            return Err(shape_err("add_row", tx, tr));
        }
        let mut out = tx.data().to_vec();
        for i in 0..n {
            for (o, &b) in out[i * m..(i + 1) * m].iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        self.push("add_row", Tensor::from_parts(vec![n, m], out), Op::AddRow(x, row), &[x, row])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.check(x)?.map(|a| if a > 0.0 { a } else { 0.0 });
        self.push("relu", v, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.check(x)?.map(libm::exp);
        self.push("exp", v, Op::Exp(x), &[x])
    }

    /// Natural log. Inputs must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        if t.data().iter().any(|&a| a <= 0.0) {
            return Err(Error::invalid("log of a non-positive value"));
        }
        let v = t.map(libm::log);
        self.push("log", v, Op::Log(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.check(x)?.map(libm::tanh);
        self.push("tanh", v, Op::Tanh(x), &[x])
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let v = self.check(x)?.map(|a| if a < floor { floor } else { a });
        self.push("clamp_min", v, Op::ClampMin(x, floor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.check(x)?.sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        if t.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = t.sum() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.check(x)?.map(|a| a * c);
        self.push("scale", v, Op::Scale(x, c), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.check(x)?.map(|a| a + c);
        self.push("add_const", v, Op::AddConst(x), &[x])
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (n, p) = require_matrix("concat_cols", ta)?;
        let (n2, q) = require_matrix("concat_cols", tb)?;
        if n != n2 {
            return Err(shape_err("concat_cols", ta, tb));
        }
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        self.push("concat_cols", Tensor::from_parts(vec![n, p + q], out), Op::ConcatCols(a, b), &[a, b])
    }

    /// `a` stacked on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let v = Tensor::vstack(&[ta, tb]).map_err(|_| shape_err("concat_rows", ta, tb))?;
        self.push("concat_rows", v, Op::ConcatRows(a, b), &[a, b])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.check(x)?;
        let (n, m) = require_matrix("slice_rows", t)?;
        if start > end || end > n {
            return Err(Error::invalid("slice_rows range out of bounds"));
        }
        let v = Tensor::from_parts(vec![end - start, m], t.data()[start * m..end * m].to_vec());
        self.push("slice_rows", v, Op::SliceRows(x, start), &[x])
    }

    /// Row `idx[i]` of `x` becomes row `i` of the output.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.check(x)?;
        let (n, m) = require_matrix("gather_rows", t)?;
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= n {
                return Err(Error::invalid("gather_rows index out of bounds"));
            }
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_parts(vec![idx.len(), m], out);
        self.push("gather_rows", v, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.check(x)?.reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    /// `out[i][j] = ‖a_i − b_j‖²` for `a` (n×m) and `b` (k×m).
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (n, m) = require_matrix("pairwise_sq_dist", ta)?;
        let (k, m2) = require_matrix("pairwise_sq_dist", tb)?;
        if m != m2 {
            return Err(shape_err("pairwise_sq_dist", ta, tb));
        }
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let ai = ta.row(i);
            for j in 0..k {
                out[i * k + j] = ai
                    .iter()
                    .zip(tb.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        let v = Tensor::from_parts(vec![n, k], out);
        self.push("pairwise_sq_dist", v, Op::PairwiseSqDist(a, b), &[a, b])
    }

    /// `out[i][j] = cos(a_i, b_j)`. Any all-zero row is an error.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (n, m) = require_matrix("cosine_similarity", ta)?;
        let (k, m2) = require_matrix("cosine_similarity", tb)?;
        if m != m2 {
            return Err(shape_err("cosine_similarity", ta, tb));
        }
        let na = row_norms(ta);
        let nb = row_norms(tb);
        if na.iter().chain(&nb).any(|&x| x == 0.0) {
            return Err(Error::degenerate("cosine similarity of an all-zero vector"));
        }
        let dots = matmul_nt(ta.data(), tb.data(), n, m, k);
        let mut out = dots;
        for i in 0..n {
            for j in 0..k {
                out[i * k + j] /= na[i] * nb[j];
            }
        }
        let v = Tensor::from_parts(vec![n, k], out);
        self.push("cosine_similarity", v, Op::Cosine(a, b), &[a, b])
    }

    /// Row-wise `softmax(x / tau)` with max subtraction.
    pub fn softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid("temperature must be positive"));
        }
        let t = self.check(x)?;
        let v = softmax_rows_value(t, 1.0 / tau);
        self.push("softmax_rows", v, Op::SoftmaxRows(x, 1.0 / tau), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.check(loss)?;
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.index()] = Some(Tensor::filled(lt.shape(), 1.0));

        for i in (0..=loss.index()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only report gradients for nodes that asked for them.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.index()].value
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.wants(v) {
            accumulate(&mut grads[v.index()], g);
        }
    }

    /// Gradient of a broadcastable binary op operand: reduce to a scalar
    /// when that operand was broadcast.
    fn reduce_like(v: &Tensor, g: Tensor) -> Tensor {
        if v.len() == g.len() {
            g.reshape(v.shape()).unwrap_or(g)
        } else {
            Tensor::filled(v.shape(), g.sum())
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    self.send(grads, *a, Self::reduce_like(va, g.clone()));
                }
                if self.wants(*b) {
                    self.send(grads, *b, Self::reduce_like(vb, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    self.send(grads, *a, Self::reduce_like(va, g.clone()));
                }
                if self.wants(*b) {
                    self.send(grads, *b, Self::reduce_like(vb, g.map(|x| -x)));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let other_times_g = |other: &Tensor| -> Tensor {
                    if other.len() == g.len() {
                        let d = g.data().iter().zip(other.data()).map(|(x, y)| x * y).collect();
                        Tensor::from_parts(g.shape().to_vec(), d)
                    } else {
                        let s = other.item();
                        g.map(|x| x * s)
                    }
                };
                if self.wants(*a) {
                    self.send(grads, *a, Self::reduce_like(va, other_times_g(vb)));
                }
                if self.wants(*b) {
                    self.send(grads, *b, Self::reduce_like(vb, other_times_g(va)));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (n, k) = (va.rows(), va.cols());
                let m = vb.cols();
                if self.wants(*a) {
                    let da = matmul_nt(g.data(), vb.data(), n, m, k);
                    self.send(grads, *a, Tensor::from_parts(vec![n, k], da));
                }
                if self.wants(*b) {
                    let db = matmul_tn(va.data(), g.data(), n, k, m);
                    self.send(grads, *b, Tensor::from_parts(vec![k, m], db));
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    self.send(grads, *x, g.clone());
                }
                if self.wants(*row) {
                    let vr = self.val(*row);
                    let m = vr.len();
                    let mut acc = vec![0.0; m];
                    for i in 0..g.rows() {
                        for (a, &b) in acc.iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                    self.send(grads, *row, Tensor::from_parts(vr.shape().to_vec(), acc));
                }
            }
            Op::Relu(x) => {
                let vx = self.val(*x);
                self.send(grads, *x, g.zip_map(vx, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
            }
            Op::Exp(x) => {
                self.send(grads, *x, g.zip_map(&node.value, |gi, yi| gi * yi));
            }
            Op::Log(x) => {
                let vx = self.val(*x);
                self.send(grads, *x, g.zip_map(vx, |gi, xi| gi / xi));
            }
            Op::Tanh(x) => {
                self.send(grads, *x, g.zip_map(&node.value, |gi, yi| gi * (1.0 - yi * yi)));
            }
            Op::ClampMin(x, floor) => {
                let vx = self.val(*x);
                let f = *floor;
                self.send(grads, *x, g.zip_map(vx, |gi, xi| if xi < f { 0.0 } else { gi }));
            }
            Op::Sum(x) => {
                let vx = self.val(*x);
                self.send(grads, *x, Tensor::filled(vx.shape(), g.item()));
            }
            Op::Mean(x) => {
                let vx = self.val(*x);
                self.send(grads, *x, Tensor::filled(vx.shape(), g.item() / vx.len() as f64));
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.send(grads, *x, g.map(|gi| gi * c));
            }
            Op::AddConst(x) => {
                self.send(grads, *x, g.clone());
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.val(*a).cols(), self.val(*b).cols());
                let n = g.rows();
                if self.wants(*a) {
                    let mut da = Vec::with_capacity(n * p);
                    for i in 0..n {
                        da.extend_from_slice(&g.row(i)[..p]);
                    }
                    self.send(grads, *a, Tensor::from_parts(vec![n, p], da));
                }
                if self.wants(*b) {
                    let mut db = Vec::with_capacity(n * q);
                    for i in 0..n {
                        db.extend_from_slice(&g.row(i)[p..]);
                    }
                    self.send(grads, *b, Tensor::from_parts(vec![n, q], db));
                }
            }
            Op::ConcatRows(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let split = va.len();
                if self.wants(*a) {
                    self.send(grads, *a, Tensor::from_parts(va.shape().to_vec(), g.data()[..split].to_vec()));
                }
                if self.wants(*b) {
                    self.send(grads, *b, Tensor::from_parts(vb.shape().to_vec(), g.data()[split..].to_vec()));
                }
            }
            Op::SliceRows(x, start) => {
                let vx = self.val(*x);
                let m = vx.cols();
                let mut dx = Tensor::zeros(vx.shape());
                dx.data_mut()[start * m..start * m + g.len()].copy_from_slice(g.data());
                self.send(grads, *x, dx);
            }
            Op::GatherRows(x, idx) => {
                let vx = self.val(*x);
                let m = vx.cols();
                let mut dx = Tensor::zeros(vx.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (d, &gv) in dx.data_mut()[i * m..(i + 1) * m].iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let vx = self.val(*x);
                self.send(grads, *x, Tensor::from_parts(vx.shape().to_vec(), g.data().to_vec()));
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (n, m) = (va.rows(), va.cols());
                let k = vb.rows();
                // d out_ij / d a_i = 2 (a_i − b_j), d / d b_j = −2 (a_i − b_j)
                let mut da = vec![0.0; n * m];
                let mut db = vec![0.0; k * m];
                for i in 0..n {
                    let ai = va.row(i);
                    for j in 0..k {
                        let gij = 2.0 * g.data()[i * k + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let bj = vb.row(j);
                        for t in 0..m {
                            let d = gij * (ai[t] - bj[t]);
                            da[i * m + t] += d;
                            db[j * m + t] -= d;
                        }
                    }
                }
                if self.wants(*a) {
                    self.send(grads, *a, Tensor::from_parts(vec![n, m], da));
                }
                if self.wants(*b) {
                    self.send(grads, *b, Tensor::from_parts(vec![k, m], db));
                }
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (n, m) = (va.rows(), va.cols());
                let k = vb.rows();
                let na = row_norms(va);
                let nb = row_norms(vb);
                let c = &node.value;
                // dc_ij/da_i = b_j/(|a_i||b_j|) − c_ij a_i/|a_i|²
                let mut da = vec![0.0; n * m];
                let mut db = vec![0.0; k * m];
                for i in 0..n {
                    let ai = va.row(i);
                    for j in 0..k {
                        let gij = g.data()[i * k + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let bj = vb.row(j);
                        let cij = c.data()[i * k + j];
                        let inv = 1.0 / (na[i] * nb[j]);
                        let ca = cij / (na[i] * na[i]);
                        let cb = cij / (nb[j] * nb[j]);
                        for t in 0..m {
                            da[i * m + t] += gij * (bj[t] * inv - ca * ai[t]);
                            db[j * m + t] += gij * (ai[t] * inv - cb * bj[t]);
                        }
                    }
                }
                if self.wants(*a) {
                    self.send(grads, *a, Tensor::from_parts(vec![n, m], da));
                }
                if self.wants(*b) {
                    self.send(grads, *b, Tensor::from_parts(vec![k, m], db));
                }
            }
            Op::SoftmaxRows(x, inv_tau) => {
                let y = &node.value;
                let (n, m) = (y.rows(), y.cols());
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dx[i * m + j] = inv_tau * yr[j] * (gr[j] - dot);
                    }
                }
                self.send(grads, *x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
        }
    }
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|i| libm::sqrt(t.row(i).iter().map(|x| x * x).sum()))
        .collect()
}

/// Row-wise softmax of `x * scale`, max-subtracted.
pub(crate) fn softmax_rows_value(x: &Tensor, scale: f64) -> Tensor {
    let (n, m) = (x.rows(), x.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = x.row(i);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let o = &mut out[i * m..(i + 1) * m];
        let mut s = 0.0;
        for (oj, &xj) in o.iter_mut().zip(row) {
            *oj = libm::exp((xj - mx) * scale);
            s += *oj;
        }
        for oj in o.iter_mut() {
            *oj /= s;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
