//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order and carry their value eagerly.
//! Gradients are produced by appending the vector-Jacobian products as new
//! nodes ([`Graph::grad`]), so a gradient is itself differentiable and
//! second-order quantities such as `∇_θ ‖∇_x L‖²` come from a second call.
//! [`Graph::backward`] runs the same pass, copies the values out, and drops
//! the recorded nodes again.

use std::cell::Cell;
use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Duration;

#[cfg(not(target_arch = "wasm32"))]
use std::time::Instant;
#[cfg(target_arch = "wasm32")]
use web_time::Instant;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

thread_local! {
    static THREAD_BACKWARD: Cell<Duration> = const { Cell::new(Duration::ZERO) };
}

/// Total time this thread has spent in backward passes of any graph.
pub fn thread_backward_time() -> Duration {
    THREAD_BACKWARD.with(Cell::get)
}

fn charge_backward(d: Duration) {
    THREAD_BACKWARD.with(|c| c.set(c.get() + d));
}

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable parameter (θ).
    Param,
    /// Model input (x).
    Input,
    /// Constant with no gradient.
    Const,
    /// Value copied out of an unrecorded backward pass.
    Detached,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Op {
    Leaf(LeafKind),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `scale * a + shift`
    Affine(usize, f64, f64),
    /// tensor times rank-0 node
    ScaleBy(usize, usize),
    /// `[n,m] + [m]`
    AddRow(usize, usize),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Relu(usize),
    ReluMask(usize),
    Sign(usize),
    Softplus(usize),
    Sigmoid(usize),
    LseRows(usize),
    SoftmaxRows(usize),
    RowSum(usize),
    ColSum(usize),
    /// `[n,m]` with row i scaled by `s[i]`
    ScaleRows(usize, usize),
    BroadcastRows(usize, usize),
    BroadcastCols(usize, usize),
    Fill(usize),
    Sum(usize),
    Mean(usize),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    Dot(usize, usize),
    L2Norm(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine(..) => "affine",
            Op::ScaleBy(..) => "scale_by",
            Op::AddRow(..) => "add_row",
            Op::MatMul { .. } => "matmul",
            Op::Relu(_) => "relu",
            Op::ReluMask(_) => "relu_mask",
            Op::Sign(_) => "sign",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::LseRows(_) => "logsumexp_rows",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::RowSum(_) => "row_sum",
            Op::ColSum(_) => "col_sum",
            Op::ScaleRows(..) => "scale_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Fill(_) => "fill",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Dot(..) => "dot",
            Op::L2Norm(_) => "l2_norm",
        }
    }

    fn parents(&self) -> ([usize; 2], usize) {
        use Op::*;
        match *self {
            Leaf(_) => ([0, 0], 0),
            Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | Div(a, b)
            | ScaleBy(a, b)
            | AddRow(a, b)
            | ScaleRows(a, b)
            | Dot(a, b) => ([a, b], 2),
            MatMul { a, b, .. } => ([a, b], 2),
            Affine(a, ..)
            | Relu(a)
            | ReluMask(a)
            | Sign(a)
            | Softplus(a)
            | Sigmoid(a)
            | LseRows(a)
            | SoftmaxRows(a)
            | RowSum(a)
            | ColSum(a)
            | BroadcastRows(a, _)
            | BroadcastCols(a, _)
            | Fill(a)
            | Sum(a)
            | Mean(a)
            | Abs(a)
            | Square(a)
            | Sqrt(a)
            | L2Norm(a) => ([a, 0], 1),
        }
    }

    /// Ops whose derivative is zero almost everywhere.
    fn is_piecewise_constant(&self) -> bool {
        matches!(self, Op::ReluMask(_) | Op::Sign(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Origin {
    Forward,
    Backward,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    /// Output shape for `Fill` / broadcast nodes.
    target: Option<Vec<usize>>,
    origin: Origin,
}

#[derive(Debug)]
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    recording_backward: bool,
    backward_time: Duration,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording_backward: false,
            backward_time: Duration::ZERO,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Wall time spent inside [`Graph::grad`] and [`Graph::backward`].
    pub fn backward_time(&self) -> Duration {
        self.backward_time
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index as usize >= self.nodes.len() {
            return Err(Error::ForeignVar {
                index: v.index as usize,
            });
        }
        Ok(v.index as usize)
    }

    fn var(&self, index: usize) -> Var {
        Var {
            graph: self.id,
            index: index as u32,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("value(): foreign variable");
        &self.nodes[v.index as usize].value
    }

    pub fn leaf_kind(&self, v: Var) -> Option<LeafKind> {
        match self.nodes.get(v.index as usize)?.op {
            Op::Leaf(k) => Some(k),
            _ => None,
        }
    }

    pub fn leaf(&mut self, kind: LeafKind, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            value,
            target: None,
            origin: if self.recording_backward {
                Origin::Backward
            } else {
                Origin::Forward
            },
        });
        self.var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(LeafKind::Param, value)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(LeafKind::Input, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(LeafKind::Const, value)
    }

    pub fn detached(&mut self, value: Tensor) -> Var {
        self.leaf(LeafKind::Detached, value)
    }

    fn push(&mut self, op: Op, target: Option<Vec<usize>>) -> Result<Var> {
        let index = self.nodes.len();
        let value = compute(&self.nodes, index, &op, target.as_deref())?;
        if !value.all_finite() {
            return Err(Error::Overflow {
                node: index,
                op: op.name(),
            });
        }
        let origin = if self.recording_backward {
            Origin::Backward
        } else {
            Origin::Forward
        };
        self.nodes.push(Node {
            op,
            value,
            target,
            origin,
        });
        Ok(self.var(index))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Add(self.check(a)?, self.check(b)?);
        self.push(op, None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Sub(self.check(a)?, self.check(b)?);
        self.push(op, None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Mul(self.check(a)?, self.check(b)?);
        self.push(op, None)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Div(self.check(a)?, self.check(b)?);
        self.push(op, None)
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let op = Op::Affine(self.check(a)?, scale, shift);
        self.push(op, None)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 0.0)
    }

    /// Multiplies a tensor by a rank-0 node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let op = Op::ScaleBy(self.check(a)?, self.check(s)?);
        self.push(op, None)
    }

    /// Adds a length-`m` row vector to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let op = Op::AddRow(self.check(a)?, self.check(bias)?);
        self.push(op, None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let op = Op::MatMul {
            a: self.check(a)?,
            b: self.check(b)?,
            ta,
            tb,
        };
        self.push(op, None)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let op = Op::Relu(self.check(a)?);
        self.push(op, None)
    }

    /// Indicator `a > 0`; treated as constant by differentiation.
    pub fn relu_mask(&mut self, a: Var) -> Result<Var> {
        let op = Op::ReluMask(self.check(a)?);
        self.push(op, None)
    }

    pub fn sign(&mut self, a: Var) -> Result<Var> {
        let op = Op::Sign(self.check(a)?);
        self.push(op, None)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let op = Op::Softplus(self.check(a)?);
        self.push(op, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let op = Op::Sigmoid(self.check(a)?);
        self.push(op, None)
    }

    /// Row-wise log-sum-exp: `[n, m] -> [n]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let op = Op::LseRows(self.check(a)?);
        self.push(op, None)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let op = Op::SoftmaxRows(self.check(a)?);
        self.push(op, None)
    }

    /// `[n, m] -> [n]`
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let op = Op::RowSum(self.check(a)?);
        self.push(op, None)
    }

    /// `[n, m] -> [m]`
    pub fn col_sum(&mut self, a: Var) -> Result<Var> {
        let op = Op::ColSum(self.check(a)?);
        self.push(op, None)
    }

    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let op = Op::ScaleRows(self.check(a)?, self.check(s)?);
        self.push(op, None)
    }

    /// `[m] -> [n, m]`
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let op = Op::BroadcastRows(self.check(a)?, n);
        self.push(op, None)
    }

    /// `[n] -> [n, m]`
    pub fn broadcast_cols(&mut self, a: Var, m: usize) -> Result<Var> {
        let op = Op::BroadcastCols(self.check(a)?, m);
        self.push(op, None)
    }

    /// Broadcasts a single-element node to `shape`.
    pub fn fill(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        let op = Op::Fill(self.check(s)?);
        self.push(op, Some(shape.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let op = Op::Sum(self.check(a)?);
        self.push(op, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let op = Op::Mean(self.check(a)?);
        self.push(op, None)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let op = Op::Abs(self.check(a)?);
        self.push(op, None)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let op = Op::Square(self.check(a)?);
        self.push(op, None)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let op = Op::Sqrt(self.check(a)?);
        self.push(op, None)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Dot(self.check(a)?, self.check(b)?);
        self.push(op, None)
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let op = Op::L2Norm(self.check(a)?);
        self.push(op, None)
    }

    /// Rebinds leaves and recomputes every derived node in order.
    ///
    /// Nodes recorded by [`Graph::grad`] are recomputed too, so recorded
    /// gradients track the new bindings.
    pub fn replay(&mut self, bindings: &[(Var, Tensor)]) -> Result<()> {
        for (v, t) in bindings {
            let i = self.check(*v)?;
            if !matches!(self.nodes[i].op, Op::Leaf(_)) {
                return Err(Error::Contract(format!("node {i} is not a leaf")));
            }
            if self.nodes[i].value.shape() != t.shape() {
                return Err(Error::Shape {
                    node: i,
                    op: "leaf",
                    detail: format!(
                        "rebinding {:?} with {:?}",
                        self.nodes[i].value.shape(),
                        t.shape()
                    ),
                });
            }
            self.nodes[i].value = t.clone();
        }
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op;
            if matches!(op, Op::Leaf(_)) {
                continue;
            }
            let value = compute(&self.nodes, i, &op, self.nodes[i].target.as_deref())?;
            if !value.all_finite() {
                return Err(Error::Overflow {
                    node: i,
                    op: op.name(),
                });
            }
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Replays with `bindings` and returns the value of `root`.
    pub fn forward_eval(&mut self, root: Var, bindings: &[(Var, Tensor)]) -> Result<Tensor> {
        let r = self.check(root)?;
        self.replay(bindings)?;
        Ok(self.nodes[r].value.clone())
    }

    /// Gradients of a scalar `root` with respect to `wrt`, recorded as graph
    /// nodes so they can be differentiated again.
    pub fn grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let start = Instant::now();
        let was = self.recording_backward;
        self.recording_backward = true;
        let out = self.grad_inner(root, wrt);
        self.recording_backward = was;
        let spent = start.elapsed();
        self.backward_time += spent;
        charge_backward(spent);
        out
    }

    /// Gradient values of a scalar `root`; nothing is left in the graph.
    pub fn backward(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let start = Instant::now();
        let mark = self.nodes.len();
        let was = self.recording_backward;
        self.recording_backward = true;
        let out = self.grad_inner(root, wrt).map(|vars| {
            vars.into_iter()
                .map(|v| self.nodes[v.index as usize].value.clone())
                .collect()
        });
        self.recording_backward = was;
        self.nodes.truncate(mark);
        let spent = start.elapsed();
        self.backward_time += spent;
        charge_backward(spent);
        out
    }

    /// `∇_wrt root` where `root` was built from gradients recorded by
    /// [`Graph::grad`] (double backpropagation).
    ///
    /// Fails when `root` contains no recorded gradient, or when it reaches a
    /// [`LeafKind::Detached`] value: the dependence of such a value on the
    /// parameters was never recorded, so its contribution would silently be
    /// dropped.
    pub fn higher_order_grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let r = self.check(root)?;
        let anc = self.ancestors(r);
        let mut has_backward = false;
        for (i, &is_anc) in anc.iter().enumerate() {
            if !is_anc {
                continue;
            }
            let node = &self.nodes[i];
            if node.op == Op::Leaf(LeafKind::Detached) {
                return Err(Error::Contract(format!(
                    "node {i} is a detached gradient; record it with Graph::grad to differentiate through it"
                )));
            }
            has_backward |= node.origin == Origin::Backward && !matches!(node.op, Op::Leaf(_));
        }
        if !has_backward {
            return Err(Error::Contract(
                "root does not depend on any recorded gradient computation".into(),
            ));
        }
        self.grad(root, wrt)
    }

    fn ancestors(&self, root: usize) -> Vec<bool> {
        let mut anc = vec![false; root + 1];
        anc[root] = true;
        for i in (0..=root).rev() {
            if !anc[i] {
                continue;
            }
            let (ps, n) = self.nodes[i].op.parents();
            for &p in &ps[..n] {
                anc[p] = true;
            }
        }
        anc
    }

    fn grad_inner(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let r = self.check(root)?;
        if self.nodes[r].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "gradient root must be scalar, node {r} has shape {:?}",
                self.nodes[r].value.shape()
            )));
        }
        let mut targets = Vec::with_capacity(wrt.len());
        for &w in wrt {
            targets.push(self.check(w)?);
        }
        // Nodes that depend on at least one requested leaf.
        let mut live = vec![false; r + 1];
        for &t in &targets {
            if t <= r {
                live[t] = true;
            }
        }
        for i in 0..=r {
            let op = self.nodes[i].op;
            if live[i] || op.is_piecewise_constant() {
                continue;
            }
            let (ps, n) = op.parents();
            live[i] = ps[..n].iter().any(|&p| live[p]);
        }

        let mut grads: Vec<Option<Var>> = vec![None; r + 1];
        if live[r] {
            let one = self.constant(Tensor::full(self.nodes[r].value.shape(), 1.0));
            grads[r] = Some(one);
        }
        for i in (0..=r).rev() {
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op;
            if matches!(op, Op::Leaf(_)) || op.is_piecewise_constant() {
                continue;
            }
            let (ps, n) = op.parents();
            let need = [n > 0 && live[ps[0]], n > 1 && live[ps[1]]];
            if !need[0] && !need[1] {
                continue;
            }
            let contribs = self.vjp(i, op, g, need)?;
            for (slot, c) in contribs.into_iter().enumerate() {
                let Some(c) = c else { continue };
                let p = ps[slot];
                grads[p] = Some(match grads[p] {
                    Some(acc) => self.add(acc, c)?,
                    None => c,
                });
            }
        }

        let mut out = Vec::with_capacity(targets.len());
        for &t in &targets {
            let v = match grads.get(t).copied().flatten() {
                Some(v) => v,
                None => self.constant(Tensor::zeros(self.nodes[t].value.shape())),
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Vector-Jacobian products of node `i` for the parents flagged in `need`,
    /// expressed with differentiable graph ops.
    fn vjp(&mut self, i: usize, op: Op, g: Var, need: [bool; 2]) -> Result<[Option<Var>; 2]> {
        let y = self.var(i);
        let gid = self.id;
        let v = move |k: usize| Var {
            graph: gid,
            index: k as u32,
        };
        let mut out = [None, None];
        match op {
            Op::Leaf(_) | Op::ReluMask(_) | Op::Sign(_) => {}
            Op::Add(..) => {
                out = [need[0].then_some(g), need[1].then_some(g)];
            }
            Op::Sub(..) => {
                out[0] = need[0].then_some(g);
                if need[1] {
                    out[1] = Some(self.neg(g)?);
                }
            }
            Op::Mul(a, b) => {
                if need[0] {
                    out[0] = Some(self.mul(g, v(b))?);
                }
                if need[1] {
                    out[1] = Some(self.mul(g, v(a))?);
                }
            }
            Op::Div(_, b) => {
                if need[0] {
                    out[0] = Some(self.div(g, v(b))?);
                }
                if need[1] {
                    let gy = self.mul(g, y)?;
                    let q = self.div(gy, v(b))?;
                    out[1] = Some(self.neg(q)?);
                }
            }
            Op::Affine(_, scale, _) => {
                out[0] = Some(self.affine(g, scale, 0.0)?);
            }
            Op::ScaleBy(a, s) => {
                if need[0] {
                    out[0] = Some(self.scale_by(g, v(s))?);
                }
                if need[1] {
                    out[1] = Some(self.dot(g, v(a))?);
                }
            }
            Op::AddRow(..) => {
                out[0] = need[0].then_some(g);
                if need[1] {
                    out[1] = Some(self.col_sum(g)?);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                if need[0] {
                    out[0] = Some(if ta {
                        self.matmul_t(v(b), g, tb, true)?
                    } else {
                        self.matmul_t(g, v(b), false, !tb)?
                    });
                }
                if need[1] {
                    out[1] = Some(if tb {
                        self.matmul_t(g, v(a), true, ta)?
                    } else {
                        self.matmul_t(v(a), g, !ta, false)?
                    });
                }
            }
            Op::Relu(a) => {
                let m = self.relu_mask(v(a))?;
                out[0] = Some(self.mul(g, m)?);
            }
            Op::Softplus(a) => {
                let s = self.sigmoid(v(a))?;
                out[0] = Some(self.mul(g, s)?);
            }
            Op::Sigmoid(_) => {
                let one_minus = self.affine(y, -1.0, 1.0)?;
                let d = self.mul(y, one_minus)?;
                out[0] = Some(self.mul(g, d)?);
            }
            Op::LseRows(a) => {
                let p = self.softmax_rows(v(a))?;
                out[0] = Some(self.scale_rows(p, g)?);
            }
            Op::SoftmaxRows(_) => {
                let gy = self.mul(g, y)?;
                let s = self.row_sum(gy)?;
                let ys = self.scale_rows(y, s)?;
                out[0] = Some(self.sub(gy, ys)?);
            }
            Op::RowSum(a) => {
                let m = self.nodes[a].value.shape()[1];
                out[0] = Some(self.broadcast_cols(g, m)?);
            }
            Op::ColSum(a) => {
                let n = self.nodes[a].value.shape()[0];
                out[0] = Some(self.broadcast_rows(g, n)?);
            }
            Op::ScaleRows(a, s) => {
                if need[0] {
                    out[0] = Some(self.scale_rows(g, v(s))?);
                }
                if need[1] {
                    let ga = self.mul(g, v(a))?;
                    out[1] = Some(self.row_sum(ga)?);
                }
            }
            Op::BroadcastRows(..) => {
                out[0] = Some(self.col_sum(g)?);
            }
            Op::BroadcastCols(..) => {
                out[0] = Some(self.row_sum(g)?);
            }
            Op::Fill(s) => {
                let total = self.sum(g)?;
                let shape = self.nodes[s].value.shape().to_vec();
                out[0] = Some(if shape.is_empty() {
                    total
                } else {
                    self.fill(total, &shape)?
                });
            }
            Op::Sum(a) => {
                let shape = self.nodes[a].value.shape().to_vec();
                out[0] = Some(self.fill(g, &shape)?);
            }
            Op::Mean(a) => {
                let shape = self.nodes[a].value.shape().to_vec();
                let n = self.nodes[a].value.numel() as f64;
                let gs = self.affine(g, 1.0 / n, 0.0)?;
                out[0] = Some(self.fill(gs, &shape)?);
            }
            Op::Abs(a) => {
                let s = self.sign(v(a))?;
                out[0] = Some(self.mul(g, s)?);
            }
            Op::Square(a) => {
                let two_a = self.affine(v(a), 2.0, 0.0)?;
                out[0] = Some(self.mul(g, two_a)?);
            }
            Op::Sqrt(_) => {
                let half = self.affine(g, 0.5, 0.0)?;
                out[0] = Some(self.div(half, y)?);
            }
            Op::Dot(a, b) => {
                if need[0] {
                    out[0] = Some(self.scale_by(v(b), g)?);
                }
                if need[1] {
                    out[1] = Some(self.scale_by(v(a), g)?);
                }
            }
            Op::L2Norm(a) => {
                let q = self.div(g, y)?;
                out[0] = Some(self.scale_by(v(a), q)?);
            }
        }
        Ok(out)
    }
}

fn shape_err(node: usize, op: &Op, detail: String) -> Error {
    Error::Shape {
        node,
        op: op.name(),
        detail,
    }
}

fn same_shape(node: usize, op: &Op, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            node,
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn matrix(node: usize, op: &Op, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| shape_err(node, op, format!("expected a matrix, got {:?}", t.shape())))
}

pub(crate) fn softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn lse(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn compute(nodes: &[Node], node: usize, op: &Op, target: Option<&[usize]>) -> Result<Tensor> {
    let val = |i: usize| &nodes[i].value;
    let t = match *op {
        Op::Leaf(_) => unreachable!("leaves are not computed"),
        Op::Add(a, b) => {
            same_shape(node, op, val(a), val(b))?;
            val(a).zip_map(val(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            same_shape(node, op, val(a), val(b))?;
            val(a).zip_map(val(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            same_shape(node, op, val(a), val(b))?;
            val(a).zip_map(val(b), |x, y| x * y)
        }
        Op::Div(a, b) => {
            same_shape(node, op, val(a), val(b))?;
            val(a).zip_map(val(b), |x, y| x / y)
        }
        Op::Affine(a, scale, shift) => val(a).map(|x| scale * x + shift),
        Op::ScaleBy(a, s) => {
            if val(s).rank() != 0 {
                return Err(shape_err(
                    node,
                    op,
                    format!("scale must be rank 0, got {:?}", val(s).shape()),
                ));
            }
            let k = val(s).item();
            val(a).map(|x| x * k)
        }
        Op::AddRow(a, b) => {
            let (n, m) = matrix(node, op, val(a))?;
            if val(b).shape() != [m] {
                return Err(shape_err(
                    node,
                    op,
                    format!("bias {:?} for matrix [{n}, {m}]", val(b).shape()),
                ));
            }
            let bias = val(b).data();
            let mut out = val(a).clone();
            for r in 0..n {
                for (o, bv) in out.row_mut(r).iter_mut().zip(bias) {
                    *o += bv;
                }
            }
            out
        }
        Op::MatMul { a, b, ta, tb } => tensor::matmul(val(a), val(b), ta, tb).ok_or_else(|| {
            shape_err(
                node,
                op,
                format!(
                    "cannot multiply {:?}{} by {:?}{}",
                    val(a).shape(),
                    if ta { "ᵀ" } else { "" },
                    val(b).shape(),
                    if tb { "ᵀ" } else { "" }
                ),
            )
        })?,
        Op::Relu(a) => val(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::ReluMask(a) => val(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Sign(a) => val(a).map(sign),
        Op::Softplus(a) => val(a).map(softplus),
        Op::Sigmoid(a) => val(a).map(sigmoid),
        Op::LseRows(a) => {
            let (n, _) = matrix(node, op, val(a))?;
            Tensor::from_raw(vec![n], (0..n).map(|r| lse(val(a).row(r))).collect())
        }
        Op::SoftmaxRows(a) => {
            let (n, m) = matrix(node, op, val(a))?;
            let mut out = Vec::with_capacity(n * m);
            for r in 0..n {
                let row = val(a).row(r);
                let l = lse(row);
                out.extend(row.iter().map(|v| (v - l).exp()));
            }
            Tensor::from_raw(vec![n, m], out)
        }
        Op::RowSum(a) => {
            let (n, _) = matrix(node, op, val(a))?;
            Tensor::from_raw(
                vec![n],
                (0..n).map(|r| val(a).row(r).iter().sum()).collect(),
            )
        }
        Op::ColSum(a) => {
            let (n, m) = matrix(node, op, val(a))?;
            let mut out = vec![0.0; m];
            for r in 0..n {
                for (o, v) in out.iter_mut().zip(val(a).row(r)) {
                    *o += v;
                }
            }
            Tensor::from_raw(vec![m], out)
        }
        Op::ScaleRows(a, s) => {
            let (n, _) = matrix(node, op, val(a))?;
            if val(s).shape() != [n] {
                return Err(shape_err(
                    node,
                    op,
                    format!("row scales {:?} for {n} rows", val(s).shape()),
                ));
            }
            let mut out = val(a).clone();
            for (r, &k) in val(s).data().iter().enumerate() {
                out.row_mut(r).iter_mut().for_each(|x| *x *= k);
            }
            out
        }
        Op::BroadcastRows(a, n) => {
            if val(a).rank() != 1 {
                return Err(shape_err(
                    node,
                    op,
                    format!("expected a vector, got {:?}", val(a).shape()),
                ));
            }
            let m = val(a).numel();
            let mut out = Vec::with_capacity(n * m);
            for _ in 0..n {
                out.extend_from_slice(val(a).data());
            }
            Tensor::from_raw(vec![n, m], out)
        }
        Op::BroadcastCols(a, m) => {
            if val(a).rank() != 1 {
                return Err(shape_err(
                    node,
                    op,
                    format!("expected a vector, got {:?}", val(a).shape()),
                ));
            }
            let n = val(a).numel();
            let mut out = Vec::with_capacity(n * m);
            for &v in val(a).data() {
                out.extend(std::iter::repeat_n(v, m));
            }
            Tensor::from_raw(vec![n, m], out)
        }
        Op::Fill(s) => {
            if val(s).numel() != 1 {
                return Err(shape_err(
                    node,
                    op,
                    format!("fill source {:?} is not a single value", val(s).shape()),
                ));
            }
            Tensor::full(target.unwrap_or(&[]), val(s).item())
        }
        Op::Sum(a) => Tensor::scalar(val(a).sum()),
        Op::Mean(a) => {
            if val(a).numel() == 0 {
                return Err(shape_err(node, op, "mean of empty tensor".into()));
            }
            Tensor::scalar(val(a).sum() / val(a).numel() as f64)
        }
        Op::Abs(a) => val(a).map(f64::abs),
        Op::Square(a) => val(a).map(|x| x * x),
        Op::Sqrt(a) => {
            if let Some(&bad) = val(a).data().iter().find(|&&x| x < 0.0) {
                return Err(shape_err(node, op, format!("sqrt of negative value {bad}")));
            }
            val(a).map(f64::sqrt)
        }
        Op::Dot(a, b) => {
            same_shape(node, op, val(a), val(b))?;
            Tensor::scalar(
                val(a)
                    .data()
                    .iter()
                    .zip(val(b).data())
                    .map(|(x, y)| x * y)
                    .sum(),
            )
        }
        Op::L2Norm(a) => Tensor::scalar(val(a).data().iter().map(|x| x * x).sum::<f64>().sqrt()),
    };
    Ok(t)
}
