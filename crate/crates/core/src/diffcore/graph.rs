//! Tape-based reverse-mode differentiation over batched dense tensors.
//!
//! Every primitive evaluates eagerly when it is recorded, so building the
//! graph is the first forward pass. The recorded topology can be replayed on
//! new input values with [`Graph::forward_eval`], and [`Graph::backward`]
//! propagates adjoints of a designated scalar node back to every node that
//! depends on an input.
//!
//! Binary elementwise primitives accept a right operand with the same shape
//! as the left one, or broadcast along rows (`1×c`), columns (`r×1`) or both
//! (`1×1`).

use super::kernels::{
    chol_product_row, chol_product_row_backward, sigmoid, softplus, sos_backward_raw,
    sos_forward_raw, sos_param_count, tri_solve_row, tri_solve_row_backward, ABS_POW_FLOOR,
};
use super::tensor::Tensor;
use crate::linalg::tri_len;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("domain error in {op}: argument {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("expected {expected} inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("input {index} has shape {got:?}, expected {expected:?}")]
    InputShape {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("backward requires a 1x1 output, got {0:?}")]
    NotScalar((usize, usize)),
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Recip(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    AbsPow(Var, Var),
    SumRows(Var),
    SumAll(Var),
    MatMul(Var, Var),
    Trace(Var),
    SelectCols(Var, Vec<usize>),
    Concat(Vec<Var>),
    SumOfSigmoids { z: Var, raw: Var, k: usize, range: f64 },
    CholProduct { l: Var, d: usize },
    TriSolve { l: Var, rhs: Var, s: usize, t: usize },
    QuadTrace { y: Var, a: Var, s: usize, t: usize },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast_kind(a: &Tensor, b: &Tensor) -> Bcast {
    let (r, c) = a.shape();
    match b.shape() {
        s if s == (r, c) => Bcast::Same,
        (1, 1) => Bcast::Scalar,
        (1, bc) if bc == c => Bcast::Row,
        (br, 1) if br == r => Bcast::Col,
        s => panic!("cannot broadcast {s:?} onto {:?}", (r, c)),
    }
}

#[inline]
fn bval(b: &Tensor, kind: Bcast, r: usize, c: usize) -> f64 {
    match kind {
        Bcast::Same => b.get(r, c),
        Bcast::Row => b.get(0, c),
        Bcast::Col => b.get(r, 0),
        Bcast::Scalar => b.get(0, 0),
    }
}

#[inline]
fn bacc(gb: &mut Tensor, kind: Bcast, r: usize, c: usize, v: f64) {
    let (rr, cc) = match kind {
        Bcast::Same => (r, c),
        Bcast::Row => (0, c),
        Bcast::Col => (r, 0),
        Bcast::Scalar => (0, 0),
    };
    let cur = gb.get(rr, cc);
    gb.set(rr, cc, cur + v);
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let kind = bcast_kind(a, b);
    Tensor::from_fn(a.rows(), a.cols(), |r, c| f(a.get(r, c), bval(b, kind, r, c)))
}

/// Adjoints of every node after a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
    /// Abs-power evaluations whose argument fell below the clamp floor.
    pub clamped_abs_pow: usize,
}

impl Gradients {
    /// Adjoint of `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.adjoints[v.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.adjoints[v.0].as_ref()
    }
}

/// A recorded expression graph.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: Vec<Var>,
    outputs: Vec<Var>,
    error: Option<DiffError>,
}

impl Graph {
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

    /// First domain error seen during evaluation, if any.
    pub fn status(&self) -> Result<(), DiffError> {
        match &self.error {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    pub fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    /// Registers `v` as a graph output returned by [`Graph::forward_eval`].
    pub fn mark_output(&mut self, v: Var) {
        self.outputs.push(v);
    }

    pub fn outputs(&self) -> &[Var] {
        &self.outputs
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Input,
            value,
            requires_grad: true,
        });
        self.inputs.push(v);
        v
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            requires_grad: false,
        });
        v
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, op: Op) -> Var {
        let (value, err) = self.compute(&op);
        if let Some(e) = err {
            self.error.get_or_insert(e);
        }
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        v
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Input | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::AbsPow(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Recip(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Tanh(a)
            | Op::SumRows(a)
            | Op::SumAll(a)
            | Op::Trace(a)
            | Op::SelectCols(a, _) => vec![*a],
            Op::Concat(vs) => vs.clone(),
            Op::SumOfSigmoids { z, raw, .. } => vec![*z, *raw],
            Op::CholProduct { l, .. } => vec![*l],
            Op::TriSolve { l, rhs, .. } => vec![*l, *rhs],
            Op::QuadTrace { y, a, .. } => vec![*y, *a],
        }
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn compute(&self, op: &Op) -> (Tensor, Option<DiffError>) {
        let mut err = None;
        let out = match op {
            Op::Input | Op::Constant => unreachable!("leaves are not recomputed"),
            Op::Add(a, b) => binary(self.val(*a), self.val(*b), |x, y| x + y),
            Op::Sub(a, b) => binary(self.val(*a), self.val(*b), |x, y| x - y),
            Op::Mul(a, b) => binary(self.val(*a), self.val(*b), |x, y| x * y),
            Op::Neg(a) => self.val(*a).map(|x| -x),
            Op::Scale(a, c) => self.val(*a).map(|x| c * x),
            Op::Offset(a, c) => self.val(*a).map(|x| x + c),
            Op::Recip(a) => {
                let t = self.val(*a);
                if let Some(&x) = t.as_slice().iter().find(|x| **x == 0.0 || !x.is_finite()) {
                    err = Some(DiffError::Domain { op: "reciprocal", value: x });
                }
                t.map(|x| 1.0 / x)
            }
            Op::Exp(a) => self.val(*a).map(f64::exp),
            Op::Log(a) => {
                let t = self.val(*a);
                if let Some(&x) = t.as_slice().iter().find(|x| !(**x > 0.0)) {
                    err = Some(DiffError::Domain { op: "log", value: x });
                }
                t.map(f64::ln)
            }
            Op::Sigmoid(a) => self.val(*a).map(sigmoid),
            Op::Softplus(a) => self.val(*a).map(softplus),
            Op::Tanh(a) => self.val(*a).map(f64::tanh),
            Op::AbsPow(a, p) => binary(self.val(*a), self.val(*p), |x, q| {
                x.abs().max(ABS_POW_FLOOR).powf(q)
            }),
            Op::SumRows(a) => {
                let t = self.val(*a);
                Tensor::from_fn(t.rows(), 1, |r, _| t.row(r).iter().sum())
            }
            Op::SumAll(a) => Tensor::scalar(self.val(*a).sum()),
            Op::MatMul(a, b) => self.val(*a).matmul(self.val(*b)),
            Op::Trace(a) => {
                let t = self.val(*a);
                assert_eq!(t.rows(), t.cols(), "trace of non-square tensor");
                Tensor::scalar((0..t.rows()).map(|i| t.get(i, i)).sum())
            }
            Op::SelectCols(a, idx) => {
                let t = self.val(*a);
                Tensor::from_fn(t.rows(), idx.len(), |r, c| t.get(r, idx[c]))
            }
            Op::Concat(vs) => {
                let rows = self.val(vs[0]).rows();
                let cols: usize = vs.iter().map(|v| self.val(*v).cols()).sum();
                let mut out = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let mut off = 0;
                    for v in vs {
                        let src = self.val(*v);
                        assert_eq!(src.rows(), rows, "concat row mismatch");
                        out.row_mut(r)[off..off + src.cols()].copy_from_slice(src.row(r));
                        off += src.cols();
                    }
                }
                out
            }
            Op::SumOfSigmoids { z, raw, k, range } => {
                let (z, raw) = (self.val(*z), self.val(*raw));
                let dim = z.cols();
                let p = sos_param_count(*k);
                assert_eq!(raw.shape(), (z.rows(), dim * p), "sum-of-sigmoids parameter shape");
                let mut out = Tensor::zeros(z.rows(), 2 * dim);
                for r in 0..z.rows() {
                    let (zr, pr) = (z.row(r), raw.row(r));
                    let orow = out.row_mut(r);
                    for i in 0..dim {
                        let (y, ld) = sos_forward_raw(zr[i], &pr[i * p..(i + 1) * p], *k, *range);
                        orow[i] = y;
                        orow[dim + i] = ld;
                    }
                }
                out
            }
            Op::CholProduct { l, d } => {
                let l = self.val(*l);
                assert_eq!(l.cols(), tri_len(*d));
                let mut out = Tensor::zeros(l.rows(), tri_len(*d));
                for r in 0..l.rows() {
                    chol_product_row(l.row(r), *d, out.row_mut(r));
                }
                out
            }
            Op::TriSolve { l, rhs, s, t } => {
                let (l, b) = (self.val(*l), self.val(*rhs));
                assert_eq!(l.cols(), tri_len(*s));
                assert_eq!(b.shape(), (l.rows(), s * t));
                let mut out = Tensor::zeros(l.rows(), s * t);
                for r in 0..l.rows() {
                    let lr = l.row(r);
                    if let Some(i) = (0..*s).find(|&i| lr[crate::linalg::diag_index(i)] == 0.0) {
                        err = Some(DiffError::Domain {
                            op: "triangular solve",
                            value: lr[crate::linalg::diag_index(i)],
                        });
                    }
                    tri_solve_row(lr, b.row(r), *s, *t, out.row_mut(r));
                }
                out
            }
            Op::QuadTrace { y, a, s, t } => {
                let (y, a) = (self.val(*y), self.val(*a));
                assert_eq!(a.shape(), (*t, *t));
                assert_eq!(y.cols(), s * t);
                // rows of Y stacked as (B·s)×t, then row-wise <y_r, A y_r>.
                let stacked = Tensor::from_vec(y.rows() * s, *t, y.as_slice().to_vec());
                let ay = stacked.matmul(a);
                Tensor::from_fn(y.rows(), 1, |r, _| {
                    let lo = r * s * t;
                    let hi = lo + s * t;
                    y.as_slice()[lo..hi]
                        .iter()
                        .zip(&ay.as_slice()[lo..hi])
                        .map(|(p, q)| p * q)
                        .sum()
                })
            }
        };
        (out, err)
    }

    // ---- primitive constructors ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Offset(a, c))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.push(Op::Recip(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push(Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.push(Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }

    /// `max(|x|, 1e-12)^q` with a constant (broadcastable) exponent.
    pub fn abs_pow(&mut self, x: Var, exponent: Var) -> Var {
        assert!(
            !self.nodes[exponent.0].requires_grad,
            "abs_pow exponent must be constant"
        );
        self.push(Op::AbsPow(x, exponent))
    }

    /// Per-row sum, `r×c -> r×1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.push(Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.push(Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.val(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }

    pub fn trace(&mut self, a: Var) -> Var {
        self.push(Op::Trace(a))
    }

    pub fn select_cols(&mut self, a: Var, cols: Vec<usize>) -> Var {
        self.push(Op::SelectCols(a, cols))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        self.push(Op::Concat(parts.to_vec()))
    }

    /// Conditional sum-of-sigmoids transform. `z` is `B×D`, `raw` holds the
    /// per-dimension raw parameters (`B×(D·(3k+3))`). Output is `B×2D`: the
    /// transformed values followed by the log-derivatives.
    pub fn sum_of_sigmoids(&mut self, z: Var, raw: Var, k: usize, range: f64) -> Var {
        self.push(Op::SumOfSigmoids { z, raw, k, range })
    }

    /// Packed `L Lᵀ` per row.
    pub fn chol_product(&mut self, l: Var, d: usize) -> Var {
        self.push(Op::CholProduct { l, d })
    }

    /// Per-row `L⁻¹ B` for packed `L` (s×s) and row-major `B` (s×t).
    pub fn tri_solve(&mut self, l: Var, rhs: Var, s: usize, t: usize) -> Var {
        self.push(Op::TriSolve { l, rhs, s, t })
    }

    /// Per-row `Tr(Y A Yᵀ)` for row-major `Y` (s×t) and a constant
    /// symmetric `A` (t×t).
    pub fn quad_trace(&mut self, y: Var, a: Var, s: usize, t: usize) -> Var {
        assert!(!self.nodes[a.0].requires_grad, "quad_trace matrix must be constant");
        self.push(Op::QuadTrace { y, a, s, t })
    }

    // ---- evaluation ----

    /// Replays the graph with new values for the inputs (in creation order)
    /// and returns the values of the marked outputs.
    pub fn forward_eval(&mut self, inputs: &[Tensor]) -> Result<Vec<Tensor>, DiffError> {
        if inputs.len() != self.inputs.len() {
            return Err(DiffError::InputCount {
                expected: self.inputs.len(),
                got: inputs.len(),
            });
        }
        for (index, (v, t)) in self.inputs.iter().zip(inputs).enumerate() {
            let expected = self.nodes[v.0].value.shape();
            if t.shape() != expected {
                return Err(DiffError::InputShape {
                    index,
                    expected,
                    got: t.shape(),
                });
            }
        }
        for (v, t) in self.inputs.clone().into_iter().zip(inputs) {
            self.nodes[v.0].value = t.clone();
        }
        self.error = None;
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input | Op::Constant) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let (value, err) = self.compute(&op);
            if let Some(e) = err {
                self.error.get_or_insert(e);
            }
            self.nodes[i].value = value;
        }
        self.status()?;
        Ok(self.outputs.iter().map(|v| self.val(*v).clone()).collect())
    }

    /// Reverse sweep from the scalar node `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients, DiffError> {
        self.status()?;
        let shape = self.val(output).shape();
        if shape != (1, 1) {
            return Err(DiffError::NotScalar(shape));
        }
        let n = output.0 + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Tensor::scalar(1.0));
        let mut clamped = 0;

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut adj, &mut clamped);
            adj[i] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            clamped_abs_pow: clamped,
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut adj[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn elementwise_back(&self, adj: &mut [Option<Tensor>], a: Var, g: &Tensor, f: impl Fn(f64, f64) -> f64) {
        if self.needs(a) {
            let x = self.val(a);
            let ga = Tensor::from_fn(x.rows(), x.cols(), |r, c| f(g.get(r, c), x.get(r, c)));
            Self::accumulate(adj, a, ga);
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        adj: &mut [Option<Tensor>],
        clamped: &mut usize,
    ) {
        match op {
            Op::Input | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g.clone());
                }
                if self.needs(*b) {
                    let bt = self.val(*b);
                    let kind = bcast_kind(self.val(*a), bt);
                    let mut gb = Tensor::zeros(bt.rows(), bt.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            bacc(&mut gb, kind, r, c, sign * g.get(r, c));
                        }
                    }
                    Self::accumulate(adj, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.val(*a), self.val(*b));
                let kind = bcast_kind(at, bt);
                if self.needs(*a) {
                    let ga = Tensor::from_fn(at.rows(), at.cols(), |r, c| {
                        g.get(r, c) * bval(bt, kind, r, c)
                    });
                    Self::accumulate(adj, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(bt.rows(), bt.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            bacc(&mut gb, kind, r, c, g.get(r, c) * at.get(r, c));
                        }
                    }
                    Self::accumulate(adj, *b, gb);
                }
            }
            Op::Neg(a) => self.elementwise_back(adj, *a, g, |g, _| -g),
            Op::Scale(a, c) => self.elementwise_back(adj, *a, g, |g, _| c * g),
            Op::Offset(a, _) => self.elementwise_back(adj, *a, g, |g, _| g),
            Op::Recip(a) => self.elementwise_back(adj, *a, g, |g, x| -g / (x * x)),
            Op::Exp(a) => {
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g.zip_map(out, |g, y| g * y));
                }
            }
            Op::Log(a) => self.elementwise_back(adj, *a, g, |g, x| g / x),
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g.zip_map(out, |g, y| g * y * (1.0 - y)));
                }
            }
            Op::Softplus(a) => self.elementwise_back(adj, *a, g, |g, x| g * sigmoid(x)),
            Op::Tanh(a) => {
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g.zip_map(out, |g, y| g * (1.0 - y * y)));
                }
            }
            Op::AbsPow(a, p) => {
                if self.needs(*a) {
                    let (x, pt) = (self.val(*a), self.val(*p));
                    let kind = bcast_kind(x, pt);
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        for c in 0..x.cols() {
                            let xv = x.get(r, c);
                            let q = bval(pt, kind, r, c);
                            let ax = xv.abs();
                            if ax < ABS_POW_FLOOR {
                                *clamped += 1;
                            }
                            let base = ax.max(ABS_POW_FLOOR);
                            let sign = if xv > 0.0 {
                                1.0
                            } else if xv < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            ga.set(r, c, g.get(r, c) * q * base.powf(q - 1.0) * sign);
                        }
                    }
                    Self::accumulate(adj, *a, ga);
                }
            }
            Op::SumRows(a) => {
                if self.needs(*a) {
                    let x = self.val(*a);
                    let ga = Tensor::from_fn(x.rows(), x.cols(), |r, _| g.get(r, 0));
                    Self::accumulate(adj, *a, ga);
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let x = self.val(*a);
                    Self::accumulate(adj, *a, Tensor::filled(x.rows(), x.cols(), g.item()));
                }
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    Self::accumulate(adj, *a, g.matmul_t(false, bt, true));
                }
                if self.needs(*b) {
                    Self::accumulate(adj, *b, at.matmul_t(true, g, false));
                }
            }
            Op::Trace(a) => {
                if self.needs(*a) {
                    let x = self.val(*a);
                    let gv = g.item();
                    let ga = Tensor::from_fn(x.rows(), x.cols(), |r, c| if r == c { gv } else { 0.0 });
                    Self::accumulate(adj, *a, ga);
                }
            }
            Op::SelectCols(a, idx) => {
                if self.needs(*a) {
                    let x = self.val(*a);
                    let mut ga = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        for (c, &src) in idx.iter().enumerate() {
                            let cur = ga.get(r, src);
                            ga.set(r, src, cur + g.get(r, c));
                        }
                    }
                    Self::accumulate(adj, *a, ga);
                }
            }
            Op::Concat(vs) => {
                let mut off = 0;
                for v in vs {
                    let cols = self.val(*v).cols();
                    if self.needs(*v) {
                        let gv = Tensor::from_fn(g.rows(), cols, |r, c| g.get(r, off + c));
                        Self::accumulate(adj, *v, gv);
                    }
                    off += cols;
                }
            }
            Op::SumOfSigmoids { z, raw, k, range } => {
                let (zt, rt) = (self.val(*z), self.val(*raw));
                let dim = zt.cols();
                let p = sos_param_count(*k);
                let mut gz = Tensor::zeros(zt.rows(), dim);
                let mut graw = Tensor::zeros(rt.rows(), rt.cols());
                let mut scratch = vec![0.0; 4 * *k];
                for r in 0..zt.rows() {
                    let (zr, pr, gr) = (zt.row(r), rt.row(r), g.row(r));
                    let grow = graw.row_mut(r);
                    for i in 0..dim {
                        let (gy, gl) = (gr[i], gr[dim + i]);
                        if gy == 0.0 && gl == 0.0 {
                            continue;
                        }
                        let dz = sos_backward_raw(
                            zr[i],
                            &pr[i * p..(i + 1) * p],
                            *k,
                            *range,
                            gy,
                            gl,
                            &mut grow[i * p..(i + 1) * p],
                            &mut scratch,
                        );
                        gz.set(r, i, dz);
                    }
                }
                if self.needs(*z) {
                    Self::accumulate(adj, *z, gz);
                }
                if self.needs(*raw) {
                    Self::accumulate(adj, *raw, graw);
                }
            }
            Op::CholProduct { l, d } => {
                if self.needs(*l) {
                    let lt = self.val(*l);
                    let mut gl = Tensor::zeros(lt.rows(), lt.cols());
                    for r in 0..lt.rows() {
                        chol_product_row_backward(lt.row(r), *d, g.row(r), gl.row_mut(r));
                    }
                    Self::accumulate(adj, *l, gl);
                }
            }
            Op::TriSolve { l, rhs, s, t } => {
                let lt = self.val(*l);
                let mut gl = Tensor::zeros(lt.rows(), lt.cols());
                let mut gb = Tensor::zeros(lt.rows(), s * t);
                for r in 0..lt.rows() {
                    tri_solve_row_backward(
                        lt.row(r),
                        out.row(r),
                        g.row(r),
                        *s,
                        *t,
                        gl.row_mut(r),
                        gb.row_mut(r),
                    );
                }
                if self.needs(*l) {
                    Self::accumulate(adj, *l, gl);
                }
                if self.needs(*rhs) {
                    Self::accumulate(adj, *rhs, gb);
                }
            }
            Op::QuadTrace { y, a, s, t } => {
                if self.needs(*y) {
                    let yt = self.val(*y);
                    let stacked = Tensor::from_vec(yt.rows() * s, *t, yt.as_slice().to_vec());
                    let ay = stacked.matmul(self.val(*a));
                    let mut gy = Tensor::from_vec(yt.rows(), s * t, ay.into_vec());
                    for r in 0..yt.rows() {
                        let gr = 2.0 * g.get(r, 0);
                        for x in gy.row_mut(r) {
                            *x *= gr;
                        }
                    }
                    Self::accumulate(adj, *y, gy);
                }
            }
        }
    }
}
