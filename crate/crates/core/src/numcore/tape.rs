use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exec::ExecMode;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Relu,
    LeakyRelu(f64),
    Neg,
    Scale(f64),
    AddScalar(f64),
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    /// Elementwise minimum; ties route the gradient to the left operand.
    Min,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    GatherCols(Var, Vec<usize>),
    Softmax { x: Var, mask: Option<Var>, scale: Option<Vec<f64>> },
    LogSoftmax(Var),
    StraightThrough(Var),
    WhereConst(Var, Vec<bool>),
    GroupMatMul(Var, Var, usize),
    GroupPairScores(Var, Var, usize),
    GroupConcat(Var, usize),
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode gradient tape.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers. A tape supports exactly one [`backward`](Tape::backward); call
/// [`reset`](Tape::reset) to reuse the allocation for another forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    grad_enabled: bool,
    check_finite: bool,
    exec: ExecMode,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            grad_enabled: true,
            check_finite: cfg!(debug_assertions),
            exec: ExecMode::Sequential,
        }
    }

    /// A tape that never tracks gradients (rollouts and evaluation).
    pub fn inference() -> Self {
        Tape { grad_enabled: false, ..Self::new() }
    }

    pub fn with_exec(mut self, exec: ExecMode) -> Self {
        self.exec = exec;
        self
    }

    /// Toggle the per-op NaN/Inf check (on by default in debug builds).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn exec(&self) -> ExecMode {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- leaves -------------------------------------------------------

    /// Leaf that participates in gradient computation.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.leaf_shared(Arc::new(t), true)
    }

    /// Leaf backed by shared storage (parameters).
    pub fn param(&mut self, t: &Arc<Tensor>) -> Var {
        self.leaf_shared(Arc::clone(t), true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf_shared(Arc::new(t), false)
    }

    pub fn constant_shared(&mut self, t: &Arc<Tensor>) -> Var {
        self.leaf_shared(Arc::clone(t), false)
    }

    fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.shared_value(v);
        self.leaf_shared(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1)));
        }
        Ok(())
    }

    // ---- elementwise --------------------------------------------------

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = match op {
            UnaryOp::Sigmoid => xv.map(sigmoid),
            UnaryOp::Tanh => xv.map(f64::tanh),
            UnaryOp::Exp => xv.map(f64::exp),
            UnaryOp::Log => {
                if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain { op: "log", detail: format!("non-positive input {bad}") });
                }
                xv.map(f64::ln)
            }
            UnaryOp::Relu => xv.map(|v| v.max(0.0)),
            UnaryOp::LeakyRelu(s) => xv.map(|v| if v > 0.0 { v } else { s * v }),
            UnaryOp::Neg => xv.map(|v| -v),
            UnaryOp::Scale(c) => xv.map(|v| c * v),
            UnaryOp::AddScalar(c) => xv.map(|v| v + c),
            UnaryOp::Square => xv.map(|v| v * v),
        };
        self.push(unary_name(op), out, Op::Unary(op, x), &[x])
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Min => "min",
        };
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out = match op {
            BinaryOp::Add => av.zip_map(bv, |x, y| x + y),
            BinaryOp::Sub => av.zip_map(bv, |x, y| x - y),
            BinaryOp::Mul => av.zip_map(bv, |x, y| x * y),
            BinaryOp::Min => av.zip_map(bv, |x, y| if x <= y { x } else { y }),
        };
        self.push(name, out, Op::Binary(op, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Min, a, b)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(c), x)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp(x, lo, hi), &[x])
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_with(self.value(b), self.exec)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a + row`, broadcasting a `1×c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{}x{} plus row {}x{}", av.rows(), av.cols(), rv.rows(), rv.cols()),
            ));
        }
        let mut out = av.clone();
        let r = rv.data();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// `a ⊙ col`, broadcasting an `m×1` column across the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(Error::shape(
                "mul_col",
                format!("{}x{} times column {}x{}", av.rows(), av.cols(), cv.rows(), cv.cols()),
            ));
        }
        let mut out = av.clone();
        for i in 0..out.rows() {
            let c = cv.data()[i];
            out.row_mut(i).iter_mut().for_each(|o| *o *= c);
        }
        self.push("mul_col", out, Op::MulCol(a, col), &[a, col])
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Row sums as an `m×1` column.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::from_fn(v.rows(), 1, |r, _| v.row(r).iter().sum());
        self.push("sum_rows", out, Op::SumRows(x), &[x])
    }

    /// Pick `x[r, index[r]]` for every row, as an `m×1` column.
    pub fn gather_cols(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if index.len() != v.rows() {
            return Err(Error::shape("gather_cols", format!("{} indices for {} rows", index.len(), v.rows())));
        }
        if let Some(&bad) = index.iter().find(|&&c| c >= v.cols()) {
            return Err(Error::shape("gather_cols", format!("column {bad} out of {}", v.cols())));
        }
        let out = Tensor::from_fn(v.rows(), 1, |r, _| v.get(r, index[r]));
        self.push("gather_cols", out, Op::GatherCols(x, index.to_vec()), &[x])
    }

    // ---- softmax ------------------------------------------------------

    /// Row-wise softmax, optionally restricted to entries where `mask` is
    /// non-zero.
    ///
    /// The mask enters multiplicatively (`w_ij·exp(x_ij) / Σ_k w_ik·exp(x_ik)`),
    /// so a 0/1 mask gives the ordinary masked softmax while a mask that is
    /// itself on the tape receives a gradient. Masked entries are exactly 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Var>) -> Result<Var> {
        if let Some(m) = mask {
            self.same_shape("softmax_rows", x, m)?;
        }
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let want_scale = mask.is_some_and(|m| self.requires_grad(m)) && self.grad_enabled;
        let mut out = Tensor::zeros(rows, cols);
        let mut scale = want_scale.then(|| vec![0.0; rows * cols]);
        for r in 0..rows {
            let xr = xv.row(r);
            let wr: Option<&[f64]> = mask.map(|m| self.value(m).row(r));
            let active = |c: usize| wr.is_none_or(|w| w[c] != 0.0);
            let mut max = f64::NEG_INFINITY;
            for (c, &v) in xr.iter().enumerate() {
                if active(c) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { op: "softmax_rows", row: r });
            }
            // Inactive entries may sit far above the active maximum; the cap
            // keeps their (zero-weighted) terms finite.
            let u: Vec<f64> = xr.iter().map(|&v| (v - max).min(50.0).exp()).collect();
            let denom: f64 = match wr {
                Some(w) => u.iter().zip(w).map(|(a, b)| a * b).sum(),
                None => u.iter().sum(),
            };
            let orow = out.row_mut(r);
            for c in 0..cols {
                let w = wr.map_or(1.0, |w| w[c]);
                orow[c] = w * u[c] / denom;
            }
            if let Some(s) = scale.as_mut() {
                for c in 0..cols {
                    s[r * cols + c] = u[c] / denom;
                }
            }
        }
        let inputs: Vec<Var> = std::iter::once(x).chain(mask).collect();
        self.push("softmax_rows", out, Op::Softmax { x, mask, scale }, &inputs)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("log_softmax_rows", out, Op::LogSoftmax(x), &[x])
    }

    // ---- sampling plumbing --------------------------------------------

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        let sv = self.value(soft);
        if sv.shape() != hard.shape() {
            return Err(Error::shape(
                "straight_through",
                format!("soft {}x{} vs hard {}x{}", sv.rows(), sv.cols(), hard.rows(), hard.cols()),
            ));
        }
        self.push("straight_through", hard, Op::StraightThrough(soft), &[soft])
    }

    /// Keep `x` where `keep` is true, otherwise take `fill` (no gradient).
    pub fn where_const(&mut self, x: Var, keep: &[bool], fill: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.len() || fill.shape() != xv.shape() {
            return Err(Error::shape("where_const", format!("mask/fill do not match {}x{}", xv.rows(), xv.cols())));
        }
        let mut out = xv.clone();
        for ((o, &k), &f) in out.data_mut().iter_mut().zip(keep).zip(fill.data()) {
            if !k {
                *o = f;
            }
        }
        self.push("where_const", out, Op::WhereConst(x, keep.to_vec()), &[x])
    }

    // ---- grouped (per-timestep) ops -----------------------------------

    /// Block-diagonal product: `a` is `G·m × k`, `b` is `G·k × c`; block `g`
    /// of the result is `a_g · b_g`.
    pub fn group_matmul(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if groups == 0 || av.rows() % groups != 0 || bv.rows() != groups * av.cols() {
            return Err(Error::shape(
                "group_matmul",
                format!("{groups} groups of lhs {}x{} and rhs {}x{}", av.rows(), av.cols(), bv.rows(), bv.cols()),
            ));
        }
        let (m, k, c) = (av.rows() / groups, av.cols(), bv.cols());
        let mut out = vec![0.0; av.rows() * c];
        for g in 0..groups {
            for i in 0..m {
                let row = g * m + i;
                let orow = &mut out[row * c..(row + 1) * c];
                for kk in 0..k {
                    let w = av.get(row, kk);
                    if w == 0.0 {
                        continue;
                    }
                    for (o, &e) in orow.iter_mut().zip(bv.row(g * k + kk)) {
                        *o += w * e;
                    }
                }
            }
        }
        let out = Tensor::new(av.rows(), c, out)?;
        self.push("group_matmul", out, Op::GroupMatMul(a, b, groups), &[a, b])
    }

    /// Pairwise additive scores within each group of `n` rows:
    /// `out[g·n+i, j] = left[g·n+i] + right[g·n+j]`.
    pub fn group_pair_scores(&mut self, left: Var, right: Var, n: usize) -> Result<Var> {
        self.same_shape("group_pair_scores", left, right)?;
        let (lv, rv) = (self.value(left), self.value(right));
        if lv.cols() != 1 || n == 0 || lv.rows() % n != 0 {
            return Err(Error::shape("group_pair_scores", format!("{}x{} in groups of {n}", lv.rows(), lv.cols())));
        }
        let out = Tensor::from_fn(lv.rows(), n, |r, j| {
            let base = r - r % n;
            lv.data()[r] + rv.data()[base + j]
        });
        self.push("group_pair_scores", out, Op::GroupPairScores(left, right, n), &[left, right])
    }

    /// Within each group of `n` rows, every row becomes the concatenation of
    /// all `n` rows of the group in order: `G·n × d` becomes `G·n × n·d`.
    pub fn group_concat(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if n == 0 || xv.rows() % n != 0 {
            return Err(Error::shape("group_concat", format!("{} rows in groups of {n}", xv.rows())));
        }
        let d = xv.cols();
        let mut data = Vec::with_capacity(xv.rows() * n * d);
        for r in 0..xv.rows() {
            let base = r - r % n;
            for j in 0..n {
                data.extend_from_slice(xv.row(base + j));
            }
        }
        let out = Tensor::new(xv.rows(), n * d, data)?;
        self.push("group_concat", out, Op::GroupConcat(x, n), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => return Err(Error::shape("concat_cols", "no inputs")),
        };
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(Error::shape("concat_cols", format!("{} rows vs {rows}", self.shape(bad).0)));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(rows, total, data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeState("backward already ran on this tape".into()));
        }
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::shape("backward", format!("loss must be 1x1, got {}x{}", shape.0, shape.1)));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::TapeState("loss does not depend on any tracked leaf".into()));
        }
        self.consumed = true;
        let exec = self.exec;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &node.value, &g, &mut grads, exec)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        exec: ExecMode,
    ) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let mut acc = |v: Var, t: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let wants = |v: Var| nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Unary(op, x) => {
                let xv = val(*x);
                let gx = match *op {
                    UnaryOp::Sigmoid => zip3(g, out, |g, y| g * y * (1.0 - y)),
                    UnaryOp::Tanh => zip3(g, out, |g, y| g * (1.0 - y * y)),
                    UnaryOp::Exp => zip3(g, out, |g, y| g * y),
                    UnaryOp::Log => zip3(g, xv, |g, x| g / x),
                    UnaryOp::Relu => zip3(g, xv, |g, x| if x > 0.0 { g } else { 0.0 }),
                    UnaryOp::LeakyRelu(s) => zip3(g, xv, |g, x| if x > 0.0 { g } else { s * g }),
                    UnaryOp::Neg => g.map(|g| -g),
                    UnaryOp::Scale(c) => g.map(|g| c * g),
                    UnaryOp::AddScalar(_) => g.clone(),
                    UnaryOp::Square => zip3(g, xv, |g, x| 2.0 * g * x),
                };
                acc(*x, gx);
            }
            Op::Binary(op, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                match op {
                    BinaryOp::Add => {
                        acc(*a, g.clone());
                        acc(*b, g.clone());
                    }
                    BinaryOp::Sub => {
                        acc(*a, g.clone());
                        acc(*b, g.map(|v| -v));
                    }
                    BinaryOp::Mul => {
                        acc(*a, g.zip_map(bv, |g, b| g * b));
                        acc(*b, g.zip_map(av, |g, a| g * a));
                    }
                    BinaryOp::Min => {
                        let left = av.zip_map(bv, |a, b| if a <= b { 1.0 } else { 0.0 });
                        acc(*a, g.zip_map(&left, |g, l| g * l));
                        acc(*b, g.zip_map(&left, |g, l| g * (1.0 - l)));
                    }
                }
            }
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, g.matmul_t_with(val(*b), exec)?);
                }
                if wants(*b) {
                    acc(*b, val(*a).tmatmul_with(g, exec)?);
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if wants(*row) {
                    let cols = g.cols();
                    let mut s = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (acc_c, v) in s.iter_mut().zip(g.row(r)) {
                            *acc_c += v;
                        }
                    }
                    acc(*row, Tensor::new(1, cols, s)?);
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (val(*a), val(*col));
                if wants(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let c = cv.data()[r];
                        ga.row_mut(r).iter_mut().for_each(|v| *v *= c);
                    }
                    acc(*a, ga);
                }
                if wants(*col) {
                    let gc = Tensor::from_fn(g.rows(), 1, |r, _| {
                        g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum()
                    });
                    acc(*col, gc);
                }
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(*x, zip3(g, val(*x), |g, x| if x >= lo && x <= hi { g } else { 0.0 }));
            }
            Op::SumAll(x) => {
                let (r, c) = val(*x).shape();
                acc(*x, Tensor::full(r, c, g.item()));
            }
            Op::MeanAll(x) => {
                let (r, c) = val(*x).shape();
                acc(*x, Tensor::full(r, c, g.item() / (r * c) as f64));
            }
            Op::SumRows(x) => {
                let (r, c) = val(*x).shape();
                acc(*x, Tensor::from_fn(r, c, |i, _| g.data()[i]));
            }
            Op::GatherCols(x, index) => {
                let (r, c) = val(*x).shape();
                let mut gx = Tensor::zeros(r, c);
                for (i, &col) in index.iter().enumerate() {
                    gx.set(i, col, g.data()[i]);
                }
                acc(*x, gx);
            }
            Op::Softmax { x, mask, scale } => {
                let (rows, cols) = out.shape();
                let mut gx = Tensor::zeros(rows, cols);
                let mut gw = scale.as_ref().map(|_| Tensor::zeros(rows, cols));
                for r in 0..rows {
                    let (gr, ar) = (g.row(r), out.row(r));
                    let dot: f64 = gr.iter().zip(ar).map(|(a, b)| a * b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = ar[c] * (gr[c] - dot);
                    }
                    if let (Some(gw), Some(s)) = (gw.as_mut(), scale.as_ref()) {
                        for (c, o) in gw.row_mut(r).iter_mut().enumerate() {
                            *o = s[r * cols + c] * (gr[c] - dot);
                        }
                    }
                }
                acc(*x, gx);
                if let (Some(m), Some(gw)) = (mask, gw) {
                    acc(*m, gw);
                }
            }
            Op::LogSoftmax(x) => {
                let mut gx = g.clone();
                for r in 0..gx.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (o, &y) in gx.row_mut(r).iter_mut().zip(out.row(r)) {
                        *o -= y.exp() * gsum;
                    }
                }
                acc(*x, gx);
            }
            Op::StraightThrough(soft) => acc(*soft, g.clone()),
            Op::WhereConst(x, keep) => {
                let mut gx = g.clone();
                for (o, &k) in gx.data_mut().iter_mut().zip(keep) {
                    if !k {
                        *o = 0.0;
                    }
                }
                acc(*x, gx);
            }
            Op::GroupMatMul(a, b, groups) => {
                let (av, bv) = (val(*a), val(*b));
                let m = av.rows() / groups;
                let k = av.cols();
                let c = bv.cols();
                if wants(*a) {
                    // ga[row, kk] = Σ_c g[row, c] · b[g·k+kk, c]
                    let ga = Tensor::from_fn(av.rows(), k, |row, kk| {
                        let grp = row / m;
                        g.row(row).iter().zip(bv.row(grp * k + kk)).map(|(x, y)| x * y).sum()
                    });
                    acc(*a, ga);
                }
                if wants(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), c);
                    for row in 0..av.rows() {
                        let grp = row / m;
                        for kk in 0..k {
                            let w = av.get(row, kk);
                            if w == 0.0 {
                                continue;
                            }
                            let dst = gb.row_mut(grp * k + kk);
                            for (o, &gv) in dst.iter_mut().zip(g.row(row)) {
                                *o += w * gv;
                            }
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::GroupPairScores(left, right, n) => {
                let n = *n;
                let rows = g.rows();
                if wants(*left) {
                    acc(*left, Tensor::from_fn(rows, 1, |r, _| g.row(r).iter().sum()));
                }
                if wants(*right) {
                    let mut gr = Tensor::zeros(rows, 1);
                    for r in 0..rows {
                        let base = r - r % n;
                        for (j, &v) in g.row(r).iter().enumerate() {
                            gr.data_mut()[base + j] += v;
                        }
                    }
                    acc(*right, gr);
                }
            }
            Op::GroupConcat(x, n) => {
                let n = *n;
                let (rows, d) = val(*x).shape();
                let mut gx = Tensor::zeros(rows, d);
                for r in 0..rows {
                    let base = r - r % n;
                    let gr = g.row(r);
                    for j in 0..n {
                        for (o, &v) in gx.row_mut(base + j).iter_mut().zip(&gr[j * d..(j + 1) * d]) {
                            *o += v;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (rows, w) = val(p).shape();
                    if wants(p) {
                        let gp = Tensor::from_fn(rows, w, |r, c| g.get(r, offset + c));
                        acc(p, gp);
                    }
                    offset += w;
                }
            }
        }
        Ok(())
    }
}

/// Gradients from one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip3(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    g.zip_map(other, f)
}

fn unary_name(op: UnaryOp) -> &'static str {
    match op {
        UnaryOp::Sigmoid => "sigmoid",
        UnaryOp::Tanh => "tanh",
        UnaryOp::Exp => "exp",
        UnaryOp::Log => "log",
        UnaryOp::Relu => "relu",
        UnaryOp::LeakyRelu(_) => "leaky_relu",
        UnaryOp::Neg => "neg",
        UnaryOp::Scale(_) => "scale",
        UnaryOp::AddScalar(_) => "add_scalar",
        UnaryOp::Square => "square",
    }
}
