use std::sync::atomic::{AtomicU32, Ordering};

use super::{dot64, matmul_kernel, sum64, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node recorded on a [`Tape`].
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

/// Row-major boolean matrix; `true` keeps an entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "mask {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                keep.len()
            )));
        }
        Ok(Mask { rows, cols, keep })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.keep[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_count(&self, r: usize) -> usize {
        self.row(r).iter().filter(|&&k| k).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    DivCol(Var, Var),
    Softmax(Var),
    EluPlusOne(Var),
    Gelu(Var),
    LayerNorm { input: Var, inv_std: Vec<f32> },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MaxRows { input: Var, argmax: Vec<usize> },
    Mse(Var, Var),
    StraightThrough(Var),
    Detach,
    SliceRows { input: Var, start: usize },
    ConcatRows(Vec<Var>),
    Reshape(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Define-by-run record of tensor operations.
///
/// Nodes are appended in execution order, so parents always precede their
/// children and a reverse sweep is a valid topological traversal.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
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

    fn check(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::NotOnTape);
        }
        self.nodes.get(v.index()).ok_or(Error::NotOnTape)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.check(v)?.value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.check(v)?.requires_grad)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        op: Op,
        value: Tensor,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(op, value, requires_grad))
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t, requires_grad)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<&Tensor> {
        let t = self.value(v)?;
        if !t.is_matrix() {
            return Err(Error::shape(op, t.shape(), &[0, 0]));
        }
        Ok(t)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(&Tensor, &Tensor)> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        Ok((ta, tb))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.index()].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.matrix(a, "matmul")?, self.matrix(b, "matmul")?);
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let out = Tensor::from_parts(vec![m, n], matmul_kernel(ta.data(), tb.data(), m, k, n));
        let rg = self.rg(&[a, b]);
        self.push_checked("matmul", Op::MatMul(a, b), out, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.matrix(a, "transpose")?.transpose();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), out, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Var> {
        let (ta, tb) = self.same_shape(a, b, name)?;
        let out = ta.zip_map(tb, f);
        let rg = self.rg(&[a, b]);
        self.push_checked(name, op, out, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let out = self.value(a)?.map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push_checked("scale", Op::Scale(a, c), out, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let out = self.value(a)?.map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push_checked("add_scalar", Op::AddScalar(a), out, rg)
    }

    fn row_vector_len(t: &Tensor) -> usize {
        t.numel()
    }

    /// `a[m×n] + v` with `v` of length `n` broadcast over rows.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ta, tv) = (self.matrix(a, "add_row")?, self.value(v)?);
        let n = ta.cols();
        if Self::row_vector_len(tv) != n || tv.rows() != 1 {
            return Err(Error::shape("add_row", ta.shape(), tv.shape()));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(tv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, v]);
        self.push_checked("add_row", Op::AddRow(a, v), out, rg)
    }

    /// `a[m×n] ⊙ v` with `v` of length `n` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ta, tv) = (self.matrix(a, "mul_row")?, self.value(v)?);
        let n = ta.cols();
        if Self::row_vector_len(tv) != n || tv.rows() != 1 {
            return Err(Error::shape("mul_row", ta.shape(), tv.shape()));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &s) in row.iter_mut().zip(tv.data()) {
                *o *= s;
            }
        }
        let rg = self.rg(&[a, v]);
        self.push_checked("mul_row", Op::MulRow(a, v), out, rg)
    }

    /// Divide row `i` of `a[m×n]` by `v[i]`, where `v` is `m×1`.
    pub fn div_col(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ta, tv) = (self.matrix(a, "div_col")?, self.matrix(v, "div_col")?);
        let (m, n) = (ta.rows(), ta.cols());
        if tv.shape() != [m, 1] {
            return Err(Error::shape("div_col", ta.shape(), tv.shape()));
        }
        let mut out = ta.clone();
        for (row, &d) in out.data_mut().chunks_mut(n).zip(tv.data()) {
            for o in row {
                *o /= d;
            }
        }
        let rg = self.rg(&[a, v]);
        self.push_checked("div_col", Op::DivCol(a, v), out, rg)
    }

    /// Row softmax with max subtraction. Masked entries are excluded from the
    /// normalizer and come out as exactly 0.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let ta = self.matrix(a, "softmax_rows")?;
        let (m, n) = (ta.rows(), ta.cols());
        if let Some(mask) = mask {
            if mask.rows() != m || mask.cols() != n {
                return Err(Error::shape("softmax_rows", ta.shape(), &[mask.rows(), mask.cols()]));
            }
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = ta.row(i);
            let keep = |j: usize| mask.map_or(true, |mk| mk.get(i, j));
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f32::NEG_INFINITY, f32::max);
            if max == f32::NEG_INFINITY {
                return Err(Error::AllMasked { row: i });
            }
            let o = &mut out[i * n..(i + 1) * n];
            let mut denom = 0.0f64;
            for j in 0..n {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    o[j] = e;
                    denom += e as f64;
                }
            }
            let denom = denom as f32;
            for v in o.iter_mut() {
                *v /= denom;
            }
        }
        let out = Tensor::from_parts(vec![m, n], out);
        let rg = self.rg(&[a]);
        self.push_checked("softmax_rows", Op::Softmax(a), out, rg)
    }

    /// `ELU(x) + 1`: `x + 1` for `x ≥ 0`, `exp(x)` otherwise.
    pub fn elu_plus_one(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.map(elu_plus_one);
        let rg = self.rg(&[a]);
        self.push_checked("elu_plus_one", Op::EluPlusOne(a), out, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.map(|x| gelu(x).0);
        let rg = self.rg(&[a]);
        self.push_checked("gelu", Op::Gelu(a), out, rg)
    }

    /// Normalize each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f32) -> Result<Var> {
        let ta = self.matrix(a, "layer_norm")?;
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0f32; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = ta.row(i);
            let mean = sum64(row.iter().copied()) / n as f32;
            let var = sum64(row.iter().map(|x| (x - mean) * (x - mean))) / n as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
        }
        let out = Tensor::from_parts(vec![m, n], out);
        let rg = self.rg(&[a]);
        self.push_checked("layer_norm", Op::LayerNorm { input: a, inv_std }, out, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = sum64(self.value(a)?.data().iter().copied());
        let rg = self.rg(&[a]);
        self.push_checked("sum", Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a)?;
        let s = sum64(t.data().iter().copied()) / t.numel() as f32;
        let rg = self.rg(&[a]);
        self.push_checked("mean", Op::Mean(a), Tensor::scalar(s), rg)
    }

    /// Per-row sum, `m×n → m×1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.matrix(a, "sum_rows")?;
        let out: Vec<f32> = (0..ta.rows()).map(|i| sum64(ta.row(i).iter().copied())).collect();
        let out = Tensor::from_parts(vec![ta.rows(), 1], out);
        let rg = self.rg(&[a]);
        self.push_checked("sum_rows", Op::SumRows(a), out, rg)
    }

    /// Per-row max, `m×n → m×1`; the gradient goes to the first maximal entry.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.matrix(a, "max_rows")?;
        if ta.cols() == 0 {
            return Err(Error::InvalidArgument("max_rows of an empty row".into()));
        }
        let mut argmax = Vec::with_capacity(ta.rows());
        let mut out = Vec::with_capacity(ta.rows());
        for i in 0..ta.rows() {
            let row = ta.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        let out = Tensor::from_parts(vec![ta.rows(), 1], out);
        let rg = self.rg(&[a]);
        self.push_checked("max_rows", Op::MaxRows { input: a, argmax }, out, rg)
    }

    /// Mean squared error between equal-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.same_shape(a, b, "mse")?;
        let n = ta.numel().max(1) as f32;
        let s = sum64(ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y))) / n;
        let rg = self.rg(&[a, b]);
        self.push_checked("mse", Op::Mse(a, b), Tensor::scalar(s), rg)
    }

    /// Node whose forward value is `value` and whose gradient passes to `x`
    /// unchanged; equivalent to `x + stopgrad(value − x)` without the rounding
    /// of the explicit sum.
    pub fn straight_through(&mut self, x: Var, value: Tensor) -> Result<Var> {
        let tx = self.value(x)?;
        if tx.shape() != value.shape() {
            return Err(Error::shape("straight_through", tx.shape(), value.shape()));
        }
        let rg = self.rg(&[x]);
        self.push_checked("straight_through", Op::StraightThrough(x), value, rg)
    }

    /// Copy of `a` cut off from the gradient graph.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a)?.clone();
        Ok(self.push(Op::Detach, out, false))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.matrix(a, "slice_rows")?;
        if start + len > ta.rows() {
            return Err(Error::InvalidArgument(format!(
                "rows {start}..{} out of range for {:?}",
                start + len,
                ta.shape()
            )));
        }
        let n = ta.cols();
        let out = Tensor::from_parts(vec![len, n], ta.data()[start * n..(start + len) * n].to_vec());
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceRows { input: a, start }, out, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.matrix(*parts.first().ok_or_else(|| {
            Error::InvalidArgument("concat_rows of nothing".into())
        })?, "concat_rows")?;
        let n = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.matrix(p, "concat_rows")?;
            if t.cols() != n {
                return Err(Error::shape("concat_rows", &[rows, n], t.shape()));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::from_parts(vec![rows, n], data);
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a)?.reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), out, rg))
    }

    /// Reverse sweep from a scalar `loss`, visiting each node once.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let end = loss.index();
        let mut grads: Vec<Option<Tensor>> = (0..=end).map(|_| None).collect();
        grads[end] = Some(Tensor::ones(root.value.shape()));

        for i in (0..=end).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.index()].value
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor| accumulate(grads, v, t);
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let bt = tb.transpose();
                    let ga = matmul_kernel(g.data(), bt.data(), m, n, k);
                    acc(*a, Tensor::from_parts(vec![m, k], ga));
                }
                if self.wants(*b) {
                    let at = ta.transpose();
                    let gb = matmul_kernel(at.data(), g.data(), k, m, n);
                    acc(*b, Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.zip_map(self.val(*b), |g, y| g * y));
                }
                if self.wants(*b) {
                    acc(*b, g.zip_map(self.val(*a), |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let tb = self.val(*b);
                if self.wants(*a) {
                    acc(*a, g.zip_map(tb, |g, d| g / d));
                }
                if self.wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = y.zip_map(tb, |q, d| -q / d);
                    acc(*b, g.zip_map(&q, |g, q| g * q));
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::AddRow(a, v) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*v) {
                    let tv = self.val(*v);
                    acc(*v, Tensor::from_parts(tv.shape().to_vec(), column_sums(g)));
                }
            }
            Op::MulRow(a, v) => {
                let (ta, tv) = (self.val(*a), self.val(*v));
                let n = ta.cols();
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for row in ga.data_mut().chunks_mut(n) {
                        for (o, &s) in row.iter_mut().zip(tv.data()) {
                            *o *= s;
                        }
                    }
                    acc(*a, ga);
                }
                if self.wants(*v) {
                    let prod = g.zip_map(ta, |g, x| g * x);
                    acc(*v, Tensor::from_parts(tv.shape().to_vec(), column_sums(&prod)));
                }
            }
            Op::DivCol(a, v) => {
                let tv = self.val(*v);
                let n = y.cols();
                if self.wants(*a) {
                    let mut ga = g.clone();
                    for (row, &d) in ga.data_mut().chunks_mut(n).zip(tv.data()) {
                        for o in row {
                            *o /= d;
                        }
                    }
                    acc(*a, ga);
                }
                if self.wants(*v) {
                    // d(a_ij/v_i)/dv_i = -y_ij / v_i
                    let gv: Vec<f32> = (0..y.rows())
                        .map(|i| {
                            let dot = dot64(g.row(i), y.row(i));
                            -dot / tv.data()[i]
                        })
                        .collect();
                    acc(*v, Tensor::from_parts(tv.shape().to_vec(), gv));
                }
            }
            Op::Softmax(a) => {
                let n = y.cols();
                let mut ga = vec![0.0f32; y.numel()];
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot = dot64(yr, gr);
                    for j in 0..n {
                        ga[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, Tensor::from_parts(y.shape().to_vec(), ga));
            }
            Op::EluPlusOne(a) => {
                let x = self.val(*a);
                let d = x.zip_map(y, |x, y| if x >= 0.0 { 1.0 } else { y });
                acc(*a, g.zip_map(&d, |g, d| g * d));
            }
            Op::Gelu(a) => {
                let d = self.val(*a).map(|x| gelu(x).1);
                acc(*a, g.zip_map(&d, |g, d| g * d));
            }
            Op::LayerNorm { input, inv_std } => {
                let n = y.cols();
                let nf = n as f32;
                let mut ga = vec![0.0f32; y.numel()];
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let g_mean = sum64(gr.iter().copied()) / nf;
                    let gy_mean = dot64(gr, yr) / nf;
                    for j in 0..n {
                        ga[i * n + j] = inv_std[i] * (gr[j] - g_mean - yr[j] * gy_mean);
                    }
                }
                acc(*input, Tensor::from_parts(y.shape().to_vec(), ga));
            }
            Op::Sum(a) => {
                let s = g.item();
                acc(*a, Tensor::full(self.val(*a).shape(), s));
            }
            Op::Mean(a) => {
                let t = self.val(*a);
                let s = g.item() / t.numel() as f32;
                acc(*a, Tensor::full(t.shape(), s));
            }
            Op::SumRows(a) => {
                let t = self.val(*a);
                let n = t.cols();
                let ga = (0..t.numel()).map(|idx| g.data()[idx / n]).collect();
                acc(*a, Tensor::from_parts(t.shape().to_vec(), ga));
            }
            Op::MaxRows { input, argmax } => {
                let t = self.val(*input);
                let n = t.cols();
                let mut ga = vec![0.0f32; t.numel()];
                for (i, &j) in argmax.iter().enumerate() {
                    ga[i * n + j] = g.data()[i];
                }
                acc(*input, Tensor::from_parts(t.shape().to_vec(), ga));
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let c = 2.0 * g.item() / ta.numel().max(1) as f32;
                let diff = ta.zip_map(tb, |x, y| c * (x - y));
                if self.wants(*b) {
                    acc(*b, diff.map(|d| -d));
                }
                if self.wants(*a) {
                    acc(*a, diff);
                }
            }
            Op::StraightThrough(x) => acc(*x, g.clone()),
            Op::SliceRows { input, start } => {
                let t = self.val(*input);
                let n = t.cols();
                let mut ga = vec![0.0f32; t.numel()];
                ga[start * n..start * n + g.numel()].copy_from_slice(g.data());
                acc(*input, Tensor::from_parts(t.shape().to_vec(), ga));
            }
            Op::ConcatRows(parts) => {
                let n = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.val(p).rows();
                    if self.wants(p) {
                        let slice = g.data()[offset * n..(offset + rows) * n].to_vec();
                        acc(p, Tensor::from_parts(vec![rows, n], slice));
                    }
                    offset += rows;
                }
            }
            Op::Reshape(a) => {
                let shape = self.val(*a).shape().to_vec();
                acc(*a, Tensor::from_parts(shape, g.data().to_vec()));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.index()] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(t),
    }
}

fn column_sums(g: &Tensor) -> Vec<f32> {
    let n = g.cols();
    let mut out = vec![0.0f64; n];
    for row in g.data().chunks(n) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x as f64;
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

pub(crate) fn elu_plus_one(x: f32) -> f32 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// GELU (tanh form) and its derivative.
fn gelu(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const A: f32 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * A * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

/// Gradients from one backward sweep, keyed by tape variable.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` is on another tape, does not require grad, or is not
    /// an ancestor of the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index()).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let ones = tape.constant(t(&[&[1.0], &[1.0]]));
        let ia = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(ia).unwrap(), tape.value(a).unwrap());
        let prod = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(prod).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[&[0.0, 0.0], &[1000.0, 0.0]]));
        let s = tape.softmax_rows(z, None).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[0.5, 0.5, 1.0, 0.0]);

        let x = tape.constant(t(&[&[1.0, 2.0, 3.0]]));
        let mask = Mask::new(1, 3, vec![false, true, true]).unwrap();
        let s = tape.softmax_rows(x, Some(&mask)).unwrap();
        let (e1, e2) = (1.0f64.exp(), 2.0f64.exp());
        let got = tape.value(s).unwrap().data().to_vec();
        assert_eq!(got[0], 0.0);
        assert!((got[1] as f64 - e1 / (e1 + e2)).abs() < 1e-6);
        assert!((got[2] as f64 - e2 / (e1 + e2)).abs() < 1e-6);
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 2.0], &[0.0, 0.0]]));
        let mask = Mask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert!(matches!(
            tape.softmax_rows(x, Some(&mask)),
            Err(Error::AllMasked { row: 1 })
        ));
    }

    #[test]
    fn elu_plus_one_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[0.0, 2.0, -1.0]]));
        let y = tape.elu_plus_one(x).unwrap();
        let y = tape.value(y).unwrap().data().to_vec();
        assert_eq!(&y[..2], &[1.0, 3.0]);
        assert!((y[2] - 0.367_879_44).abs() < 1e-7);
    }

    #[test]
    fn linear_loss_gradient_is_outer_product() {
        // loss = sum(W x) → dW = 1 · xᵀ
        let mut tape = Tape::new();
        let w = tape.variable(t(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, 1.0]]));
        let x = tape.constant(t(&[&[2.0], &[-1.0], &[4.0]]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -1.0, 4.0, 2.0, -1.0, 4.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn detach_style_ste_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[&[0.3, -1.7, 2.2]]));
        let q = tape.constant(t(&[&[0.25, -1.75, 2.25]]));
        let diff = tape.sub(q, x).unwrap();
        let stop = tape.detach(diff).unwrap();
        let ste = tape.add(x, stop).unwrap();
        let loss = tape.sum(ste).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_foreign_and_non_scalar() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let va = a.variable(Tensor::ones(&[1]));
        let vb = b.variable(Tensor::ones(&[2, 2]));
        assert!(matches!(b.backward(va), Err(Error::NotOnTape)));
        assert!(matches!(b.backward(vb), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn overflow_is_reported() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1], 3.0e38));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![
            Tensor::randn(&[5, 4], 1.0, &mut rng),
            Tensor::randn(&[4, 6], 0.5, &mut rng),
            Tensor::randn(&[1, 6], 0.5, &mut rng),
            Tensor::randn(&[6, 3], 0.5, &mut rng),
        ];
        let report = check_gradients(
            &inputs,
            |tape, v| {
                let h = tape.matmul(v[0], v[1])?;
                let h = tape.add_row(h, v[2])?;
                let h = tape.gelu(h)?;
                tape.matmul(h, v[3])
            },
            &GradCheckConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
