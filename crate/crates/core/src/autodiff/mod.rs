//! A small reverse-mode differentiation engine.
//!
//! Operations are recorded on a [`Graph`] as they execute (a dynamic tape)
//! and [`Graph::backward`] walks the tape in exact reverse creation order.
//! Everything is `f64` and row-major; only the handful of operations the
//! translation models need are provided.

mod gradcheck;
mod kernels;
mod optim;

use std::borrow::Cow;
use std::fmt;

use crate::error::{Error, Result};

pub use gradcheck::{gradient_check, gradient_check_at, GradCheckReport, FD_EPSILON};
pub use optim::{clip_global_norm, Optimizer};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense row-major `f64` tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("ragged rows"));
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: rows.concat(),
        })
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward<'a> = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + 'a>;

enum Op<'a> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Var, Vec<bool>),
    MeanRows(Var, Vec<bool>, usize),
    Sum(Vec<Var>),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        keep: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Mse {
        x: Var,
        y: Var,
        mask: Option<Vec<bool>>,
        count: usize,
    },
    Custom(Vec<Var>, CustomBackward<'a>),
}

impl Op<'_> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SelectRows(..) => "select_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::SumAll(..) => "sum_all",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse { .. } => "mse_loss",
            Op::Custom(..) => "custom",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op<'a>,
    requires_grad: bool,
}

/// A recorded computation. Parameters may be borrowed for the graph's
/// lifetime, so a graph never copies the weights it reads.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
    record: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::dim(format!("{op}: incompatible shapes {:?} and {:?}", a.shape, b.shape))
}

impl<'a> Graph<'a> {
    /// A graph that records operations for backpropagation.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: true,
        }
    }

    /// A graph that only evaluates. No operation records its inputs, so
    /// [`Graph::backward`] is unavailable.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in creation order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op<'a>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Borrowed trainable tensor.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Borrowed tensor that takes no gradient.
    pub fn frozen(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// A copy of `v`'s value with no connection to the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.val(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(&ta.data, &tb.data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Cow::Owned(Tensor {
                shape: vec![m, n],
                data: out,
            }),
            Op::MatMul(a, b),
            rg,
        ))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.shape[1] != tb.shape[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(&ta.data, &tb.data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Cow::Owned(Tensor {
                shape: vec![m, n],
                data: out,
            }),
            Op::MatMulNt(a, b),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape != tb.shape {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(Tensor { shape, data }), Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(row));
        if !ta.is_matrix() || tb.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let n = ta.cols();
        let mut data = ta.data.clone();
        for r in data.chunks_exact_mut(n) {
            for (x, b) in r.iter_mut().zip(&tb.data) {
                *x += b;
            }
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Cow::Owned(Tensor { shape, data }), Op::AddRow(a, row), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape != tb.shape {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(Tensor { shape, data }), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.val(a);
        let data = ta.data.iter().map(|x| x * s).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        self.push(Cow::Owned(Tensor { shape, data }), Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let data = ta.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        self.push(Cow::Owned(Tensor { shape, data }), Op::Relu(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax_rows(a, None, false)
    }

    /// Row-wise softmax restricted to allowed columns. Disallowed entries
    /// are exactly zero. `key_mask[j] == false` excludes column `j`; `causal`
    /// excludes columns greater than the row index.
    pub fn masked_softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>, causal: bool) -> Result<Var> {
        let ta = self.val(a);
        if !ta.is_matrix() {
            return Err(Error::dim(format!("softmax_rows expects a matrix, got {:?}", ta.shape)));
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(Error::dim(format!(
                    "softmax key mask has length {} for {} columns",
                    mask.len(),
                    n
                )));
            }
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ta.data[i * n..(i + 1) * n];
            let allowed = |j: usize| -> bool { key_mask.is_none_or(|mk| mk[j]) && (!causal || j <= i) };
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) && x > max {
                    max = x;
                }
            }
            if !max.is_finite() {
                if !(0..n).any(allowed) {
                    return Err(Error::EmptyInput(format!("softmax row {i} has no allowed entries")));
                }
                return Err(Error::Instability(format!("softmax row {i} has no finite maximum")));
            }
            if row.iter().enumerate().any(|(j, x)| allowed(j) && x.is_nan()) {
                return Err(Error::Instability(format!("softmax row {i} contains NaN")));
            }
            let o = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (x - max).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            let inv = 1.0 / sum;
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Cow::Owned(Tensor {
                shape: vec![m, n],
                data: out,
            }),
            Op::Softmax(a),
            rg,
        ))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.val(x);
        let d = tx.cols();
        if d < 2 {
            return Err(Error::Degenerate(format!("layer_norm over dimension {d} (needs >= 2)")));
        }
        let (tg, tb) = (self.val(gain), self.val(bias));
        if tg.len() != d || tb.len() != d {
            return Err(Error::dim(format!(
                "layer_norm: input {:?} with gain {:?} and bias {:?}",
                tx.shape, tg.shape, tb.shape
            )));
        }
        let m = tx.len() / d;
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = &tx.data[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * tg.data[j] + tb.data[j];
            }
        }
        let shape = tx.shape.clone();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = if rg && self.record {
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(Cow::Owned(Tensor { shape, data: out }), op, rg))
    }

    /// Rows of `table` selected by `idx` (embedding lookup, uniform copy).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.val(table);
        if !tt.is_matrix() {
            return Err(Error::dim(format!("gather_rows expects a matrix, got {:?}", tt.shape)));
        }
        let (r, c) = (tt.shape[0], tt.shape[1]);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::dim(format!(
                    "gather_rows: row {i} out of range for {:?}",
                    tt.shape
                )));
            }
            data.extend_from_slice(&tt.data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Cow::Owned(Tensor {
                shape: vec![idx.len(), c],
                data,
            }),
            Op::GatherRows(table, idx.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .nodes
            .get(
                parts
                    .first()
                    .ok_or_else(|| Error::EmptyInput("concat_cols of nothing".into()))?
                    .0,
            )
            .map(|n| &n.value)
            .ok_or_else(|| Error::dim("bad var"))?;
        let m = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.val(p);
            if !t.is_matrix() || t.rows() != m {
                return Err(shape_err("concat_cols", first, t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.val(p);
            for i in 0..m {
                data[i * total + off..i * total + off + w].copy_from_slice(&t.data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Cow::Owned(Tensor {
                shape: vec![m, total],
                data,
            }),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.val(a);
        if !ta.is_matrix() || start >= end || end > ta.cols() {
            return Err(Error::dim(format!("slice_cols {start}..{end} of shape {:?}", ta.shape)));
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&ta.data[i * n + start..i * n + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Cow::Owned(Tensor {
                shape: vec![m, w],
                data,
            }),
            Op::SliceCols(a, start),
            rg,
        ))
    }

    /// Row `i` of the result is `b[i]` where `take_b[i]`, else `a[i]`.
    pub fn select_rows(&mut self, a: Var, b: Var, take_b: &[bool]) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape != tb.shape || !ta.is_matrix() || take_b.len() != ta.rows() {
            return Err(shape_err("select_rows", ta, tb));
        }
        let n = ta.cols();
        let mut data = ta.data.clone();
        for (i, &t) in take_b.iter().enumerate() {
            if t {
                data[i * n..(i + 1) * n].copy_from_slice(&tb.data[i * n..(i + 1) * n]);
            }
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Cow::Owned(Tensor { shape, data }),
            Op::SelectRows(a, b, take_b.to_vec()),
            rg,
        ))
    }

    /// Mean over the rows where `keep` is true, as a `[1×n]` matrix.
    pub fn mean_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let ta = self.val(a);
        if !ta.is_matrix() || keep.len() != ta.rows() {
            return Err(Error::dim(format!(
                "mean_rows: mask of length {} for shape {:?}",
                keep.len(),
                ta.shape
            )));
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::EmptyInput("mean_rows over zero rows".into()));
        }
        let n = ta.cols();
        let mut out = vec![0.0; n];
        for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
            for (o, x) in out.iter_mut().zip(ta.row(i)) {
                *o += x;
            }
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(a);
        Ok(self.push(
            Cow::Owned(Tensor {
                shape: vec![1, n],
                data: out,
            }),
            Op::MeanRows(a, keep.to_vec(), count),
            rg,
        ))
    }

    /// Element-wise sum of same-shaped tensors.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::EmptyInput("sum of nothing".into()))?;
        let mut acc = self.val(first).clone();
        for &p in &parts[1..] {
            let t = self.val(p);
            if t.shape != acc.shape {
                return Err(shape_err("sum", &acc, t));
            }
            for (x, y) in acc.data.iter_mut().zip(&t.data) {
                *x += y;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(acc), Op::Sum(parts.to_vec()), rg))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.val(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::SumAll(a), rg)
    }

    /// Mean negative log-softmax of `targets` over rows where `ignore` is false.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[bool]) -> Result<Var> {
        let tl = self.val(logits);
        if !tl.is_matrix() || targets.len() != tl.rows() || ignore.len() != tl.rows() {
            return Err(Error::dim(format!(
                "cross_entropy: logits {:?} with {} targets and {} mask entries",
                tl.shape,
                targets.len(),
                ignore.len()
            )));
        }
        let (m, v) = (tl.shape[0], tl.shape[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::dim(format!("cross_entropy: target {t} >= vocabulary {v}")));
        }
        let keep: Vec<bool> = ignore.iter().map(|&x| !x).collect();
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::EmptyInput("cross_entropy with every position masked".into()));
        }
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for i in 0..m {
            if !keep[i] {
                continue;
            }
            let row = tl.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[i * v..(i + 1) * v];
            let mut sum = 0.0;
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                sum += *pj;
            }
            loss += sum.ln() + max - row[targets[i]];
            let inv = 1.0 / sum;
            p.iter_mut().for_each(|x| *x *= inv);
        }
        loss /= count as f64;
        let rg = self.rg(logits);
        let op = if rg && self.record {
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                keep,
                probs,
                count,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(Cow::Owned(Tensor::scalar(loss)), op, rg))
    }

    /// Mean of squared element differences.
    pub fn mse_loss(&mut self, x: Var, y: Var) -> Result<Var> {
        self.mse_impl(x, y, None)
    }

    /// Mean of squared differences over cells where `mask` is true.
    pub fn mse_loss_masked(&mut self, x: Var, y: Var, mask: &[bool]) -> Result<Var> {
        self.mse_impl(x, y, Some(mask))
    }

    fn mse_impl(&mut self, x: Var, y: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (tx, ty) = (self.val(x), self.val(y));
        if tx.shape != ty.shape {
            return Err(shape_err("mse_loss", tx, ty));
        }
        if let Some(m) = mask {
            if m.len() != tx.len() {
                return Err(Error::dim(format!(
                    "mse_loss mask of length {} for {} cells",
                    m.len(),
                    tx.len()
                )));
            }
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, (a, b)) in tx.data.iter().zip(&ty.data).enumerate() {
            if mask.is_none_or(|m| m[i]) {
                sum += (a - b) * (a - b);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyInput("mse_loss over zero cells".into()));
        }
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(sum / count as f64)),
            Op::Mse {
                x,
                y,
                mask: mask.map(<[bool]>::to_vec),
                count,
            },
            rg,
        ))
    }

    /// Records an operation whose value is computed by the caller. `backward`
    /// receives the input values, the output value and the output gradient
    /// and returns one gradient per input.
    pub fn custom<F>(&mut self, inputs: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + 'a,
    {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(Cow::Owned(value), Op::Custom(inputs.to_vec(), Box::new(backward)), rg)
    }

    /// Backpropagates from the scalar `loss`, populating gradients for every
    /// node that requires one and is reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.record {
            return Err(Error::config("backward on an inference graph"));
        }
        if self.val(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if !self.rg(loss) {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                acc(*a, &mut |s| kernels::matmul_nt_acc(g, &tb.data, s, m, n, k));
                acc(*b, &mut |s| kernels::matmul_tn_acc(&ta.data, g, s, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                acc(*a, &mut |s| kernels::matmul_acc(g, &tb.data, s, m, n, k));
                acc(*b, &mut |s| kernels::matmul_tn_acc(g, &ta.data, s, m, n, k));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let n = self.val(*a).cols();
                acc(*row, &mut |s| {
                    for r in g.chunks_exact(n) {
                        s.iter_mut().zip(r).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                acc(*a, &mut |s| {
                    for ((x, gy), bv) in s.iter_mut().zip(g).zip(&tb.data) {
                        *x += gy * bv;
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, gy), av) in s.iter_mut().zip(g).zip(&ta.data) {
                        *x += gy * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Relu(a) => {
                let ta = self.val(*a);
                acc(*a, &mut |s| {
                    for ((x, gy), av) in s.iter_mut().zip(g).zip(&ta.data) {
                        if *av > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.cols();
                acc(*a, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.data.chunks_exact(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let tg = self.val(*gain);
                let d = tg.len();
                acc(*x, &mut |s| {
                    let mut dxhat = vec![0.0; d];
                    for i in 0..inv_std.len() {
                        let gr = &g[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mut sum = 0.0;
                        let mut sum_x = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * tg.data[j];
                            sum += dxhat[j];
                            sum_x += dxhat[j] * xh[j];
                        }
                        let k = inv_std[i] / d as f64;
                        let srow = &mut s[i * d..(i + 1) * d];
                        for j in 0..d {
                            srow[j] += k * (d as f64 * dxhat[j] - sum - xh[j] * sum_x);
                        }
                    }
                });
                acc(*gain, &mut |s| {
                    for (gr, xh) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            s[j] += gr[j] * xh[j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for gr in g.chunks_exact(d) {
                        s.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::GatherRows(table, idx) => {
                let c = self.val(*table).cols();
                acc(*table, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut s[i * c..(i + 1) * c];
                        dst.iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    acc(p, &mut |s| {
                        for i in 0..m {
                            let src = &g[i * total + off..i * total + off + w];
                            s[i * w..(i + 1) * w].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let n = self.val(*a).cols();
                let w = node.value.cols();
                acc(*a, &mut |s| {
                    for (i, gr) in g.chunks_exact(w).enumerate() {
                        let dst = &mut s[i * n + start..i * n + start + w];
                        dst.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::SelectRows(a, b, take_b) => {
                let n = node.value.cols();
                acc(*a, &mut |s| {
                    for (i, &t) in take_b.iter().enumerate() {
                        if !t {
                            let r = i * n..(i + 1) * n;
                            s[r.clone()].iter_mut().zip(&g[r]).for_each(|(x, y)| *x += y);
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for (i, &t) in take_b.iter().enumerate() {
                        if t {
                            let r = i * n..(i + 1) * n;
                            s[r.clone()].iter_mut().zip(&g[r]).for_each(|(x, y)| *x += y);
                        }
                    }
                });
            }
            Op::MeanRows(a, keep, count) => {
                let n = node.value.cols();
                let inv = 1.0 / *count as f64;
                acc(*a, &mut |s| {
                    for (i, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
                        s[i * n..(i + 1) * n].iter_mut().zip(g).for_each(|(x, y)| *x += y * inv);
                    }
                });
            }
            Op::Sum(parts) => {
                for &p in parts {
                    acc(p, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::SumAll(a) => {
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::CrossEntropy {
                logits,
                targets,
                keep,
                probs,
                count,
            } => {
                let v = self.val(*logits).cols();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |s| {
                    for (i, &k) in keep.iter().enumerate() {
                        if !k {
                            continue;
                        }
                        let row = &mut s[i * v..(i + 1) * v];
                        for (j, x) in row.iter_mut().enumerate() {
                            *x += scale * probs[i * v + j];
                        }
                        row[targets[i]] -= scale;
                    }
                });
            }
            Op::Mse { x, y, mask, count } => {
                let (tx, ty) = (self.val(*x), self.val(*y));
                let k = 2.0 * g[0] / *count as f64;
                let on = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                acc(*x, &mut |s| {
                    for (i, x) in s.iter_mut().enumerate() {
                        if on(i) {
                            *x += k * (tx.data[i] - ty.data[i]);
                        }
                    }
                });
                acc(*y, &mut |s| {
                    for (i, x) in s.iter_mut().enumerate() {
                        if on(i) {
                            *x -= k * (tx.data[i] - ty.data[i]);
                        }
                    }
                });
            }
            Op::Custom(inputs, back) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.val(v)).collect();
                let gt = Tensor {
                    shape: node.value.shape.clone(),
                    data: g.to_vec(),
                };
                let ins = back(&vals, &node.value, &gt);
                for (&v, gi) in inputs.iter().zip(ins) {
                    acc(v, &mut |s| s.iter_mut().zip(&gi.data).for_each(|(x, y)| *x += y));
                }
            }
        }
    }
}
