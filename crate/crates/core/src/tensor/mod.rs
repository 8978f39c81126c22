//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and a record of how it was produced. Because nodes are appended in
//! evaluation order, walking the tape backwards is a valid reverse
//! topological order, so [`Graph::backward`] needs no explicit sort.
//!
//! Leaves created with [`Graph::param`] accumulate gradients across repeated
//! `backward` calls; everything else is recomputed per call. A graph is
//! meant to be built, differentiated once and dropped.
//!
//! Reductions (`sum`, `mean`, row norms, softmax normalisers) accumulate in
//! `f64` and round once on output.

mod gradcheck;
mod optim;
mod real;

pub use gradcheck::{grad_check, GradCheckReport, ScalarFn};
pub use optim::{AdamW, AdamWConfig, ParamStore};
pub use real::Real;

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("optimizer state for `{name}` has shape {state:?} but parameter has {param:?}")]
    StateShape {
        name: String,
        state: Vec<usize>,
        param: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array; `f32` unless stated otherwise.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("shape {shape:?} must be non-empty with positive dimensions"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, T::ZERO)
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::ONE;
        }
        t
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor; a 1-D tensor is one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => (other[0], other[1..].iter().product()),
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    ClampMax(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    RowNorm(Var),
    Concat(Vec<Var>, usize),
    MatMul(Var, Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    L2Normalize(Var),
    LogSoftmax(Var, usize),
    Conv3x3(Var, Var, Var, ConvGeom),
    AvgPool2(Var, usize, usize, usize),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Tensor<T>>,
}

/// Evaluation tape. Single-threaded by construction (`&mut self` for every op).
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

const NORM_EPS: f64 = 1e-12;

fn mismatch<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf; gradients accumulate into it on `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Drops every node from index `len` on, so a graph holding bound
    /// parameters can be reused for further forward passes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        make: Op,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, make, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kt = T::from_f64(k);
        self.unary(a, Op::Scale(a, k), |x| x * kt)
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.len() != 1 {
            return Err(mismatch("scale_by", ta, ts));
        }
        let k = ts.data[0];
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| x * k).collect(),
        };
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy(a, s), rg))
    }

    /// Adds a length-`c` row vector to every row of an `(r, c)` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, c) = ta.dims2();
        if ta.shape.len() != 2 || tr.len() != c {
            return Err(mismatch("add_row", ta, tr));
        }
        let mut data = ta.data.clone();
        for chunk in data.chunks_mut(c) {
            chunk.iter_mut().zip(&tr.data).for_each(|(x, &b)| *x += b);
        }
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let ta = self.value(a);
        let out = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| f(x)).collect(),
        };
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(T::ZERO))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), T::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), T::ln)
    }

    /// `min(a, ceiling)`; gradient is zero where the ceiling is active.
    pub fn clamp_max(&mut self, a: Var, ceiling: f64) -> Var {
        let c = T::from_f64(ceiling);
        self.unary(a, Op::ClampMax(a, ceiling), |x| x.min(c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = sum64(&self.value(a).data);
        let rg = self.rg(a);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = sum64(&ta.data) / ta.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(T::from_f64(m)), Op::Mean(a), rg)
    }

    /// Sums each row of an `(r, c)` matrix into an `(r,)` vector.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (_, c) = ta.dims2();
        let data = ta.data.chunks(c).map(|r| T::from_f64(sum64(r))).collect();
        let rg = self.rg(a);
        self.push(Tensor::vector(data), Op::SumRows(a), rg)
    }

    /// Euclidean norm of each row, `(r, c) -> (r,)`. The subgradient at a
    /// zero row is taken as zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (_, c) = ta.dims2();
        let data = ta
            .data
            .chunks(c)
            .map(|r| T::from_f64(row_norm64(r)))
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::vector(data), Op::RowNorm(a), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let t0 = self.value(*first);
        let rank = t0.shape.len();
        if axis >= rank || rank > 2 {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} invalid for shape {:?}", t0.shape),
            });
        }
        for p in &parts[1..] {
            let t = self.value(*p);
            let compatible = t.shape.len() == rank
                && t.shape
                    .iter()
                    .enumerate()
                    .all(|(i, &d)| i == axis || d == t0.shape[i]);
            if !compatible {
                return Err(mismatch("concat", t0, t));
            }
        }
        let out = if axis == 0 {
            let mut shape = t0.shape.clone();
            shape[0] = parts.iter().map(|p| self.value(*p).shape[0]).sum();
            let data = parts
                .iter()
                .flat_map(|p| self.value(*p).data.iter().copied())
                .collect();
            Tensor { shape, data }
        } else {
            let rows = t0.shape[0];
            let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).shape[1]).collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&self.value(*p).data[r * w..(r + 1) * w]);
                }
            }
            Tensor {
                shape: vec![rows, total],
                data,
            }
        };
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![T::ZERO; m * n];
        gemm_nn(&ta.data, &tb.data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected 2-D input, got {:?}", ta.shape),
            });
        }
        let out = transpose2(&ta.data, ta.shape[0], ta.shape[1]);
        let shape = vec![ta.shape[1], ta.shape[0]];
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape, data: out }, Op::Transpose(a), rg))
    }

    /// Selects rows of a 2-D tensor by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("expected 2-D input, got {:?}", ta.shape),
            });
        }
        let (r, c) = (ta.shape[0], ta.shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row index {bad} out of range for {r} rows"),
            });
        }
        if idx.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "empty index list".into(),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&ta.data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![idx.len(), c],
                data,
            },
            Op::GatherRows(a, idx.to_vec()),
            rg,
        ))
    }

    /// Divides each row by `max(‖row‖₂, 1e-12)`.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "l2_normalize",
                msg: format!("expected (batch, dim), got {:?}", ta.shape),
            });
        }
        let c = ta.shape[1];
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c) {
            let n = row_norm64(row).max(NORM_EPS);
            row.iter_mut()
                .for_each(|x| *x = T::from_f64(x.to_f64() / n));
        }
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::L2Normalize(a), rg))
    }

    /// Numerically stable log-softmax of a 2-D tensor along `axis`
    /// (1 = within each row, 0 = within each column). 1-D inputs are a single row.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2();
        let axis = if ta.shape.len() == 1 { 1 } else { axis };
        if axis > 1 || ta.shape.len() > 2 {
            return Err(TensorError::Invalid {
                op: "log_softmax",
                msg: format!("axis {axis} invalid for shape {:?}", ta.shape),
            });
        }
        let mut data = ta.data.clone();
        let (outer, inner, stride_o, stride_i) = if axis == 1 {
            (r, c, c, 1)
        } else {
            (c, r, 1, c)
        };
        for o in 0..outer {
            let at = |i: usize| o * stride_o + i * stride_i;
            let m = (0..inner)
                .map(|i| ta.data[at(i)].to_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = m
                + (0..inner)
                    .map(|i| (ta.data[at(i)].to_f64() - m).exp())
                    .sum::<f64>()
                    .ln();
            for i in 0..inner {
                data[at(i)] = T::from_f64(ta.data[at(i)].to_f64() - lse);
            }
        }
        let out = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a, axis), rg))
    }

    /// Same-padded 3×3 convolution on NHWC images flattened to `(B, H·W·C_in)`.
    /// `weight` is `(9·C_in, C_out)` ordered (ky, kx, c_in); `bias` is `(C_out,)`.
    pub fn conv3x3(&mut self, x: Var, weight: Var, bias: Var, h: usize, w: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(weight), self.value(bias));
        let (b, feat) = tx.dims2();
        if tx.shape.len() != 2 || feat % (h * w) != 0 {
            return Err(mismatch("conv3x3", tx, tw));
        }
        let cin = feat / (h * w);
        if tw.shape.len() != 2 || tw.shape[0] != 9 * cin {
            return Err(mismatch("conv3x3", tx, tw));
        }
        let cout = tw.shape[1];
        if tb.len() != cout {
            return Err(mismatch("conv3x3", tw, tb));
        }
        let geom = ConvGeom { h, w, cin, cout };
        let mut out = vec![T::ZERO; b * h * w * cout];
        let mut cols = vec![T::ZERO; h * w * 9 * cin];
        for n in 0..b {
            im2col(&tx.data[n * feat..(n + 1) * feat], &mut cols, geom);
            let o = &mut out[n * h * w * cout..(n + 1) * h * w * cout];
            for row in o.chunks_mut(cout) {
                row.copy_from_slice(&tb.data);
            }
            gemm_nn(&cols, &tw.data, o, h * w, 9 * cin, cout);
        }
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor {
                shape: vec![b, h * w * cout],
                data: out,
            },
            Op::Conv3x3(x, weight, bias, geom),
            rg,
        ))
    }

    /// 2×2 average pooling on NHWC images flattened to `(B, H·W·C)`; H and W must be even.
    pub fn avg_pool2(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let tx = self.value(x);
        let (b, feat) = tx.dims2();
        if !h.is_multiple_of(2) || !w.is_multiple_of(2) || !feat.is_multiple_of(h * w) {
            return Err(TensorError::Invalid {
                op: "avg_pool2",
                msg: format!("cannot pool {:?} as {h}x{w} images", tx.shape),
            });
        }
        let c = feat / (h * w);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let mut out = vec![T::ZERO; b * oh * ow * c];
        for n in 0..b {
            let src = &tx.data[n * feat..(n + 1) * feat];
            let dst = &mut out[n * oh * ow * c..(n + 1) * oh * ow * c];
            for y in 0..oh {
                for xx in 0..ow {
                    for ch in 0..c {
                        let mut s = T::ZERO;
                        for (dy, dx) in POOL_TAPS {
                            s += src[((2 * y + dy) * w + 2 * xx + dx) * c + ch];
                        }
                        dst[(y * ow + xx) * c + ch] = quarter * s;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![b, oh * ow * c],
                data: out,
            },
            Op::AvgPool2(x, h, w, c),
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape.clone();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::ONE]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.data.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => {
                        node.grad = Some(Tensor {
                            shape: node.value.shape.clone(),
                            data: g,
                        })
                    }
                }
                continue;
            }
            for (input, contrib) in self.local_grads(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let out = &self.nodes[id].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[id].op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&x| -x).collect())],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(&tb.data).map(|(&g, &y)| g * y).collect()),
                    (*b, g.iter().zip(&ta.data).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::Scale(a, k) => {
                let k = T::from_f64(*k);
                vec![(*a, g.iter().map(|&x| x * k).collect())]
            }
            Op::ScaleBy(a, s) => {
                let k = val(*s).data[0];
                let ds: f64 = g
                    .iter()
                    .zip(&val(*a).data)
                    .map(|(g, x)| g.to_f64() * x.to_f64())
                    .sum();
                vec![
                    (*a, g.iter().map(|&x| x * k).collect()),
                    (*s, vec![T::from_f64(ds)]),
                ]
            }
            Op::AddRow(a, row) => {
                let c = val(*row).len();
                let mut gr = vec![0.0f64; c];
                for chunk in g.chunks(c) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b.to_f64());
                }
                vec![
                    (*a, g.to_vec()),
                    (*row, gr.into_iter().map(T::from_f64).collect()),
                ]
            }
            Op::Relu(a) => vec![(
                *a,
                g.iter()
                    .zip(&val(*a).data)
                    .map(|(&g, &x)| if x > T::ZERO { g } else { T::ZERO })
                    .collect(),
            )],
            Op::Exp(a) => vec![(*a, g.iter().zip(&out.data).map(|(&g, &y)| g * y).collect())],
            Op::Ln(a) => vec![(
                *a,
                g.iter().zip(&val(*a).data).map(|(&g, &x)| g / x).collect(),
            )],
            Op::ClampMax(a, c) => {
                let c = T::from_f64(*c);
                vec![(
                    *a,
                    g.iter()
                        .zip(&val(*a).data)
                        .map(|(&g, &x)| if x < c { g } else { T::ZERO })
                        .collect(),
                )]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![T::from_f64(g[0].to_f64() / n as f64); n])]
            }
            Op::SumRows(a) => {
                let (_, c) = val(*a).dims2();
                vec![(
                    *a,
                    g.iter()
                        .flat_map(|&gi| std::iter::repeat_n(gi, c))
                        .collect(),
                )]
            }
            Op::RowNorm(a) => {
                let ta = val(*a);
                let (_, c) = ta.dims2();
                let mut d = vec![T::ZERO; ta.len()];
                for (i, (row, drow)) in ta.data.chunks(c).zip(d.chunks_mut(c)).enumerate() {
                    let n = out.data[i];
                    if n > T::ZERO {
                        drow.iter_mut()
                            .zip(row)
                            .for_each(|(d, &x)| *d = g[i] * x / n);
                    }
                }
                vec![(*a, d)]
            }
            Op::Concat(parts, axis) => {
                let mut res = Vec::with_capacity(parts.len());
                if *axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let n = val(*p).len();
                        res.push((*p, g[off..off + n].to_vec()));
                        off += n;
                    }
                } else {
                    let (rows, total) = (out.shape[0], out.shape[1]);
                    let mut col = 0;
                    for p in parts {
                        let w = val(*p).shape[1];
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + col..r * total + col + w]);
                        }
                        res.push((*p, d));
                        col += w;
                    }
                }
                res
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                let mut res = Vec::new();
                if need(*a) {
                    let mut da = vec![T::ZERO; m * k];
                    gemm_nt(g, &tb.data, &mut da, m, n, k);
                    res.push((*a, da));
                }
                if need(*b) {
                    let mut db = vec![T::ZERO; k * n];
                    gemm_tn(&ta.data, g, &mut db, m, k, n);
                    res.push((*b, db));
                }
                res
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape[0], val(*a).shape[1]);
                vec![(*a, transpose2(g, c, r))]
            }
            Op::GatherRows(a, idx) => {
                let ta = val(*a);
                let c = ta.shape[1];
                let mut d = vec![T::ZERO; ta.len()];
                for (k, &i) in idx.iter().enumerate() {
                    d[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[k * c..(k + 1) * c])
                        .for_each(|(d, &g)| *d += g);
                }
                vec![(*a, d)]
            }
            Op::L2Normalize(a) => {
                let ta = val(*a);
                let c = ta.shape[1];
                let mut d = vec![T::ZERO; ta.len()];
                for (i, drow) in d.chunks_mut(c).enumerate() {
                    let x = &ta.data[i * c..(i + 1) * c];
                    let y = &out.data[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let n = row_norm64(x);
                    if n > NORM_EPS {
                        let yg: f64 = y.iter().zip(gr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                        for j in 0..c {
                            drow[j] = T::from_f64((gr[j].to_f64() - y[j].to_f64() * yg) / n);
                        }
                    } else {
                        for j in 0..c {
                            drow[j] = T::from_f64(gr[j].to_f64() / NORM_EPS);
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::LogSoftmax(a, axis) => {
                let (r, c) = out.dims2();
                let (outer, inner, so, si) = if *axis == 1 {
                    (r, c, c, 1)
                } else {
                    (c, r, 1, c)
                };
                let mut d = vec![T::ZERO; out.len()];
                for o in 0..outer {
                    let at = |i: usize| o * so + i * si;
                    let gs: f64 = (0..inner).map(|i| g[at(i)].to_f64()).sum();
                    for i in 0..inner {
                        let p = out.data[at(i)].to_f64().exp();
                        d[at(i)] = T::from_f64(g[at(i)].to_f64() - p * gs);
                    }
                }
                vec![(*a, d)]
            }
            Op::Conv3x3(x, w, b, geom) => {
                let (tx, tw) = (val(*x), val(*w));
                let bsz = tx.shape[0];
                let feat = geom.h * geom.w * geom.cin;
                let hw = geom.h * geom.w;
                let kc = 9 * geom.cin;
                let mut dx = vec![T::ZERO; tx.len()];
                let mut dw = vec![T::ZERO; tw.len()];
                let mut db = vec![0.0f64; geom.cout];
                let mut cols = vec![T::ZERO; hw * kc];
                let mut dcols = vec![T::ZERO; hw * kc];
                for n in 0..bsz {
                    let gn = &g[n * hw * geom.cout..(n + 1) * hw * geom.cout];
                    for row in gn.chunks(geom.cout) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b.to_f64());
                    }
                    if need(*w) {
                        im2col(&tx.data[n * feat..(n + 1) * feat], &mut cols, *geom);
                        gemm_tn(&cols, gn, &mut dw, hw, kc, geom.cout);
                    }
                    if need(*x) {
                        dcols.iter_mut().for_each(|v| *v = T::ZERO);
                        gemm_nt(gn, &tw.data, &mut dcols, hw, geom.cout, kc);
                        col2im(&dcols, &mut dx[n * feat..(n + 1) * feat], *geom);
                    }
                }
                vec![
                    (*x, dx),
                    (*w, dw),
                    (*b, db.into_iter().map(T::from_f64).collect()),
                ]
            }
            Op::AvgPool2(x, h, w, c) => {
                let bsz = val(*x).shape[0];
                let (oh, ow) = (h / 2, w / 2);
                let feat = h * w * c;
                let quarter = T::from_f64(0.25);
                let mut d = vec![T::ZERO; bsz * feat];
                for n in 0..bsz {
                    let gsrc = &g[n * oh * ow * c..(n + 1) * oh * ow * c];
                    let dst = &mut d[n * feat..(n + 1) * feat];
                    for y in 0..oh {
                        for xx in 0..ow {
                            for ch in 0..*c {
                                let v = quarter * gsrc[(y * ow + xx) * c + ch];
                                for (dy, dx) in POOL_TAPS {
                                    dst[((2 * y + dy) * w + 2 * xx + dx) * c + ch] = v;
                                }
                            }
                        }
                    }
                }
                vec![(*x, d)]
            }
        }
    }
}

const POOL_TAPS: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

fn sum64<T: Real>(xs: &[T]) -> f64 {
    xs.iter().map(|x| x.to_f64()).sum()
}

fn row_norm64<T: Real>(row: &[T]) -> f64 {
    row.iter()
        .map(|x| x.to_f64() * x.to_f64())
        .sum::<f64>()
        .sqrt()
}

fn transpose2<T: Real>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// `c += a(m×k) · b(k×n)`
fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == T::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += aip * b);
        }
    }
}

/// `c += a(m×n) · b(k×n)ᵀ`, giving `m×k`.
fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += T::dot(arow, brow);
        }
    }
}

/// `c += a(m×k)ᵀ · b(m×n)`, giving `k×n`.
fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == T::ZERO {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += aip * b);
        }
    }
}

fn im2col<T: Real>(img: &[T], cols: &mut [T], g: ConvGeom) {
    let kc = 9 * g.cin;
    for y in 0..g.h {
        for x in 0..g.w {
            let dst = &mut cols[(y * g.w + x) * kc..(y * g.w + x + 1) * kc];
            for ky in 0..3 {
                for kx in 0..3 {
                    let seg = &mut dst[(ky * 3 + kx) * g.cin..(ky * 3 + kx + 1) * g.cin];
                    let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                    if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                        seg.iter_mut().for_each(|v| *v = T::ZERO);
                    } else {
                        let off = (sy as usize * g.w + sx as usize) * g.cin;
                        seg.copy_from_slice(&img[off..off + g.cin]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], img: &mut [T], g: ConvGeom) {
    let kc = 9 * g.cin;
    for y in 0..g.h {
        for x in 0..g.w {
            let src = &cols[(y * g.w + x) * kc..(y * g.w + x + 1) * kc];
            for ky in 0..3 {
                for kx in 0..3 {
                    let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                    if sy < 0 || sx < 0 || sy >= g.h as isize || sx >= g.w as isize {
                        continue;
                    }
                    let off = (sy as usize * g.w + sx as usize) * g.cin;
                    let seg = &src[(ky * 3 + kx) * g.cin..(ky * 3 + kx + 1) * g.cin];
                    img[off..off + g.cin]
                        .iter_mut()
                        .zip(seg)
                        .for_each(|(d, &s)| *d += s);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f32>::new();
        let i = g.constant(Tensor::identity(2));
        let x = g.constant(Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn dot_product_gradient() {
        let mut g = Graph::<f32>::new();
        let a = g.param(Tensor::vector(vec![1., 2., 3.]));
        let b = g.constant(Tensor::vector(vec![4., 5., 6.]));
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        assert_eq!(g.value(s).item(), 32.0);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[4., 5., 6.]);
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(
            err.contains("add") && err.contains("[2, 3]") && err.contains("[2, 2]"),
            "{err}"
        );
        let err = g.matmul(a, a).unwrap_err().to_string();
        assert!(err.starts_with("matmul"), "{err}");
    }

    #[test]
    fn l2_normalize_cases() {
        let mut g = Graph::<f32>::new();
        let x =
            g.constant(Tensor::from_rows(&[vec![3., 4.], vec![0., 0.], vec![0.6, 0.8]]).unwrap());
        let y = g.l2_normalize(x).unwrap();
        approx(g.value(y).data(), &[0.6, 0.8, 0.0, 0.0, 0.6, 0.8], 1e-7);
    }

    #[test]
    fn log_softmax_values() {
        use std::f32::consts::LN_2;
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_rows(&[vec![0., 0.], vec![1., 0.]]).unwrap());
        let y = g.log_softmax(x, 1).unwrap();
        approx(
            g.value(y).data(),
            &[-LN_2, -LN_2, -0.313262, -1.313262],
            1e-5,
        );
    }

    #[test]
    fn log_softmax_columns_match_transposed_rows() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new([2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.5]).unwrap());
        let by_col = g.log_softmax(x, 0).unwrap();
        let xt = g.transpose(x).unwrap();
        let by_row = g.log_softmax(xt, 1).unwrap();
        let back = g.transpose(by_row).unwrap();
        approx(g.value(by_col).data(), g.value(back).data(), 1e-6);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::vector(vec![1., 2., 3.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);

        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::vector(vec![2.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.]);
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::vector(vec![1., 2.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 2.]);
        let err = g.backward(x).unwrap_err();
        assert_eq!(err, TensorError::NotScalar(vec![2]));
    }

    #[test]
    fn concat_and_gather_route_gradients() {
        let mut g = Graph::<f32>::new();
        let a = g.param(Tensor::new([2, 1], vec![1., 2.]).unwrap());
        let b = g.param(Tensor::new([2, 2], vec![3., 4., 5., 6.]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let picked = g.gather_rows(c, &[1, 1, 0]).unwrap();
        let s = g.sum(picked);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1., 2.]);
        assert_eq!(g.grad(b).unwrap().data(), &[1., 1., 2., 2.]);
    }

    #[test]
    fn conv_with_centre_tap_is_identity() {
        let mut g = Graph::<f32>::new();
        let img: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let x = g.constant(Tensor::new([1, 16], img.clone()).unwrap());
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let w = g.constant(Tensor::new([9, 1], w).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0]));
        let y = g.conv3x3(x, w, b, 4, 4).unwrap();
        assert_eq!(g.value(y).data(), img.as_slice());
        let p = g.avg_pool2(y, 4, 4).unwrap();
        assert_eq!(g.value(p).data(), &[2.5, 4.5, 10.5, 12.5]);
    }
}
