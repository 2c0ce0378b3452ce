//! Dense float64 tensors and a tape-based reverse-mode differentiator.
//!
//! A [`Graph`] is an append-only tape. Every op pushes a node holding its
//! value plus whatever the backward rule needs, and returns a [`Var`] handle.
//! Parameters can be borrowed into the tape without copying, so a large
//! weight matrix costs nothing to register. [`Graph::backward`] walks the tape
//! once in reverse and accumulates into the gradient slots of every leaf that
//! requires a gradient; calling it again without [`Graph::zero_grad`] adds to
//! the existing values.
//!
//! Matrix ops work on rank-2 tensors in row-major order. Elementwise ops
//! accept equal shapes or a single-element operand.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("buffer of length {len} does not fill shape {shape:?}")]
    BadBuffer { shape: Vec<usize>, len: usize },
    #[error("{op} expects a rank-2 tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("log of non-positive value {0}")]
    LogNonPositive(f64),
    #[error("cannot normalize a zero-norm row")]
    ZeroNorm,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("backward called on an empty graph")]
    EmptyGraph,
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("group count {groups} does not divide width {width}")]
    BadGrouping { groups: usize, width: usize },
}

pub type Result<T> = core::result::Result<T, TensorError>;

/// Row-major float64 array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::BadBuffer {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::NotMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Graph`].
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
    Detach,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sqrt(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MaxAxis(Var, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
    GroupMaxAvg(Var, usize, Vec<usize>),
    RowDot(Var, Var),
    PairwiseDist(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    leaf_grads: Vec<Option<Tensor>>,
    visits: usize,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Below this magnitude a Euclidean distance is treated as zero for the
/// purpose of its gradient.
const DIST_EPS: f64 = 1e-12;

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape == b.shape || a.is_scalar() || b.is_scalar() {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        })
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let shape = if a.len() >= b.len() {
        a.shape.clone()
    } else {
        b.shape.clone()
    };
    let n = a.len().max(b.len());
    let data = (0..n)
        .map(|i| {
            let x = if a.len() == 1 { a.data[0] } else { a.data[i] };
            let y = if b.len() == 1 { b.data[0] } else { b.data[i] };
            f(x, y)
        })
        .collect();
    Tensor { shape, data }
}

/// Sums `g` down to the extent of `target` (identity unless `target` is a
/// broadcast scalar).
fn reduce_to(target: &Tensor, g: &[f64]) -> Vec<f64> {
    if target.len() == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().sum()]
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let c = *t.shape.last().unwrap();
    let mut out = t.data.clone();
    for row in out.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - m);
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor {
        shape: t.shape.clone(),
        data: out,
    }
}

fn log_softmax_rows(t: &Tensor) -> Tensor {
    let c = *t.shape.last().unwrap();
    let mut out = t.data.clone();
    for row in out.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + math::ln(row.iter().map(|&v| math::exp(v - m)).sum::<f64>());
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor {
        shape: t.shape.clone(),
        data: out,
    }
}

/// `c (+)= a · b` for row-major `a: m×k`, `b: k×n`, with optional transposes
/// expressed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // a is stored as m×k (or k×m when a_t), b as k×n (or n×k when b_t)
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover the strided extents checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            visits: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes visited by the most recent [`Graph::backward`].
    pub fn last_backward_visits(&self) -> usize {
        self.visits
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        Ok(self.push(Cow::Owned(value), op, requires_grad))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    /// Leaf that does not require a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Owned leaf.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, requires_grad)
    }

    /// Borrowed leaf; the tensor is not copied.
    pub fn param(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, requires_grad)
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(Cow::Owned(v), Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.value(a).data,
            false,
            &self.value(b).data,
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(
            "matmul",
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_or_scalar(name, self.value(a), self.value(b))?;
        let out = broadcast_zip(self.value(a), self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(name, out, op, rg)
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

    /// Adds a `1×n` (or length-`n`) row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.value(a).dims2("add_row")?;
        if self.value(row).len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(row).shape.clone(),
            });
        }
        let r = &self.value(row).data;
        let mut out = self.value(a).clone();
        for chunk in out.data.chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push_checked("add_row", out, Op::AddRow(a, row), rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = map(self.value(a), f);
        let rg = self.rg(a);
        self.push_checked(name, out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, math::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data.iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::LogNonPositive(bad));
        }
        self.unary("log", a, math::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, math::abs, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data.iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::LogNonPositive(bad));
        }
        self.unary("sqrt", a, math::sqrt, Op::Sqrt(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sum of a rank-2 tensor over `axis`, keeping the reduced extent as 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("sum_axis")?;
        let out = match axis {
            0 => {
                let mut o = vec![0.0; n];
                for row in t.data.chunks(n) {
                    for (acc, v) in o.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                Tensor {
                    shape: vec![1, n],
                    data: o,
                }
            }
            1 => Tensor {
                shape: vec![m, 1],
                data: t.data.chunks(n).map(|r| r.iter().sum()).collect(),
            },
            _ => return Err(TensorError::AxisOutOfRange { axis, rank: 2 }),
        };
        let rg = self.rg(a);
        self.push_checked("sum_axis", out, Op::SumAxis(a, axis), rg)
    }

    /// Maximum of a rank-2 tensor over `axis`; ties resolve to the lowest index.
    pub fn max_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("max_over_axis")?;
        let (shape, arg): (Vec<usize>, Vec<usize>) = match axis {
            0 => (
                vec![1, n],
                (0..n)
                    .map(|j| {
                        (0..m).map(|i| i * n + j).fold(j, |best, idx| {
                            if t.data[idx] > t.data[best] {
                                idx
                            } else {
                                best
                            }
                        })
                    })
                    .collect(),
            ),
            1 => (
                vec![m, 1],
                (0..m)
                    .map(|i| {
                        (i * n..(i + 1) * n).fold(i * n, |best, idx| {
                            if t.data[idx] > t.data[best] {
                                idx
                            } else {
                                best
                            }
                        })
                    })
                    .collect(),
            ),
            _ => return Err(TensorError::AxisOutOfRange { axis, rank: 2 }),
        };
        let data = arg.iter().map(|&i| t.data[i]).collect();
        let rg = self.rg(a);
        self.push_checked(
            "max_over_axis",
            Tensor { shape, data },
            Op::MaxAxis(a, arg),
            rg,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push_checked("softmax", out, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = log_softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push_checked("log_softmax", out, Op::LogSoftmax(a), rg)
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = *t.shape.last().unwrap();
        let norms: Vec<f64> = t
            .data
            .chunks(c)
            .map(|r| math::sqrt(r.iter().map(|v| v * v).sum()))
            .collect();
        if norms.iter().any(|&n| n == 0.0) {
            return Err(TensorError::ZeroNorm);
        }
        let mut out = t.clone();
        for (row, n) in out.data.chunks_mut(c).zip(&norms) {
            for v in row {
                *v /= n;
            }
        }
        let rg = self.rg(a);
        self.push_checked("l2_normalize", out, Op::L2Normalize(a, norms), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape.clone(),
                    rhs: self.value(p).shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push_checked(
            "concat_cols",
            Tensor {
                shape: vec![m, total],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2("slice_cols")?;
        if start + width > n || width == 0 {
            return Err(TensorError::IndexOutOfRange {
                index: start + width,
                extent: n,
            });
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + width]);
        }
        let rg = self.rg(a);
        self.push_checked(
            "slice_cols",
            Tensor {
                shape: vec![m, width],
                data,
            },
            Op::SliceCols(a, start),
            rg,
        )
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2("gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(TensorError::IndexOutOfRange {
                    index: r,
                    extent: m,
                });
            }
            data.extend_from_slice(self.value(a).row(r));
        }
        let rg = self.rg(a);
        self.push_checked(
            "gather_rows",
            Tensor {
                shape: vec![rows.len(), n],
                data,
            },
            Op::GatherRows(a, rows.to_vec()),
            rg,
        )
    }

    /// `out[i] = a[i, cols[i]]`, shaped `m×1`.
    pub fn pick_per_row(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2("pick_per_row")?;
        if cols.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "pick_per_row",
                lhs: vec![m, n],
                rhs: vec![cols.len()],
            });
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= n) {
            return Err(TensorError::IndexOutOfRange {
                index: c,
                extent: n,
            });
        }
        let data = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| self.value(a).data[i * n + c])
            .collect();
        let rg = self.rg(a);
        self.push_checked(
            "pick_per_row",
            Tensor {
                shape: vec![m, 1],
                data,
            },
            Op::PickPerRow(a, cols.to_vec()),
            rg,
        )
    }

    /// Views each row as `groups` contiguous groups and emits the per-group
    /// maxima followed by the per-group means (`m × 2·groups`).
    pub fn group_max_avg(&mut self, a: Var, groups: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2("group_max_avg")?;
        if groups == 0 || n % groups != 0 {
            return Err(TensorError::BadGrouping { groups, width: n });
        }
        let gs = n / groups;
        let t = self.value(a);
        let mut data = Vec::with_capacity(m * 2 * groups);
        let mut arg = Vec::with_capacity(m * groups);
        for i in 0..m {
            let row = t.row(i);
            let mut means = Vec::with_capacity(groups);
            for g in 0..groups {
                let seg = &row[g * gs..(g + 1) * gs];
                let best = (1..gs).fold(0, |b, j| if seg[j] > seg[b] { j } else { b });
                arg.push(i * n + g * gs + best);
                data.push(seg[best]);
                means.push(seg.iter().sum::<f64>() / gs as f64);
            }
            data.extend(means);
        }
        let rg = self.rg(a);
        self.push_checked(
            "group_max_avg",
            Tensor {
                shape: vec![m, 2 * groups],
                data,
            },
            Op::GroupMaxAvg(a, groups, arg),
            rg,
        )
    }

    /// Row-wise inner product of two equal-shape matrices, shaped `m×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("row_dot")?;
        if self.value(b).shape != [m, n] {
            return Err(TensorError::ShapeMismatch {
                op: "row_dot",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let data = (0..m)
            .map(|i| {
                self.value(a)
                    .row(i)
                    .iter()
                    .zip(self.value(b).row(i))
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(
            "row_dot",
            Tensor {
                shape: vec![m, 1],
                data,
            },
            Op::RowDot(a, b),
            rg,
        )
    }

    /// Euclidean distance matrix between the rows of `a` (`m×m`).
    pub fn pairwise_dist(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.value(a).dims2("pairwise_dist")?;
        let t = self.value(a);
        let mut data = vec![0.0; m * m];
        for i in 0..m {
            for j in (i + 1)..m {
                let d = math::sqrt(
                    t.row(i)
                        .iter()
                        .zip(t.row(j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum(),
                );
                data[i * m + j] = d;
                data[j * m + i] = d;
            }
        }
        let rg = self.rg(a);
        self.push_checked(
            "pairwise_dist",
            Tensor {
                shape: vec![m, m],
                data,
            },
            Op::PairwiseDist(a),
            rg,
        )
    }

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyGraph);
        }
        if !self.value(root).is_scalar() {
            return Err(TensorError::NonScalarRoot(self.value(root).shape.clone()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.0] = Some(vec![1.0]);
        self.visits = 0;
        for i in (0..n).rev() {
            self.visits += 1;
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        let out = &self.nodes[i].value;
        let nodes = &self.nodes;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let rg = |v: Var| nodes[v.0].requires_grad;

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }
        fn acc_vec(grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
            match &mut grads[v.0] {
                Some(s) => s.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        }

        match op {
            Op::Leaf => {
                let shape = out.shape.clone();
                match &mut self.leaf_grads[i] {
                    Some(t) => t.data.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(Tensor { shape, data: g }),
                }
            }
            Op::Detach => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape[0], val(a).shape[1]);
                let n = val(b).shape[1];
                if rg(a) {
                    let bd = &val(b).data;
                    acc(grads, a, m * k, |s| {
                        gemm(m, n, k, &g, false, bd, true, s, true)
                    });
                }
                if rg(b) {
                    let ad = &val(a).data;
                    acc(grads, b, k * n, |s| {
                        gemm(k, m, n, ad, true, &g, false, s, true)
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(a) {
                    acc_vec(grads, a, reduce_to(val(a), &g));
                }
                if rg(b) {
                    let d: Vec<f64> = reduce_to(val(b), &g)
                        .into_iter()
                        .map(|x| sign * x)
                        .collect();
                    acc_vec(grads, b, d);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let at = |t: &Tensor, j: usize| if t.len() == 1 { t.data[0] } else { t.data[j] };
                if rg(a) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(j, x)| x * at(tb, j)).collect();
                    acc_vec(grads, a, reduce_to(ta, &full));
                }
                if rg(b) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(j, x)| x * at(ta, j)).collect();
                    acc_vec(grads, b, reduce_to(tb, &full));
                }
            }
            Op::AddRow(a, row) => {
                if rg(a) {
                    acc_vec(grads, a, g.clone());
                }
                if rg(row) {
                    let n = val(row).len();
                    acc(grads, row, n, |s| {
                        for chunk in g.chunks(n) {
                            s.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(&val(a).data)
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                acc_vec(grads, a, d);
            }
            Op::Exp(a) => {
                let d = g.iter().zip(&out.data).map(|(gi, y)| gi * y).collect();
                acc_vec(grads, a, d);
            }
            Op::Log(a) => {
                let d = g.iter().zip(&val(a).data).map(|(gi, x)| gi / x).collect();
                acc_vec(grads, a, d);
            }
            Op::Abs(a) => {
                let d = g
                    .iter()
                    .zip(&val(a).data)
                    .map(|(gi, &x)| {
                        if x > 0.0 {
                            *gi
                        } else if x < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc_vec(grads, a, d);
            }
            Op::Sqrt(a) => {
                let d = g
                    .iter()
                    .zip(&out.data)
                    .map(|(gi, y)| gi * 0.5 / y)
                    .collect();
                acc_vec(grads, a, d);
            }
            Op::Scale(a, c) => {
                acc_vec(grads, a, g.iter().map(|x| x * c).collect());
            }
            Op::AddScalar(a) => acc_vec(grads, a, g),
            Op::Sum(a) => {
                let n = val(a).len();
                acc_vec(grads, a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = val(a).len();
                acc_vec(grads, a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(a, axis) => {
                let (m, n) = (val(a).shape[0], val(a).shape[1]);
                let d = (0..m * n)
                    .map(|idx| if axis == 0 { g[idx % n] } else { g[idx / n] })
                    .collect();
                acc_vec(grads, a, d);
            }
            Op::MaxAxis(a, arg) => {
                let n = val(a).len();
                acc(grads, a, n, |s| {
                    for (gi, &idx) in g.iter().zip(&arg) {
                        s[idx] += gi;
                    }
                });
            }
            Op::Softmax(a) => {
                let c = *out.shape.last().unwrap();
                let mut d = Vec::with_capacity(g.len());
                for (gy, y) in g.chunks(c).zip(out.data.chunks(c)) {
                    let dot: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                    d.extend(gy.iter().zip(y).map(|(gj, yj)| yj * (gj - dot)));
                }
                acc_vec(grads, a, d);
            }
            Op::LogSoftmax(a) => {
                let c = *out.shape.last().unwrap();
                let mut d = Vec::with_capacity(g.len());
                for (gy, y) in g.chunks(c).zip(out.data.chunks(c)) {
                    let s: f64 = gy.iter().sum();
                    d.extend(gy.iter().zip(y).map(|(gj, yj)| gj - math::exp(*yj) * s));
                }
                acc_vec(grads, a, d);
            }
            Op::L2Normalize(a, norms) => {
                let c = *out.shape.last().unwrap();
                let mut d = Vec::with_capacity(g.len());
                for ((gy, y), nrm) in g.chunks(c).zip(out.data.chunks(c)).zip(&norms) {
                    let dot: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                    d.extend(gy.iter().zip(y).map(|(gj, yj)| (gj - yj * dot) / nrm));
                }
                acc_vec(grads, a, d);
            }
            Op::ConcatCols(parts) => {
                let m = out.shape[0];
                let total = out.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = val(p).shape[1];
                    if rg(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc_vec(grads, p, d);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = (val(a).shape[0], val(a).shape[1]);
                let w = out.shape[1];
                acc(grads, a, m * n, |s| {
                    for r in 0..m {
                        for c in 0..w {
                            s[r * n + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::GatherRows(a, rows) => {
                let n = val(a).shape[1];
                let len = val(a).len();
                acc(grads, a, len, |s| {
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..n {
                            s[r * n + c] += g[k * n + c];
                        }
                    }
                });
            }
            Op::PickPerRow(a, cols) => {
                let n = val(a).shape[1];
                let len = val(a).len();
                acc(grads, a, len, |s| {
                    for (i, &c) in cols.iter().enumerate() {
                        s[i * n + c] += g[i];
                    }
                });
            }
            Op::GroupMaxAvg(a, groups, arg) => {
                let (m, n) = (val(a).shape[0], val(a).shape[1]);
                let gs = n / groups;
                acc(grads, a, m * n, |s| {
                    for i in 0..m {
                        for grp in 0..groups {
                            let gmax = g[i * 2 * groups + grp];
                            s[arg[i * groups + grp]] += gmax;
                            let gavg = g[i * 2 * groups + groups + grp] / gs as f64;
                            for j in 0..gs {
                                s[i * n + grp * gs + j] += gavg;
                            }
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let n = val(a).shape[1];
                if rg(a) {
                    let d = val(b)
                        .data
                        .iter()
                        .enumerate()
                        .map(|(idx, y)| g[idx / n] * y)
                        .collect();
                    acc_vec(grads, a, d);
                }
                if rg(b) {
                    let d = val(a)
                        .data
                        .iter()
                        .enumerate()
                        .map(|(idx, x)| g[idx / n] * x)
                        .collect();
                    acc_vec(grads, b, d);
                }
            }
            Op::PairwiseDist(a) => {
                let t = val(a);
                let (m, n) = (t.shape[0], t.shape[1]);
                acc(grads, a, m * n, |s| {
                    for i in 0..m {
                        for j in 0..m {
                            let d = out.data[i * m + j];
                            if i == j || d < DIST_EPS {
                                continue;
                            }
                            // d_ij depends on rows i and j; both (i,j) and (j,i) entries
                            // contribute, each handled once from row i's perspective here.
                            let w = (g[i * m + j] + g[j * m + i]) / d;
                            for c in 0..n {
                                s[i * n + c] += w * (t.data[i * n + c] - t.data[j * n + c]);
                            }
                        }
                    }
                });
            }
        }
    }
}
