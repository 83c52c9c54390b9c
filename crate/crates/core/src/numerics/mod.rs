//! Minimal define-by-run reverse-mode differentiation over dense row-major
//! arrays.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a node
//! holding its output [`DiffArray`] together with whatever it needs for the
//! backward sweep. [`Tape::backward`] walks the nodes in reverse creation order,
//! which is a valid reverse topological order because inputs always precede
//! outputs. Every kernel runs single-threaded in a fixed loop order, so a fixed
//! forward order yields bit-identical gradients.
//!
//! The engine is generic over [`Scalar`]: training runs in `f32`, gradient
//! checks in `f64`.

mod attention;
mod gradcheck;
pub mod kernels;

use std::fmt::{Debug, Display};

use thiserror::Error;

pub use attention::{multi_head_attention, scaled_dot_attention};
pub use gradcheck::{finite_difference_check, CoordSelection, GradCheckError, GradCheckReport};

/// Floating point element type of a [`Tape`].
pub trait Scalar: num_traits::Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("{op}: {detail}")]
    Mismatch { op: &'static str, detail: String },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    BadLength { op: &'static str, len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

fn mismatch(op: &'static str, detail: impl Into<String>) -> ShapeError {
    ShapeError::Mismatch { op, detail: detail.into() }
}

/// Dense n-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> DiffArray<T> {
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self, ShapeError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ShapeError::BadLength { op: "DiffArray::new", len: data.len(), shape: shape.to_vec() });
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Relu { x: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    L2NormalizeRows { x: Var, norms: Vec<T>, eps: T },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    GatherRows { x: Var, index: Vec<usize> },
    Reshape { x: Var },
    MeanRows { x: Var },
    Sum { x: Var },
    MaskedCrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<usize> },
    WeightedSum { terms: Vec<(Var, T)> },
}

#[derive(Debug)]
struct Node<T> {
    value: DiffArray<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by contraction ops (affine and matmul)
    /// recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn array(&self, v: Var) -> &DiffArray<T> {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: DiffArray<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), ShapeError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(mismatch(op, format!("expected a 2-d array, got shape {s:?}"))),
        }
    }

    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Var, ShapeError> {
        let value = DiffArray::new(data, shape)?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Var, ShapeError> {
        self.leaf(data, shape, false)
    }

    pub fn param(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Var, ShapeError> {
        self.leaf(data, shape, true)
    }

    /// `y = x·W + b` for `x: [N, Din]`, `W: [Din, Dout]`, `b: [Dout]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, ShapeError> {
        let (n, din) = self.dims2(x, "affine")?;
        let (wi, dout) = self.dims2(w, "affine")?;
        if din != wi {
            return Err(mismatch("affine", format!("x is [{n}, {din}] but W is [{wi}, {dout}]")));
        }
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != dout {
                return Err(mismatch("affine", format!("bias has {} entries, expected {dout}", bias.len())));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        kernels::gemm_nn(self.value(x), self.value(w), &mut out, n, din, dout);
        self.macs += (n * din * dout) as u64;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.rg(&ins);
        Ok(self.push(DiffArray { shape: vec![n, dout], data: out, grad: None }, Op::Affine { x, w, b }, rg))
    }

    /// `a[n,k] · b[k,m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (n, k) = self.dims2(a, "matmul")?;
        let (k2, m) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{n}, {k}] x [{k2}, {m}]")));
        }
        let mut out = vec![T::zero(); n * m];
        kernels::gemm_nn(self.value(a), self.value(b), &mut out, n, k, m);
        self.macs += (n * k * m) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(DiffArray { shape: vec![n, m], data: out, grad: None }, Op::MatMul { a, b }, rg))
    }

    /// `a[n,k] · b[m,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (n, k) = self.dims2(a, "matmul_nt")?;
        let (m, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", format!("[{n}, {k}] x [{m}, {k2}]^T")));
        }
        let mut out = vec![T::zero(); n * m];
        kernels::gemm_nt(self.value(a), self.value(b), &mut out, n, k, m);
        self.macs += (n * k * m) as u64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(DiffArray { shape: vec![n, m], data: out, grad: None }, Op::MatMulNt { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(DiffArray { shape, data, grad: None }, Op::Add { a, b }, rg))
    }

    /// Adds a `[D]` row to every row of `x: [N, D]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, ShapeError> {
        let (_, d) = self.dims2(x, "add_row")?;
        let r = self.value(row);
        if r.len() != d {
            return Err(mismatch("add_row", format!("row has {} entries, x rows have {d}", r.len())));
        }
        let mut data = self.value(x).to_vec();
        for chunk in data.chunks_mut(d) {
            for (v, &rv) in chunk.iter_mut().zip(r) {
                *v = *v + rv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, row]);
        Ok(self.push(DiffArray { shape, data, grad: None }, Op::AddRow { x, row }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(DiffArray { shape, data, grad: None }, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let data = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(DiffArray { shape, data, grad: None }, Op::Scale { x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(DiffArray { shape, data, grad: None }, Op::Relu { x }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(DiffArray { shape, data, grad: None }, Op::Gelu { x }, rg)
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, ShapeError> {
        let d = *self.shape(x).last().ok_or_else(|| mismatch("layer_norm", "empty shape"))?;
        if d == 0 || self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(mismatch("layer_norm", format!("last axis {d}, gamma {} and beta {} entries", self.value(gamma).len(), self.value(beta).len())));
        }
        if eps <= T::zero() {
            return Err(mismatch("layer_norm", "eps must be positive"));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xs.len() / d;
        let inv_d = T::one() / T::of(d as f64);
        let mut out = vec![T::zero(); xs.len()];
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + b[i];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(DiffArray { shape, data: out, grad: None }, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, ShapeError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("softmax", format!("axis {axis} out of range for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x);
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let mut max = T::neg_infinity();
                for k in 0..len {
                    max = max.max(xs[at(k)]);
                }
                let mut z = T::zero();
                for k in 0..len {
                    let e = (xs[at(k)] - max).exp();
                    out[at(k)] = e;
                    z = z + e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(DiffArray { shape, data: out, grad: None }, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Divides each row of `x: [N, D]` by `max(‖row‖, eps)`; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var, ShapeError> {
        let (n, d) = self.dims2(x, "l2_normalize_rows")?;
        let xs = self.value(x);
        let mut out = vec![T::zero(); n * d];
        let mut norms = vec![T::zero(); n];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let norm = kernels::dot(row, row).sqrt();
            norms[r] = norm;
            let denom = norm.max(eps);
            for i in 0..d {
                out[r * d + i] = row[i] / denom;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(DiffArray { shape: vec![n, d], data: out, grad: None }, Op::L2NormalizeRows { x, norms, eps }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, ShapeError> {
        let (n, d) = self.dims2(x, "slice_cols")?;
        if start + len > d {
            return Err(mismatch("slice_cols", format!("columns {start}..{} of {d}", start + len)));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xs[r * d + start..r * d + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(DiffArray { shape: vec![n, len], data: out, grad: None }, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let first = *parts.first().ok_or_else(|| mismatch("concat_cols", "no inputs"))?;
        let (n, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != n {
                return Err(mismatch("concat_cols", format!("row counts {n} and {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(DiffArray { shape: vec![n, total], data: out, grad: None }, Op::ConcatCols { parts: parts.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let first = *parts.first().ok_or_else(|| mismatch("concat_rows", "no inputs"))?;
        let (_, d) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != d {
                return Err(mismatch("concat_rows", format!("column counts {d} and {c}")));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(DiffArray { shape: vec![rows, d], data: out, grad: None }, Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Selects rows of `x: [N, D]` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, ShapeError> {
        let (n, d) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(mismatch("gather_rows", format!("row {bad} out of {n}")));
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(&xs[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(DiffArray { shape: vec![index.len(), d], data: out, grad: None }, Op::GatherRows { x, index: index.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, ShapeError> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(mismatch("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(DiffArray { shape: shape.to_vec(), data, grad: None }, Op::Reshape { x }, rg))
    }

    /// Column means of `x: [N, D]`, shaped `[1, D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, ShapeError> {
        let (n, d) = self.dims2(x, "mean_rows")?;
        if n == 0 {
            return Err(mismatch("mean_rows", "no rows"));
        }
        let xs = self.value(x);
        let mut out = vec![T::zero(); d];
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(&xs[r * d..(r + 1) * d]) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::of(n as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        let rg = self.rg(&[x]);
        Ok(self.push(DiffArray { shape: vec![1, d], data: out, grad: None }, Op::MeanRows { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(DiffArray { shape: vec![1], data: vec![s], grad: None }, Op::Sum { x }, rg)
    }

    /// Mean over rows of `−log softmax(logits_r)[targets_r]`, where the
    /// softmax of row `r` runs only over columns admitted by `mask` (row-major
    /// `[N, C]`; `None` admits every column). The target column is always
    /// admitted.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var, ShapeError> {
        let (n, c) = self.dims2(logits, "masked_cross_entropy")?;
        if targets.len() != n || n == 0 {
            return Err(mismatch("masked_cross_entropy", format!("{} targets for {n} rows", targets.len())));
        }
        if let Some(m) = mask {
            if m.len() != n * c {
                return Err(mismatch("masked_cross_entropy", format!("mask has {} entries, expected {}", m.len(), n * c)));
            }
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(mismatch("masked_cross_entropy", format!("target {bad} out of {c} classes")));
        }
        let ls = self.value(logits);
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for r in 0..n {
            let admit = |j: usize| j == targets[r] || mask.is_none_or(|m| m[r * c + j]);
            let row = &ls[r * c..(r + 1) * c];
            let mut max = T::neg_infinity();
            for j in 0..c {
                if admit(j) {
                    max = max.max(row[j]);
                }
            }
            let mut z = T::zero();
            for j in 0..c {
                if admit(j) {
                    let e = (row[j] - max).exp();
                    probs[r * c + j] = e;
                    z = z + e;
                }
            }
            for j in 0..c {
                probs[r * c + j] = probs[r * c + j] / z;
            }
            total = total + (z.ln() + max - row[targets[r]]);
        }
        let loss = total / T::of(n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(DiffArray { shape: vec![1], data: vec![loss], grad: None }, Op::MaskedCrossEntropy { logits, probs, targets: targets.to_vec() }, rg))
    }

    /// `Σ wᵢ·xᵢ` over single-element nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var, ShapeError> {
        let mut s = T::zero();
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(mismatch("weighted_sum", format!("term has shape {:?}", self.shape(v))));
            }
            s = s + w * self.value(v)[0];
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(DiffArray { shape: vec![1], data: vec![s], grad: None }, Op::WeightedSum { terms: terms.to_vec() }, rg))
    }

    /// Reverse sweep from a single-element `loss`. Afterwards every node that
    /// depends on a gradient-requiring leaf carries a gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<(), ShapeError> {
        if self.value(loss).len() != 1 {
            return Err(ShapeError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.grad = if node.requires_grad { g } else { None };
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let acc = |v: Var, grads: &mut [Option<Vec<T>>], f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.data.len()]);
            f(buf);
        };
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (n, din) = (nodes[x.0].value.shape[0], nodes[x.0].value.shape[1]);
                let dout = nodes[w.0].value.shape[1];
                if needs(*x) {
                    let wv = &nodes[w.0].value.data;
                    acc(*x, grads, &mut |buf| kernels::gemm_nt(g, wv, buf, n, dout, din));
                }
                if needs(*w) {
                    let xv = &nodes[x.0].value.data;
                    acc(*w, grads, &mut |buf| kernels::gemm_tn(xv, g, buf, n, din, dout));
                }
                if let Some(b) = b {
                    acc(*b, grads, &mut |buf| {
                        for row in g.chunks(dout) {
                            for (o, &v) in buf.iter_mut().zip(row) {
                                *o = *o + v;
                            }
                        }
                    });
                }
            }
            Op::MatMul { a, b } => {
                let (n, k) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
                let m = nodes[b.0].value.shape[1];
                if needs(*a) {
                    let bv = &nodes[b.0].value.data;
                    acc(*a, grads, &mut |buf| kernels::gemm_nt(g, bv, buf, n, m, k));
                }
                if needs(*b) {
                    let av = &nodes[a.0].value.data;
                    acc(*b, grads, &mut |buf| kernels::gemm_tn(av, g, buf, n, k, m));
                }
            }
            Op::MatMulNt { a, b } => {
                let (n, k) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
                let m = nodes[b.0].value.shape[0];
                if needs(*a) {
                    let bv = &nodes[b.0].value.data;
                    acc(*a, grads, &mut |buf| kernels::gemm_nn(g, bv, buf, n, m, k));
                }
                if needs(*b) {
                    let av = &nodes[a.0].value.data;
                    acc(*b, grads, &mut |buf| kernels::gemm_tn(g, av, buf, n, m, k));
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    acc(v, grads, &mut |buf| add_into(buf, g));
                }
            }
            Op::AddRow { x, row } => {
                acc(*x, grads, &mut |buf| add_into(buf, g));
                let d = nodes[row.0].value.data.len();
                acc(*row, grads, &mut |buf| {
                    for chunk in g.chunks(d) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                acc(*a, grads, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + g[i] * bv[i];
                    }
                });
                acc(*b, grads, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + g[i] * av[i];
                    }
                });
            }
            Op::Scale { x, factor } => {
                acc(*x, grads, &mut |buf| {
                    for (o, &v) in buf.iter_mut().zip(g) {
                        *o = *o + v * *factor;
                    }
                });
            }
            Op::Relu { x } => {
                let xv = &nodes[x.0].value.data;
                acc(*x, grads, &mut |buf| {
                    for i in 0..buf.len() {
                        if xv[i] > T::zero() {
                            buf[i] = buf[i] + g[i];
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = &nodes[x.0].value.data;
                acc(*x, grads, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] = buf[i] + g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = nodes[gamma.0].value.data.len();
                let gm = &nodes[gamma.0].value.data;
                let rows = xhat.len() / d;
                if needs(*x) {
                    acc(*x, grads, &mut |buf| {
                        let inv_d = T::one() / T::of(d as f64);
                        for r in 0..rows {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let mut mean_dh = T::zero();
                            let mut mean_dh_h = T::zero();
                            for i in 0..d {
                                let dh = gr[i] * gm[i];
                                mean_dh = mean_dh + dh;
                                mean_dh_h = mean_dh_h + dh * hr[i];
                            }
                            mean_dh = mean_dh * inv_d;
                            mean_dh_h = mean_dh_h * inv_d;
                            for i in 0..d {
                                let dh = gr[i] * gm[i];
                                buf[r * d + i] = buf[r * d + i] + rstd[r] * (dh - mean_dh - hr[i] * mean_dh_h);
                            }
                        }
                    });
                }
                acc(*gamma, grads, &mut |buf| {
                    for r in 0..rows {
                        for i in 0..d {
                            buf[i] = buf[i] + g[r * d + i] * xhat[r * d + i];
                        }
                    }
                });
                acc(*beta, grads, &mut |buf| {
                    for chunk in g.chunks(d) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = &node.value.data;
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, grads, &mut |buf| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let mut s = T::zero();
                            for k in 0..len {
                                s = s + y[at(k)] * g[at(k)];
                            }
                            for k in 0..len {
                                buf[at(k)] = buf[at(k)] + y[at(k)] * (g[at(k)] - s);
                            }
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms, eps } => {
                let y = &node.value.data;
                let d = node.value.shape[1];
                acc(*x, grads, &mut |buf| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        if norm > *eps {
                            let proj = kernels::dot(yr, gr);
                            for i in 0..d {
                                buf[r * d + i] = buf[r * d + i] + (gr[i] - yr[i] * proj) / norm;
                            }
                        } else {
                            for i in 0..d {
                                buf[r * d + i] = buf[r * d + i] + gr[i] / *eps;
                            }
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let d = nodes[x.0].value.shape[1];
                let w = node.value.shape[1];
                acc(*x, grads, &mut |buf| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        add_into(&mut buf[r * d + start..r * d + start + w], gr);
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total = node.value.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].value.shape[1];
                    acc(p, grads, &mut |buf| {
                        for (r, chunk) in buf.chunks_mut(w).enumerate() {
                            add_into(chunk, &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.data.len();
                    acc(p, grads, &mut |buf| add_into(buf, &g[off..off + n]));
                    off += n;
                }
            }
            Op::GatherRows { x, index } => {
                let d = node.value.shape[1];
                acc(*x, grads, &mut |buf| {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut buf[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Reshape { x } => acc(*x, grads, &mut |buf| add_into(buf, g)),
            Op::MeanRows { x } => {
                let n = nodes[x.0].value.shape[0];
                let inv = T::one() / T::of(n as f64);
                acc(*x, grads, &mut |buf| {
                    for chunk in buf.chunks_mut(g.len()) {
                        for (o, &v) in chunk.iter_mut().zip(g) {
                            *o = *o + v * inv;
                        }
                    }
                });
            }
            Op::Sum { x } => acc(*x, grads, &mut |buf| buf.iter_mut().for_each(|o| *o = *o + g[0])),
            Op::MaskedCrossEntropy { logits, probs, targets } => {
                let c = nodes[logits.0].value.shape[1];
                let scale = g[0] / T::of(targets.len() as f64);
                acc(*logits, grads, &mut |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let mut d = probs[r * c + j];
                            if j == t {
                                d = d - T::one();
                            }
                            buf[r * c + j] = buf[r * c + j] + d * scale;
                        }
                    }
                });
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    acc(v, grads, &mut |buf| buf[0] = buf[0] + w * g[0]);
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let k = T::of(GELU_K);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of(GELU_K);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let th = (k * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + T::of(3.0) * a * x * x)
}
