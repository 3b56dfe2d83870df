//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable operation links its output to the producing
//! operation and its inputs; `backward` walks that record in exact
//! reverse execution order and accumulates gradients additively into
//! per-tensor slots. `detach` severs the linkage.
//!
//! Tensors are handles (`Clone` is shallow); a graph and its tensors are
//! confined to one thread. Independent graphs may run on parallel threads.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use crate::{Error, Result};

thread_local! {
    // Monotonic creation stamp; descending order == reverse execution order.
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

// ── Tensor handle ────────────────────────────────────────────────────

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .finish()
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if numel_of(shape) != values.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel_of(shape),
                values.len()
            )));
        }
        Ok(Self::make(shape.to_vec(), values, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::make(shape.to_vec(), vec![0.0; numel_of(shape)], None)
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        Self::make(shape.to_vec(), vec![v; numel_of(shape)], None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::make(vec![1], vec![v], None)
    }

    fn make(shape: Vec<usize>, values: Vec<f64>, op: Option<Op>) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.inner.values.borrow()
    }

    pub(crate) fn values_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.values.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.values.borrow().clone()
    }

    /// Scalar extraction; panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.inner.values.borrow()[0]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        let strides = strides_of(self.shape());
        assert_eq!(idx.len(), strides.len(), "index rank mismatch");
        let flat: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.inner.values.borrow()[flat]
    }

    /// Overwrites the stored values; shape is fixed at construction.
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::Dimension(format!(
                "set_values: expected {} values for shape {:?}, got {}",
                self.numel(),
                self.shape(),
                values.len()
            )));
        }
        self.inner.values.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Same values, no graph linkage: no gradient flows through the result.
    pub fn detach(&self) -> Tensor {
        Self::make(self.inner.shape.clone(), self.to_vec(), None)
    }

    fn unary(&self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(numel_of(&shape), values.len());
        Self::make(shape, values, Some(op))
    }
}

// ── Operations ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Ln(Tensor),
    Matmul(Tensor, Tensor),
    BatchMatmul(Tensor, Tensor),
    TransposeLast2(Tensor),
    SoftmaxRows(Tensor),
    Reduce {
        input: Tensor,
        kind: ReduceKind,
        axes: Vec<usize>,
        keepdims: bool,
    },
    Reshape(Tensor),
    Conv2d {
        input: Tensor,
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    MaxPool2 {
        input: Tensor,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        batch_stats: bool,
    },
    AddRowVec(Tensor, Tensor),
    ExpandLast {
        input: Tensor,
        copies: usize,
    },
    Stack1(Vec<Tensor>),
    Slice1 {
        input: Tensor,
        index: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a.clone(), b.clone()],
            Op::Relu(a) | Op::Sigmoid(a) | Op::Ln(a) => vec![a.clone()],
            Op::Matmul(a, b) | Op::BatchMatmul(a, b) => vec![a.clone(), b.clone()],
            Op::TransposeLast2(a) | Op::SoftmaxRows(a) | Op::Reshape(a) => vec![a.clone()],
            Op::Reduce { input, .. } => vec![input.clone()],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![input.clone(), kernel.clone(), bias.clone()],
            Op::MaxPool2 { input, .. } => vec![input.clone()],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![input.clone(), gamma.clone(), beta.clone()],
            Op::AddRowVec(a, b) => vec![a.clone(), b.clone()],
            Op::ExpandLast { input, .. } => vec![input.clone()],
            Op::Stack1(parts) => parts.clone(),
            Op::Slice1 { input, .. } => vec![input.clone()],
        }
    }
}

// Broadcast classification for binary elementwise ops: exact shape match,
// or one side a single-element scalar.
enum Broadcast {
    Exact,
    ScalarRhs,
    ScalarLhs,
}

fn classify_broadcast(a: &Tensor, b: &Tensor, opname: &str) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Exact)
    } else if b.is_scalar() {
        Ok(Broadcast::ScalarRhs)
    } else if a.is_scalar() {
        Ok(Broadcast::ScalarLhs)
    } else {
        Err(Error::Dimension(format!(
            "{opname}: incompatible shapes {:?} and {:?} (exact match or scalar only)",
            a.shape(),
            b.shape()
        )))
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let out = match classify_broadcast(self, other, "add")? {
            Broadcast::Exact => {
                let b = other.values();
                self.values().iter().zip(b.iter()).map(|(x, y)| x + y).collect()
            }
            Broadcast::ScalarRhs => {
                let s = other.item();
                self.values().iter().map(|x| x + s).collect()
            }
            Broadcast::ScalarLhs => {
                let s = self.item();
                other.values().iter().map(|y| s + y).collect()
            }
        };
        let shape = if self.is_scalar() && !other.is_scalar() {
            other.shape().to_vec()
        } else {
            self.shape().to_vec()
        };
        Ok(Tensor::make(shape, out, Some(Op::Add(self.clone(), other.clone()))))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let out = match classify_broadcast(self, other, "sub")? {
            Broadcast::Exact => {
                let b = other.values();
                self.values().iter().zip(b.iter()).map(|(x, y)| x - y).collect()
            }
            Broadcast::ScalarRhs => {
                let s = other.item();
                self.values().iter().map(|x| x - s).collect()
            }
            Broadcast::ScalarLhs => {
                let s = self.item();
                other.values().iter().map(|y| s - y).collect()
            }
        };
        let shape = if self.is_scalar() && !other.is_scalar() {
            other.shape().to_vec()
        } else {
            self.shape().to_vec()
        };
        Ok(Tensor::make(shape, out, Some(Op::Sub(self.clone(), other.clone()))))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let out = match classify_broadcast(self, other, "mul")? {
            Broadcast::Exact => {
                let b = other.values();
                self.values().iter().zip(b.iter()).map(|(x, y)| x * y).collect()
            }
            Broadcast::ScalarRhs => {
                let s = other.item();
                self.values().iter().map(|x| x * s).collect()
            }
            Broadcast::ScalarLhs => {
                let s = self.item();
                other.values().iter().map(|y| s * y).collect()
            }
        };
        let shape = if self.is_scalar() && !other.is_scalar() {
            other.shape().to_vec()
        } else {
            self.shape().to_vec()
        };
        Ok(Tensor::make(shape, out, Some(Op::Mul(self.clone(), other.clone()))))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        // scalar constant factor; graph-linked through Mul with a leaf scalar
        self.mul(&Tensor::scalar(s)).expect("scalar mul cannot fail")
    }

    pub fn relu(&self) -> Tensor {
        let out = self.values().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.unary(self.shape().to_vec(), out, Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let out = self.values().iter().map(|&x| sigmoid(x)).collect();
        self.unary(self.shape().to_vec(), out, Op::Sigmoid(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        let out = self.values().iter().map(|&x| x.ln()).collect();
        self.unary(self.shape().to_vec(), out, Op::Ln(self.clone()))
    }

    /// 2-D matrix product `[m×k]·[k×n] -> [m×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::Dimension(format!(
                "matmul: incompatible shapes {a:?} and {b:?}"
            )));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let out = matmul_kernel(&self.values(), &other.values(), m, k, n);
        Ok(Tensor::make(
            vec![m, n],
            out,
            Some(Op::Matmul(self.clone(), other.clone())),
        ))
    }

    /// Batched matrix product `[B×m×k]·[B×k×n] -> [B×m×n]`.
    pub fn batch_matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[2] != b[1] {
            return Err(Error::Dimension(format!(
                "batch_matmul: incompatible shapes {a:?} and {b:?}"
            )));
        }
        let (bs, m, k, n) = (a[0], a[1], a[2], b[2]);
        let av = self.values();
        let bv = other.values();
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            let c = matmul_kernel(&av[i * m * k..(i + 1) * m * k], &bv[i * k * n..(i + 1) * k * n], m, k, n);
            out[i * m * n..(i + 1) * m * n].copy_from_slice(&c);
        }
        drop(av);
        drop(bv);
        Ok(Tensor::make(
            vec![bs, m, n],
            out,
            Some(Op::BatchMatmul(self.clone(), other.clone())),
        ))
    }

    /// Swaps the trailing two axes: `[..., m, n] -> [..., n, m]`.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::Dimension(format!(
                "transpose_last2 requires rank >= 2, got {s:?}"
            )));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel_of(&s[..s.len() - 2]);
        let v = self.values();
        let out = transpose_kernel(&v, batch, m, n);
        drop(v);
        let mut shape = s.to_vec();
        let ndim = shape.len();
        shape.swap(ndim - 2, ndim - 1);
        Ok(Tensor::make(shape, out, Some(Op::TransposeLast2(self.clone()))))
    }

    /// Row-wise softmax of a 2-D tensor; rows are shifted by their max first.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "softmax_rows requires a 2-D tensor, got {s:?}"
            )));
        }
        let v = self.values();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax_rows: non-finite input".into()));
        }
        let (m, n) = (s[0], s[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        drop(v);
        Ok(Tensor::make(vec![m, n], out, Some(Op::SoftmaxRows(self.clone()))))
    }

    pub fn reduce_sum(&self, axes: &[usize], keepdims: bool) -> Result<Tensor> {
        self.reduce(ReduceKind::Sum, axes, keepdims)
    }

    pub fn reduce_mean(&self, axes: &[usize], keepdims: bool) -> Result<Tensor> {
        self.reduce(ReduceKind::Mean, axes, keepdims)
    }

    /// Reduces over `axes` (all axes when empty). Mean divides by the
    /// reduced-element count; backward broadcasts the gradient back.
    pub fn reduce(&self, kind: ReduceKind, axes: &[usize], keepdims: bool) -> Result<Tensor> {
        let ndim = self.shape().len();
        let mut axes: Vec<usize> = if axes.is_empty() {
            (0..ndim).collect()
        } else {
            axes.to_vec()
        };
        axes.sort_unstable();
        axes.dedup();
        if let Some(&bad) = axes.iter().find(|&&a| a >= ndim) {
            return Err(Error::Index(format!(
                "reduce: axis {bad} out of range for rank {ndim}"
            )));
        }
        let plan = ReducePlan::new(self.shape(), &axes, keepdims);
        let v = self.values();
        let mut out = vec![0.0; numel_of(&plan.out_shape)];
        for (i, &x) in v.iter().enumerate() {
            out[plan.out_index(i)] += x;
        }
        if kind == ReduceKind::Mean {
            let c = plan.count as f64;
            for o in out.iter_mut() {
                *o /= c;
            }
        }
        drop(v);
        let out_shape = plan.out_shape.clone();
        Ok(Tensor::make(
            out_shape,
            out,
            Some(Op::Reduce {
                input: self.clone(),
                kind,
                axes,
                keepdims,
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::Dimension(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape()
            )));
        }
        Ok(Tensor::make(
            shape.to_vec(),
            self.to_vec(),
            Some(Op::Reshape(self.clone())),
        ))
    }

    /// 2×2 max pooling with stride 2 on `[B,H,W,C]`; H and W must be even.
    pub fn max_pool2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Dimension(format!(
                "max_pool2 requires [B,H,W,C], got {s:?}"
            )));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "max_pool2 requires even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let v = self.values();
        let mut out = vec![0.0; b * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for bi in 0..b {
            for y in 0..oh {
                for x in 0..ow {
                    for ci in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((bi * h + 2 * y + dy) * w + 2 * x + dx) * c + ci;
                                if v[idx] > best {
                                    best = v[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((bi * oh + y) * ow + x) * c + ci;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        drop(v);
        Ok(Tensor::make(
            vec![b, oh, ow, c],
            out,
            Some(Op::MaxPool2 {
                input: self.clone(),
                argmax,
            }),
        ))
    }

    /// `[R×D] + [D]` row-broadcast add (bias application).
    pub fn add_row_vec(&self, v: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || v.shape().len() != 1 || v.shape()[0] != s[1] {
            return Err(Error::Dimension(format!(
                "add_row_vec: incompatible shapes {:?} and {:?}",
                s,
                v.shape()
            )));
        }
        let (r, d) = (s[0], s[1]);
        let a = self.values();
        let b = v.values();
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            for j in 0..d {
                out[i * d + j] = a[i * d + j] + b[j];
            }
        }
        drop(a);
        drop(b);
        Ok(Tensor::make(
            vec![r, d],
            out,
            Some(Op::AddRowVec(self.clone(), v.clone())),
        ))
    }

    /// Extracts row `index` along axis 1: `[B,M,D] -> [B,D]`.
    pub fn slice_axis1(&self, index: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::Dimension(format!(
                "slice_axis1 expects [B,M,D], got {s:?}"
            )));
        }
        if index >= s[1] {
            return Err(Error::Index(format!(
                "slice_axis1: index {index} out of range for axis size {}",
                s[1]
            )));
        }
        let (b, m, d) = (s[0], s[1], s[2]);
        let v = self.values();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            out[bi * d..(bi + 1) * d].copy_from_slice(&v[(bi * m + index) * d..(bi * m + index) * d + d]);
        }
        drop(v);
        Ok(Tensor::make(
            vec![b, d],
            out,
            Some(Op::Slice1 {
                input: self.clone(),
                index,
            }),
        ))
    }

    /// Replicates a trailing singleton axis: `[..., 1] -> [..., copies]`.
    pub fn expand_last(&self, copies: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.last() != Some(&1) {
            return Err(Error::Dimension(format!(
                "expand_last requires trailing axis 1, got {s:?}"
            )));
        }
        if copies == 0 {
            return Err(Error::Dimension("expand_last: copies must be positive".into()));
        }
        let v = self.values();
        let mut out = vec![0.0; v.len() * copies];
        for (j, &x) in v.iter().enumerate() {
            out[j * copies..(j + 1) * copies].fill(x);
        }
        drop(v);
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = copies;
        Ok(Tensor::make(
            shape,
            out,
            Some(Op::ExpandLast {
                input: self.clone(),
                copies,
            }),
        ))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stacks M tensors of shape `[B,D]` into `[B,M,D]`.
pub fn stack_axis1(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract("stack_axis1: empty input list".into()));
    }
    let s0 = parts[0].shape().to_vec();
    if s0.len() != 2 {
        return Err(Error::Dimension(format!(
            "stack_axis1 expects [B,D] parts, got {s0:?}"
        )));
    }
    for p in parts {
        if p.shape() != s0 {
            return Err(Error::Dimension(format!(
                "stack_axis1: mismatched part shapes {:?} vs {:?}",
                p.shape(),
                s0
            )));
        }
    }
    let (b, d) = (s0[0], s0[1]);
    let m = parts.len();
    let mut out = vec![0.0; b * m * d];
    for (mi, p) in parts.iter().enumerate() {
        let v = p.values();
        for bi in 0..b {
            out[(bi * m + mi) * d..(bi * m + mi) * d + d].copy_from_slice(&v[bi * d..(bi + 1) * d]);
        }
    }
    Ok(Tensor::make(
        vec![b, m, d],
        out,
        Some(Op::Stack1(parts.to_vec())),
    ))
}

/// Cross-correlation of `[B,H,W,Cin]` with `[KH,KW,Cin,Cout]` plus bias.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let xs = x.shape();
    let ks = kernel.shape();
    if xs.len() != 4 || ks.len() != 4 {
        return Err(Error::Dimension(format!(
            "conv2d: expected [B,H,W,Cin] and [KH,KW,Cin,Cout], got {xs:?} and {ks:?}"
        )));
    }
    if xs[3] != ks[2] {
        return Err(Error::Dimension(format!(
            "conv2d: input channels {} do not match kernel channels {}",
            xs[3], ks[2]
        )));
    }
    if bias.shape() != [ks[3]] {
        return Err(Error::Dimension(format!(
            "conv2d: bias shape {:?} does not match output channels {}",
            bias.shape(),
            ks[3]
        )));
    }
    if stride == 0 {
        return Err(Error::Dimension("conv2d: stride must be positive".into()));
    }
    let (b, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw, _, cout) = (ks[0], ks[1], ks[2], ks[3]);
    let oh = (h + 2 * padding).checked_sub(kh).map(|v| v / stride + 1);
    let ow = (w + 2 * padding).checked_sub(kw).map(|v| v / stride + 1);
    let (oh, ow) = match (oh, ow) {
        (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => (oh, ow),
        _ => {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}x{kw} with padding {padding} does not fit input {h}x{w}"
            )))
        }
    };
    let xv = x.values();
    let kv = kernel.values();
    let bv = bias.values();
    let mut out = vec![0.0; b * oh * ow * cout];
    let mut acc = vec![0.0; cout];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                acc.copy_from_slice(&bv);
                for dy in 0..kh {
                    let iy = (oy * stride + dy) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..kw {
                        let ix = (ox * stride + dx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xoff = ((bi * h + iy as usize) * w + ix as usize) * cin;
                        let koff = (dy * kw + dx) * cin * cout;
                        for ci in 0..cin {
                            let xval = xv[xoff + ci];
                            let krow = &kv[koff + ci * cout..koff + (ci + 1) * cout];
                            for (co, k) in krow.iter().enumerate() {
                                acc[co] += xval * k;
                            }
                        }
                    }
                }
                let o = ((bi * oh + oy) * ow + ox) * cout;
                out[o..o + cout].copy_from_slice(&acc);
            }
        }
    }
    drop(xv);
    drop(kv);
    drop(bv);
    Ok(Tensor::make(
        vec![b, oh, ow, cout],
        out,
        Some(Op::Conv2d {
            input: x.clone(),
            kernel: kernel.clone(),
            bias: bias.clone(),
            stride,
            padding,
        }),
    ))
}

/// Per-channel normalization of `[B,H,W,C]`.
///
/// `batch_stats` selects train-mode semantics: `mean`/`var` must then be the
/// biased batch statistics and the backward pass accounts for their
/// dependence on the input. Otherwise they are treated as constants
/// (inference with running stats).
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    batch_stats: bool,
) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "batch_norm: expected [B,H,W,C], got {s:?}"
        )));
    }
    let c = s[3];
    if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
        return Err(Error::Dimension(format!(
            "batch_norm: per-channel arrays must have length {c}"
        )));
    }
    let xv = x.values();
    let gv = gamma.values();
    let bv = beta.values();
    let istd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; xv.len()];
    for (i, &xval) in xv.iter().enumerate() {
        let ci = i % c;
        out[i] = gv[ci] * (xval - mean[ci]) * istd[ci] + bv[ci];
    }
    drop(xv);
    drop(gv);
    drop(bv);
    Ok(Tensor::make(
        s.to_vec(),
        out,
        Some(Op::BatchNorm {
            input: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            mean: mean.to_vec(),
            var: var.to_vec(),
            eps,
            batch_stats,
        }),
    ))
}

// ── Compute kernels ──────────────────────────────────────────────────

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

fn transpose_kernel(v: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for b in 0..batch {
        let src = &v[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

// Index mapping for axis reductions: precomputes, per input dimension, the
// output stride contribution (zero for reduced axes).
struct ReducePlan {
    in_strides: Vec<usize>,
    map_strides: Vec<usize>,
    out_shape: Vec<usize>,
    count: usize,
}

impl ReducePlan {
    fn new(in_shape: &[usize], axes: &[usize], keepdims: bool) -> ReducePlan {
        let ndim = in_shape.len();
        let reduced: Vec<bool> = (0..ndim).map(|d| axes.contains(&d)).collect();
        let mut out_shape = Vec::new();
        for d in 0..ndim {
            if reduced[d] {
                if keepdims {
                    out_shape.push(1);
                }
            } else {
                out_shape.push(in_shape[d]);
            }
        }
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        // Build per-input-dim output strides by walking dims from the last.
        let mut map_strides = vec![0usize; ndim];
        let mut stride = 1usize;
        for d in (0..ndim).rev() {
            if !reduced[d] {
                map_strides[d] = stride;
                stride *= in_shape[d];
            }
            // reduced dims contribute stride 0 (coordinate collapsed)
        }
        let count = axes.iter().map(|&a| in_shape[a]).product::<usize>().max(1);
        ReducePlan {
            in_strides: strides_of(in_shape),
            map_strides,
            out_shape,
            count,
        }
    }

    fn out_index(&self, flat_in: usize) -> usize {
        let mut rem = flat_in;
        let mut out = 0usize;
        for (stride_in, stride_map) in self.in_strides.iter().zip(&self.map_strides) {
            let coord = rem / stride_in;
            rem %= stride_in;
            out += coord * stride_map;
        }
        out
    }
}

// ── Backward pass ────────────────────────────────────────────────────

/// The executed-operation record reachable from one root, ordered so
/// that every operation appears after all producers of its inputs
/// (creation stamps are monotone, so sorting by stamp recovers exact
/// execution order).
pub struct GradTape {
    nodes: Vec<Tensor>,
}

impl GradTape {
    /// Collects every tensor reachable from `root` through producing
    /// operations, in execution order.
    pub fn trace(root: &Tensor) -> GradTape {
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.inner.id) {
                continue;
            }
            if let Some(op) = &t.inner.op {
                stack.extend(op.inputs());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| t.inner.id);
        GradTape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // Walks the record in exact reverse execution order, accumulating
    // each operation's input gradients.
    fn replay_backward(&self) {
        for t in self.nodes.iter().rev() {
            let Some(op) = &t.inner.op else { continue };
            let grad = t.inner.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            backward_op(op, t, &grad);
        }
    }
}

impl Tensor {
    /// Reverse-mode gradient accumulation from a scalar root.
    ///
    /// Seeds the root gradient with 1 and replays the tape of reachable
    /// operations in exact reverse execution order, adding each
    /// contribution into the inputs' gradient slots. Leaves not reachable
    /// from the root keep a `None` gradient.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        self.accumulate_grad(&[1.0]);
        GradTape::trace(self).replay_backward();
        Ok(())
    }
}

fn backward_op(op: &Op, out: &Tensor, g: &[f64]) {
    match op {
        Op::Add(a, b) => {
            acc_signed(a, g, 1.0);
            acc_signed(b, g, 1.0);
        }
        Op::Sub(a, b) => {
            acc_signed(a, g, 1.0);
            acc_signed(b, g, -1.0);
        }
        Op::Mul(a, b) => {
            // d(a*b)/da = b, /db = a, honoring scalar broadcast
            mul_backward(a, b, g);
        }
        Op::Relu(a) => {
            let av = a.values();
            let d: Vec<f64> = av
                .iter()
                .zip(g)
                .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                .collect();
            drop(av);
            a.accumulate_grad(&d);
        }
        Op::Sigmoid(a) => {
            let y = out.values();
            let d: Vec<f64> = y.iter().zip(g).map(|(&yi, &gi)| gi * yi * (1.0 - yi)).collect();
            drop(y);
            a.accumulate_grad(&d);
        }
        Op::Ln(a) => {
            let av = a.values();
            let d: Vec<f64> = av.iter().zip(g).map(|(&x, &gi)| gi / x).collect();
            drop(av);
            a.accumulate_grad(&d);
        }
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let (da, db) = matmul_backward(&a.values(), &b.values(), g, m, k, n);
            a.accumulate_grad(&da);
            b.accumulate_grad(&db);
        }
        Op::BatchMatmul(a, b) => {
            let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[2];
            let av = a.values();
            let bv = b.values();
            let mut da = vec![0.0; av.len()];
            let mut db = vec![0.0; bv.len()];
            for i in 0..bs {
                let (dai, dbi) = matmul_backward(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &g[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
                da[i * m * k..(i + 1) * m * k].copy_from_slice(&dai);
                db[i * k * n..(i + 1) * k * n].copy_from_slice(&dbi);
            }
            drop(av);
            drop(bv);
            a.accumulate_grad(&da);
            b.accumulate_grad(&db);
        }
        Op::TransposeLast2(a) => {
            let s = out.shape();
            let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
            let batch = numel_of(&s[..s.len() - 2]);
            a.accumulate_grad(&transpose_kernel(g, batch, m, n));
        }
        Op::SoftmaxRows(a) => {
            let y = out.values();
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                let yr = &y[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                for j in 0..n {
                    d[i * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            drop(y);
            a.accumulate_grad(&d);
        }
        Op::Reduce {
            input,
            kind,
            axes,
            keepdims,
        } => {
            let plan = ReducePlan::new(input.shape(), axes, *keepdims);
            let scale = match kind {
                ReduceKind::Sum => 1.0,
                ReduceKind::Mean => 1.0 / plan.count as f64,
            };
            let mut d = vec![0.0; input.numel()];
            for (i, di) in d.iter_mut().enumerate() {
                *di = g[plan.out_index(i)] * scale;
            }
            input.accumulate_grad(&d);
        }
        Op::Reshape(a) => {
            a.accumulate_grad(g);
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => {
            let (dx, dk, db) = conv2d_backward(input, kernel, g, out.shape(), *stride, *padding);
            input.accumulate_grad(&dx);
            kernel.accumulate_grad(&dk);
            bias.accumulate_grad(&db);
        }
        Op::MaxPool2 { input, argmax } => {
            let mut d = vec![0.0; input.numel()];
            for (o, &src) in argmax.iter().enumerate() {
                d[src] += g[o];
            }
            input.accumulate_grad(&d);
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            mean,
            var,
            eps,
            batch_stats,
        } => {
            let (dx, dg, db) = batch_norm_backward(input, gamma, mean, var, *eps, *batch_stats, g);
            input.accumulate_grad(&dx);
            gamma.accumulate_grad(&dg);
            beta.accumulate_grad(&db);
        }
        Op::AddRowVec(a, v) => {
            a.accumulate_grad(g);
            let (r, d) = (a.shape()[0], a.shape()[1]);
            let mut dv = vec![0.0; d];
            for i in 0..r {
                for j in 0..d {
                    dv[j] += g[i * d + j];
                }
            }
            v.accumulate_grad(&dv);
        }
        Op::ExpandLast { input, copies } => {
            let n = input.numel();
            let mut d = vec![0.0; n];
            for (j, dj) in d.iter_mut().enumerate() {
                let mut s = 0.0;
                for c in 0..*copies {
                    s += g[j * copies + c];
                }
                *dj = s;
            }
            input.accumulate_grad(&d);
        }
        Op::Stack1(parts) => {
            let m = parts.len();
            let (b, d) = (parts[0].shape()[0], parts[0].shape()[1]);
            for (mi, p) in parts.iter().enumerate() {
                let mut dp = vec![0.0; b * d];
                for bi in 0..b {
                    dp[bi * d..(bi + 1) * d].copy_from_slice(&g[(bi * m + mi) * d..(bi * m + mi) * d + d]);
                }
                p.accumulate_grad(&dp);
            }
        }
        Op::Slice1 { input, index } => {
            let s = input.shape();
            let (b, m, d) = (s[0], s[1], s[2]);
            let mut din = vec![0.0; input.numel()];
            for bi in 0..b {
                din[(bi * m + index) * d..(bi * m + index) * d + d].copy_from_slice(&g[bi * d..(bi + 1) * d]);
            }
            input.accumulate_grad(&din);
        }
    }
}

// Gradient for one side of add/sub with scalar collapse.
fn acc_signed(t: &Tensor, g: &[f64], sign: f64) {
    if t.numel() == g.len() {
        if sign == 1.0 {
            t.accumulate_grad(g);
        } else {
            let d: Vec<f64> = g.iter().map(|&x| sign * x).collect();
            t.accumulate_grad(&d);
        }
    } else {
        // scalar side: total of all contributions
        let total: f64 = g.iter().sum();
        t.accumulate_grad(&[sign * total]);
    }
}

fn mul_backward(a: &Tensor, b: &Tensor, g: &[f64]) {
    let an = a.numel();
    let bn = b.numel();
    if an == bn {
        let av = a.values();
        let bv = b.values();
        let da: Vec<f64> = g.iter().zip(bv.iter()).map(|(&gi, &bi)| gi * bi).collect();
        let db: Vec<f64> = g.iter().zip(av.iter()).map(|(&gi, &ai)| gi * ai).collect();
        drop(av);
        drop(bv);
        a.accumulate_grad(&da);
        b.accumulate_grad(&db);
    } else if bn == 1 {
        let s = b.item();
        let av = a.values();
        let da: Vec<f64> = g.iter().map(|&gi| gi * s).collect();
        let db: f64 = g.iter().zip(av.iter()).map(|(&gi, &ai)| gi * ai).sum();
        drop(av);
        a.accumulate_grad(&da);
        b.accumulate_grad(&[db]);
    } else {
        let s = a.item();
        let bv = b.values();
        let db: Vec<f64> = g.iter().map(|&gi| gi * s).collect();
        let da: f64 = g.iter().zip(bv.iter()).map(|(&gi, &bi)| gi * bi).sum();
        drop(bv);
        b.accumulate_grad(&db);
        a.accumulate_grad(&[da]);
    }
}

fn matmul_backward(a: &[f64], b: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    // dA = G·Bᵀ, dB = Aᵀ·G
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        for j in 0..n {
            let gij = g[i * n + j];
            if gij == 0.0 {
                continue;
            }
            for kk in 0..k {
                da[i * k + kk] += gij * b[kk * n + j];
                db[kk * n + j] += a[i * k + kk] * gij;
            }
        }
    }
    (da, db)
}

fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    g: &[f64],
    out_shape: &[usize],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let xs = x.shape();
    let ks = kernel.shape();
    let (b, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw, _, cout) = (ks[0], ks[1], ks[2], ks[3]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let xv = x.values();
    let kv = kernel.values();
    let mut dx = vec![0.0; xv.len()];
    let mut dk = vec![0.0; kv.len()];
    let mut db = vec![0.0; cout];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let goff = ((bi * oh + oy) * ow + ox) * cout;
                let grow = &g[goff..goff + cout];
                for (co, &gv) in grow.iter().enumerate() {
                    db[co] += gv;
                }
                for dy in 0..kh {
                    let iy = (oy * stride + dy) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx_k in 0..kw {
                        let ix = (ox * stride + dx_k) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xoff = ((bi * h + iy as usize) * w + ix as usize) * cin;
                        let koff = (dy * kw + dx_k) * cin * cout;
                        for ci in 0..cin {
                            let xval = xv[xoff + ci];
                            let kbase = koff + ci * cout;
                            let mut acc = 0.0;
                            for (co, &gv) in grow.iter().enumerate() {
                                dk[kbase + co] += xval * gv;
                                acc += kv[kbase + co] * gv;
                            }
                            dx[xoff + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

fn batch_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    batch_stats: bool,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let c = s[3];
    let n = (s[0] * s[1] * s[2]) as f64;
    let xv = x.values();
    let gv = gamma.values();
    let istd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    // per-channel sums of upstream grad and grad·x̂
    let mut sum_gxhat = vec![0.0; c];
    let mut sum_g = vec![0.0; c];
    for (i, &gi) in g.iter().enumerate() {
        let ci = i % c;
        let xhat = (xv[i] - mean[ci]) * istd[ci];
        dgamma[ci] += gi * xhat;
        dbeta[ci] += gi;
        sum_gxhat[ci] += gi * gv[ci] * xhat;
        sum_g[ci] += gi * gv[ci];
    }
    let mut dx = vec![0.0; xv.len()];
    if batch_stats {
        for (i, dxi) in dx.iter_mut().enumerate() {
            let ci = i % c;
            let xhat = (xv[i] - mean[ci]) * istd[ci];
            let gxhat = g[i] * gv[ci];
            *dxi = istd[ci] * (gxhat - sum_g[ci] / n - xhat * sum_gxhat[ci] / n);
        }
    } else {
        for (i, dxi) in dx.iter_mut().enumerate() {
            let ci = i % c;
            *dxi = g[i] * gv[ci] * istd[ci];
        }
    }
    (dx, dgamma, dbeta)
}

// ── Gradient checking ────────────────────────────────────────────────

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences with step `h`, returning the max relative error
/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    assert!(h > 0.0, "grad_check: step must be positive");
    x.zero_grad();
    let y = f(x)?;
    if !y.is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check: f must return a scalar, got shape {:?}",
            y.shape()
        )));
    }
    if !y.item().is_finite() {
        return Err(Error::Numeric("grad_check: f(x) is not finite".into()));
    }
    y.backward()?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut max_rel = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = x.values()[i];
        x.values_mut()[i] = orig + h;
        let fp = f(x)?.item();
        x.values_mut()[i] = orig - h;
        let fm = f(x)?.item();
        x.values_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric("grad_check: perturbed f(x) is not finite".into()));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
