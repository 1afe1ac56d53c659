//! Dense f64 tensors with reverse-mode differentiation.
//!
//! The graph is define-by-run: every operation on a tensor that requires
//! gradients records a backward closure holding clones of its inputs.
//! [`Tensor::backward`] walks the recorded graph once in reverse
//! topological order and accumulates gradients into every participating
//! tensor, then drops the graph so the next step starts clean.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{HypeError, Result};

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Option<Rc<dyn BackwardOp>>,
}

/// Shared handle to a tensor node. Cloning is cheap and aliases storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

trait BackwardOp {
    fn inputs(&self) -> Vec<Tensor>;
    /// Per-input gradient contributions given the output gradient.
    fn backward(&self, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(numel(shape), data.len(), "shape/data length mismatch");
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                requires_grad: false,
                grad: None,
                op: None,
            })),
        }
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        let t = Tensor::new(shape, data);
        t.inner.borrow_mut().requires_grad = true;
        t
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; numel(shape)])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub fn item(&self) -> f64 {
        let b = self.inner.borrow();
        assert_eq!(b.data.len(), 1, "item() on non-scalar");
        b.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// In-place update of a leaf tensor's values (optimizer path).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().data);
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    fn ptr(&self) -> *const RefCell<Inner> {
        Rc::as_ptr(&self.inner)
    }

    fn participates(&self) -> bool {
        let b = self.inner.borrow();
        b.requires_grad || b.op.is_some()
    }

    fn from_op(shape: &[usize], data: Vec<f64>, op: Rc<dyn BackwardOp>, track: bool) -> Tensor {
        let t = Tensor::new(shape, data);
        if track {
            let mut b = t.inner.borrow_mut();
            b.requires_grad = true;
            b.op = Some(op);
        }
        t
    }

    fn accumulate_grad(&self, contrib: &[f64]) {
        let mut b = self.inner.borrow_mut();
        match b.grad.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => b.grad = Some(contrib.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// tensor that requires gradients, visiting each node exactly once,
    /// then drops the recorded graph.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(HypeError::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        // Post-order DFS (iterative) for a reverse topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const RefCell<Inner>> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.ptr()) {
                continue;
            }
            let op = node.inner.borrow().op.clone();
            stack.push((node.clone(), true));
            if let Some(op) = op {
                for input in op.inputs() {
                    if input.participates() && !visited.contains(&input.ptr()) {
                        stack.push((input, false));
                    }
                }
            }
        }
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let op = node.inner.borrow_mut().op.take();
            let Some(op) = op else { continue };
            let grad_out = match node.inner.borrow().grad.clone() {
                Some(g) => g,
                None => continue,
            };
            let contribs = op.backward(&grad_out);
            for (input, contrib) in op.inputs().iter().zip(contribs) {
                if let Some(c) = contrib {
                    if input.participates() {
                        input.accumulate_grad(&c);
                    }
                }
            }
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(HypeError::Dimension {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

struct AddOp(Tensor, Tensor);
impl BackwardOp for AddOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.0.clone(), self.1.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }
}

struct SubOp(Tensor, Tensor);
impl BackwardOp for SubOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.0.clone(), self.1.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
    }
}

struct MulOp(Tensor, Tensor);
impl BackwardOp for MulOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.0.clone(), self.1.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let a = self.0.data();
        let b = self.1.data();
        let ga = g.iter().zip(b.iter()).map(|(g, b)| g * b).collect();
        let gb = g.iter().zip(a.iter()).map(|(g, a)| g * a).collect();
        vec![Some(ga), Some(gb)]
    }
}

struct ScaleOp(Tensor, f64);
impl BackwardOp for ScaleOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.0.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.1).collect())]
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let track = self.participates() || other.participates();
        Ok(Tensor::from_op(
            &self.shape(),
            data,
            Rc::new(AddOp(self.clone(), other.clone())),
            track,
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let track = self.participates() || other.participates();
        Ok(Tensor::from_op(
            &self.shape(),
            data,
            Rc::new(SubOp(self.clone(), other.clone())),
            track,
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let track = self.participates() || other.participates();
        Ok(Tensor::from_op(
            &self.shape(),
            data,
            Rc::new(MulOp(self.clone(), other.clone())),
            track,
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            &self.shape(),
            data,
            Rc::new(ScaleOp(self.clone(), c)),
            self.participates(),
        )
    }
}

// ---------------------------------------------------------------------------
// Matrix ops (2-D)
// ---------------------------------------------------------------------------

/// Row-major `[m,k] x [k,n]` product, ikj loop order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    // Row-major C = A.B via the packed gemm kernel; single-threaded and
    // bitwise deterministic for fixed shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

struct MatmulOp {
    a: Tensor,
    b: Tensor,
    m: usize,
    k: usize,
    n: usize,
}
impl BackwardOp for MatmulOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.a.clone(), self.b.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let a = self.a.data();
        let b = self.b.data();
        // grad_a = g . b^T and grad_b = a^T . g; the transposes are
        // expressed through gemm strides instead of materialized copies.
        let mut ga = vec![0.0; m * k];
        let mut gb = vec![0.0; k * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                n,
                k,
                1.0,
                g.as_ptr(),
                n as isize,
                1,
                b.as_ptr(),
                1,
                n as isize,
                0.0,
                ga.as_mut_ptr(),
                k as isize,
                1,
            );
            matrixmultiply::dgemm(
                k,
                m,
                n,
                1.0,
                a.as_ptr(),
                1,
                k as isize,
                g.as_ptr(),
                n as isize,
                1,
                0.0,
                gb.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        vec![Some(ga), Some(gb)]
    }
}

struct TransposeOp {
    a: Tensor,
    rows: usize,
    cols: usize,
}
impl BackwardOp for TransposeOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.a.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        // g has shape [cols, rows]; transpose back.
        let mut ga = vec![0.0; self.rows * self.cols];
        for r in 0..self.cols {
            for c in 0..self.rows {
                ga[c * self.cols + r] = g[r * self.rows + c];
            }
        }
        vec![Some(ga)]
    }
}

struct ReshapeOp(Tensor);
impl BackwardOp for ReshapeOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.0.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

struct AddBiasOp {
    a: Tensor,
    bias: Tensor,
    rows: usize,
    cols: usize,
}
impl BackwardOp for AddBiasOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.a.clone(), self.bias.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut gb = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                gb[c] += g[r * self.cols + c];
            }
        }
        vec![Some(g.to_vec()), Some(gb)]
    }
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let sa = self.shape();
        let sb = other.shape();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(HypeError::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(&self.data(), &other.data(), m, k, n);
        let track = self.participates() || other.participates();
        Ok(Tensor::from_op(
            &[m, n],
            data,
            Rc::new(MatmulOp {
                a: self.clone(),
                b: other.clone(),
                m,
                k,
                n,
            }),
            track,
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(HypeError::Usage(format!(
                "transpose requires a 2-D tensor, got {:?}",
                s
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            &[cols, rows],
            data,
            Rc::new(TransposeOp {
                a: self.clone(),
                rows,
                cols,
            }),
            self.participates(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(HypeError::Usage(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape,
            self.to_vec(),
            Rc::new(ReshapeOp(self.clone())),
            self.participates(),
        ))
    }

    /// Adds a length-n bias vector to every row of an `[m,n]` tensor.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        let sb = bias.shape();
        if s.len() != 2 || sb != vec![s[1]] {
            return Err(HypeError::Dimension {
                op: "add_bias",
                lhs: s,
                rhs: sb,
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let b = bias.data();
        let data = self
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b.iter()).map(|(a, b)| a + b))
            .collect();
        drop(b);
        let track = self.participates() || bias.participates();
        Ok(Tensor::from_op(
            &[rows, cols],
            data,
            Rc::new(AddBiasOp {
                a: self.clone(),
                bias: bias.clone(),
                rows,
                cols,
            }),
            track,
        ))
    }
}

// ---------------------------------------------------------------------------
// Slicing / concatenation
// ---------------------------------------------------------------------------

struct Slice2dOp {
    a: Tensor,
    r0: usize,
    c0: usize,
    rows: usize,
    cols: usize,
    src_cols: usize,
    src_len: usize,
}
impl BackwardOp for Slice2dOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.a.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut ga = vec![0.0; self.src_len];
        for r in 0..self.rows {
            let src_off = (self.r0 + r) * self.src_cols + self.c0;
            ga[src_off..src_off + self.cols].copy_from_slice(&g[r * self.cols..(r + 1) * self.cols]);
        }
        vec![Some(ga)]
    }
}

struct ConcatRowsOp {
    parts: Vec<Tensor>,
    cols: usize,
}
impl BackwardOp for ConcatRowsOp {
    fn inputs(&self) -> Vec<Tensor> {
        self.parts.clone()
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.parts.len());
        let mut off = 0;
        for p in &self.parts {
            let n = p.len();
            out.push(Some(g[off..off + n].to_vec()));
            off += n;
        }
        let _ = self.cols;
        out
    }
}

struct ConcatColsOp {
    parts: Vec<Tensor>,
    rows: usize,
    widths: Vec<usize>,
}
impl BackwardOp for ConcatColsOp {
    fn inputs(&self) -> Vec<Tensor> {
        self.parts.clone()
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.widths.iter().sum();
        let mut grads: Vec<Vec<f64>> = self.widths.iter().map(|w| vec![0.0; w * self.rows]).collect();
        for r in 0..self.rows {
            let mut off = 0;
            for (pi, w) in self.widths.iter().enumerate() {
                grads[pi][r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                off += w;
            }
        }
        grads.into_iter().map(Some).collect()
    }
}

impl Tensor {
    pub fn slice2d(&self, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || r0 + rows > s[0] || c0 + cols > s[1] {
            return Err(HypeError::Usage(format!(
                "slice2d [{r0}..{}, {c0}..{}] out of bounds for {:?}",
                r0 + rows,
                c0 + cols,
                s
            )));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let off = (r0 + r) * s[1] + c0;
            data.extend_from_slice(&src[off..off + cols]);
        }
        drop(src);
        Ok(Tensor::from_op(
            &[rows, cols],
            data,
            Rc::new(Slice2dOp {
                a: self.clone(),
                r0,
                c0,
                rows,
                cols,
                src_cols: s[1],
                src_len: numel(&s),
            }),
            self.participates(),
        ))
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty());
        let cols = parts[0].shape()[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[1] != cols {
                return Err(HypeError::Dimension {
                    op: "concat_rows",
                    lhs: parts[0].shape(),
                    rhs: s,
                });
            }
            rows += s[0];
            data.extend_from_slice(&p.data());
        }
        let track = parts.iter().any(|p| p.participates());
        Ok(Tensor::from_op(
            &[rows, cols],
            data,
            Rc::new(ConcatRowsOp {
                parts: parts.to_vec(),
                cols,
            }),
            track,
        ))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty());
        let rows = parts[0].shape()[0];
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        for p in parts {
            let s = p.shape();
            if s.len() != 2 || s[0] != rows {
                return Err(HypeError::Dimension {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: s,
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (p, w) in parts.iter().zip(&widths) {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&p.data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let track = parts.iter().any(|p| p.participates());
        Ok(Tensor::from_op(
            &[rows, total],
            data,
            Rc::new(ConcatColsOp {
                parts: parts.to_vec(),
                rows,
                widths,
            }),
            track,
        ))
    }
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

struct SoftmaxOp {
    a: Tensor,
    out: Vec<f64>,
    lane: usize,
    stride: usize,
}
impl BackwardOp for SoftmaxOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.a.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut ga = vec![0.0; g.len()];
        for_each_lane(g.len(), self.lane, self.stride, |idxs| {
            let mut dot = 0.0;
            for &i in idxs.iter() {
                dot += g[i] * self.out[i];
            }
            for &i in idxs.iter() {
                ga[i] = (g[i] - dot) * self.out[i];
            }
        });
        vec![Some(ga)]
    }
}

/// Visits every lane of length `lane` along an axis with element stride
/// `stride`, passing the flat indices of that lane.
fn for_each_lane(total: usize, lane: usize, stride: usize, mut f: impl FnMut(&[usize])) {
    let lanes = total / lane;
    let mut idxs = vec![0usize; lane];
    let block = lane * stride; // elements spanned by one group of lanes
    for l in 0..lanes {
        let group = l / stride;
        let offset = group * block + (l % stride);
        for (j, idx) in idxs.iter_mut().enumerate() {
            *idx = offset + j * stride;
        }
        f(&idxs);
    }
}

struct LayerNormOp {
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    normalized: Vec<f64>, // x-hat
    inv_std: Vec<f64>,    // per lane
    lane: usize,
}
impl BackwardOp for LayerNormOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.x.clone(), self.gain.clone(), self.bias.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let n = self.lane;
        let lanes = g.len() / n;
        let gain = self.gain.data();
        let mut gx = vec![0.0; g.len()];
        let mut ggain = vec![0.0; n];
        let mut gbias = vec![0.0; n];
        for l in 0..lanes {
            let off = l * n;
            let mut mean_gg = 0.0;
            let mut mean_ggx = 0.0;
            for j in 0..n {
                let gg = g[off + j] * gain[j];
                mean_gg += gg;
                mean_ggx += gg * self.normalized[off + j];
                ggain[j] += g[off + j] * self.normalized[off + j];
                gbias[j] += g[off + j];
            }
            mean_gg /= n as f64;
            mean_ggx /= n as f64;
            let is = self.inv_std[l];
            for j in 0..n {
                let gg = g[off + j] * gain[j];
                gx[off + j] = (gg - mean_gg - self.normalized[off + j] * mean_ggx) * is;
            }
        }
        vec![Some(gx), Some(ggain), Some(gbias)]
    }
}

struct GeluOp {
    x: Tensor,
}
impl BackwardOp for GeluOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = self.x.data();
        let ga = g
            .iter()
            .zip(x.iter())
            .map(|(g, &x)| g * (normal_cdf(x) + x * normal_pdf(x)))
            .collect();
        vec![Some(ga)]
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Fused scaled-dot-product attention over all batch elements and heads.
/// q/k/v are `[batch*seq, d]` with heads laid out along columns; `masks`
/// holds one additive `[seq, seq]` mask per batch element. Keeping the
/// whole thing as one graph node avoids thousands of tiny slice/concat
/// nodes per forward pass.
struct AttentionOp {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Softmax probabilities, `[batch, heads, seq, seq]` flattened.
    probs: Vec<f64>,
    batch: usize,
    seq: usize,
    n_heads: usize,
    d: usize,
}

impl AttentionOp {
    fn dh(&self) -> usize {
        self.d / self.n_heads
    }
}

impl BackwardOp for AttentionOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.q.clone(), self.k.clone(), self.v.clone()]
    }

    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (b, s, d, nh, dh) = (self.batch, self.seq, self.d, self.n_heads, self.dh());
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.q.data();
        let kd = self.k.data();
        let vd = self.v.data();
        let mut gq = vec![0.0; b * s * d];
        let mut gk = vec![0.0; b * s * d];
        let mut gv = vec![0.0; b * s * d];
        let mut dp = vec![0.0; s * s];
        let mut ds = vec![0.0; s * s];
        for bi in 0..b {
            for h in 0..nh {
                let col = h * dh;
                let p = &self.probs[(bi * nh + h) * s * s..(bi * nh + h + 1) * s * s];
                let row = |i: usize| (bi * s + i) * d + col;
                // dP = dOut . V^T ; dV = P^T . dOut
                for i in 0..s {
                    let go = &g[row(i)..row(i) + dh];
                    for j in 0..s {
                        let vj = &vd[row(j)..row(j) + dh];
                        let mut acc = 0.0;
                        for (a, bv) in go.iter().zip(vj) {
                            acc += a * bv;
                        }
                        dp[i * s + j] = acc;
                        let pij = p[i * s + j];
                        if pij != 0.0 {
                            let gvj = &mut gv[row(j)..row(j) + dh];
                            for (o, a) in gvj.iter_mut().zip(go) {
                                *o += pij * a;
                            }
                        }
                    }
                }
                // softmax backward per row
                for i in 0..s {
                    let pr = &p[i * s..(i + 1) * s];
                    let dpr = &dp[i * s..(i + 1) * s];
                    let dot: f64 = pr.iter().zip(dpr).map(|(a, c)| a * c).sum();
                    for j in 0..s {
                        ds[i * s + j] = pr[j] * (dpr[j] - dot);
                    }
                }
                // dQ = scale * dS . K ; dK = scale * dS^T . Q
                for i in 0..s {
                    let dsr = &ds[i * s..(i + 1) * s];
                    let qi = &qd[row(i)..row(i) + dh];
                    for j in 0..s {
                        let w = scale * dsr[j];
                        if w == 0.0 {
                            continue;
                        }
                        let kj = &kd[row(j)..row(j) + dh];
                        let gqi = &mut gq[row(i)..row(i) + dh];
                        for (o, kv) in gqi.iter_mut().zip(kj) {
                            *o += w * kv;
                        }
                        let gkj = &mut gk[row(j)..row(j) + dh];
                        for (o, qv) in gkj.iter_mut().zip(qi) {
                            *o += w * qv;
                        }
                    }
                }
            }
        }
        vec![Some(gq), Some(gk), Some(gv)]
    }
}

impl Tensor {
    /// See [`AttentionOp`]: softmax(QK^T / sqrt(dh) + mask) V per batch
    /// element and head, returning `[batch*seq, d]`.
    pub fn multi_head_attention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        masks: &[f64],
        batch: usize,
        seq: usize,
        n_heads: usize,
    ) -> Result<Tensor> {
        let shape = q.shape();
        if shape.len() != 2 || shape != k.shape() || shape != v.shape() {
            return Err(HypeError::Dimension {
                op: "multi_head_attention",
                lhs: shape,
                rhs: k.shape(),
            });
        }
        let d = shape[1];
        if shape[0] != batch * seq || n_heads == 0 || d % n_heads != 0 {
            return Err(HypeError::Usage(format!(
                "attention dims: rows {} vs batch {batch} * seq {seq}, d {d}, heads {n_heads}",
                shape[0]
            )));
        }
        if masks.len() != batch * seq * seq {
            return Err(HypeError::Dimension {
                op: "multi_head_attention",
                lhs: vec![masks.len()],
                rhs: vec![batch * seq * seq],
            });
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = q.data();
        let kd = k.data();
        let vd = v.data();
        let mut probs = vec![0.0; batch * n_heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        let mut scores = vec![0.0; seq];
        for bi in 0..batch {
            let mask = &masks[bi * seq * seq..(bi + 1) * seq * seq];
            for h in 0..n_heads {
                let col = h * dh;
                let row = |i: usize| (bi * seq + i) * d + col;
                let p = &mut probs[(bi * n_heads + h) * seq * seq..(bi * n_heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let qi = &qd[row(i)..row(i) + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let kj = &kd[row(j)..row(j) + dh];
                        let mut acc = 0.0;
                        for (a, bv) in qi.iter().zip(kj) {
                            acc += a * bv;
                        }
                        *sc = acc * scale + mask[i * seq + j];
                        max = max.max(*sc);
                    }
                    let mut sum = 0.0;
                    for (j, &sc) in scores.iter().enumerate() {
                        let e = (sc - max).exp();
                        p[i * seq + j] = e;
                        sum += e;
                    }
                    let o = &mut out[row(i)..row(i) + dh];
                    for j in 0..seq {
                        p[i * seq + j] /= sum;
                        let pij = p[i * seq + j];
                        if pij != 0.0 {
                            let vj = &vd[row(j)..row(j) + dh];
                            for (ov, vv) in o.iter_mut().zip(vj) {
                                *ov += pij * vv;
                            }
                        }
                    }
                }
            }
        }
        drop((qd, kd, vd));
        let track = q.participates() || k.participates() || v.participates();
        Ok(Tensor::from_op(
            &[batch * seq, d],
            out,
            Rc::new(AttentionOp {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                probs,
                batch,
                seq,
                n_heads,
                d,
            }),
            track,
        ))
    }
}

impl Tensor {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(HypeError::Usage(format!(
                "softmax axis {axis} out of range for shape {:?}",
                s
            )));
        }
        let lane = s[axis];
        let stride: usize = s[axis + 1..].iter().product();
        let src = self.data();
        let mut out = vec![0.0; src.len()];
        for_each_lane(src.len(), lane, stride, |idxs| {
            let max = idxs.iter().map(|&i| src[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &i in idxs.iter() {
                let e = (src[i] - max).exp();
                out[i] = e;
                sum += e;
            }
            for &i in idxs.iter() {
                out[i] /= sum;
            }
        });
        drop(src);
        Ok(Tensor::from_op(
            &s,
            out.clone(),
            Rc::new(SoftmaxOp {
                a: self.clone(),
                out,
                lane,
                stride,
            }),
            self.participates(),
        ))
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let s = self.shape();
        let n = *s.last().expect("layer_norm on 0-d tensor");
        if gain.shape() != vec![n] || bias.shape() != vec![n] {
            return Err(HypeError::Dimension {
                op: "layer_norm",
                lhs: s,
                rhs: gain.shape(),
            });
        }
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let src = self.data();
        let gd = gain.data();
        let bd = bias.data();
        let lanes = src.len() / n;
        let mut out = vec![0.0; src.len()];
        let mut normalized = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; lanes];
        for l in 0..lanes {
            let off = l * n;
            let lane = &src[off..off + n];
            let mean = lane.iter().sum::<f64>() / n as f64;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[l] = is;
            for j in 0..n {
                let xh = (lane[j] - mean) * is;
                normalized[off + j] = xh;
                out[off + j] = xh * gd[j] + bd[j];
            }
        }
        drop((src, gd, bd));
        let track = self.participates() || gain.participates() || bias.participates();
        Ok(Tensor::from_op(
            &s,
            out,
            Rc::new(LayerNormOp {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                normalized,
                inv_std,
                lane: n,
            }),
            track,
        ))
    }

    /// Exact Gaussian-CDF GELU: `x * Phi(x)`.
    pub fn gelu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x * normal_cdf(x)).collect();
        Tensor::from_op(
            &self.shape(),
            data,
            Rc::new(GeluOp { x: self.clone() }),
            self.participates(),
        )
    }
}

// ---------------------------------------------------------------------------
// Embedding lookup
// ---------------------------------------------------------------------------

struct EmbeddingOp {
    table: Tensor,
    ids: Vec<usize>,
    dim: usize,
    table_len: usize,
}
impl BackwardOp for EmbeddingOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.table.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut gt = vec![0.0; self.table_len];
        for (row, &id) in self.ids.iter().enumerate() {
            let src = &g[row * self.dim..(row + 1) * self.dim];
            let dst = &mut gt[id * self.dim..(id + 1) * self.dim];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        vec![Some(gt)]
    }
}

impl Tensor {
    /// Gathers rows of a `[vocab, dim]` table; gradient scatter-adds back.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(HypeError::Usage("embedding table must be 2-D".into()));
        }
        let (vocab, dim) = (s[0], s[1]);
        let src = self.data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(HypeError::Input(format!(
                    "token id {id} out of range for vocab {vocab}"
                )));
            }
            data.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        drop(src);
        Ok(Tensor::from_op(
            &[ids.len(), dim],
            data,
            Rc::new(EmbeddingOp {
                table: self.clone(),
                ids: ids.to_vec(),
                dim,
                table_len: vocab * dim,
            }),
            self.participates(),
        ))
    }
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

struct SumOp(Tensor);
impl BackwardOp for SumOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.0.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0]; self.0.len()])]
    }
}

struct MeanOp(Tensor);
impl BackwardOp for MeanOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.0.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let n = self.0.len() as f64;
        vec![Some(vec![g[0] / n; self.0.len()])]
    }
}

struct CrossEntropyOp {
    logits: Tensor,
    probs: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}
impl BackwardOp for CrossEntropyOp {
    fn inputs(&self) -> Vec<Tensor> {
        vec![self.logits.clone()]
    }
    fn backward(&self, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let batch = self.labels.len();
        let mut gl = self.probs.clone();
        for (row, &label) in self.labels.iter().enumerate() {
            gl[row * self.classes + label] -= 1.0;
        }
        let scale = g[0] / batch as f64;
        for v in gl.iter_mut() {
            *v *= scale;
        }
        vec![Some(gl)]
    }
}

impl Tensor {
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(&[1], vec![s], Rc::new(SumOp(self.clone())), self.participates())
    }

    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.len() as f64;
        Tensor::from_op(&[1], vec![s / n], Rc::new(MeanOp(self.clone())), self.participates())
    }

    /// Mean softmax cross-entropy over a `[batch, classes]` logit matrix.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(HypeError::Dimension {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (batch, classes) = (s[0], s[1]);
        for &l in labels {
            if l >= classes {
                return Err(HypeError::Input(format!(
                    "label {l} out of range for {classes} classes"
                )));
            }
        }
        let src = self.data();
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for row in 0..batch {
            let lane = &src[row * classes..(row + 1) * classes];
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in lane.iter().enumerate() {
                let e = (v - max).exp();
                probs[row * classes + j] = e;
                sum += e;
            }
            for j in 0..classes {
                probs[row * classes + j] /= sum;
            }
            loss -= probs[row * classes + labels[row]].ln();
        }
        drop(src);
        loss /= batch as f64;
        Ok(Tensor::from_op(
            &[1],
            vec![loss],
            Rc::new(CrossEntropyOp {
                logits: self.clone(),
                probs,
                labels: labels.to_vec(),
                classes,
            }),
            self.participates(),
        ))
    }

    /// Mean squared error against a target of the same shape.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        same_shape("mse", self, target)?;
        let diff = self.sub(target)?;
        Ok(diff.mul(&diff)?.mean())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn fused_attention_matches_compositional_path() {
        use crate::rng::{Purpose, RngStream};
        let (b, s, nh, d) = (2usize, 3usize, 2usize, 4usize);
        let dh = d / nh;
        let mut rng = RngStream::new(99, 0, 0, Purpose::Test);
        let mut fill = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.next_standard_normal()).collect()
        };
        let qd = fill(b * s * d);
        let kd = fill(b * s * d);
        let vd = fill(b * s * d);
        // mask out the last key of batch 1
        let mut masks = vec![0.0; b * s * s];
        for i in 0..s {
            masks[s * s + i * s + (s - 1)] = -1e30;
        }
        let gseed = fill(b * s * d);

        let run = |fused: bool| -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
            let q = Tensor::param(&[b * s, d], qd.clone());
            let k = Tensor::param(&[b * s, d], kd.clone());
            let v = Tensor::param(&[b * s, d], vd.clone());
            let out = if fused {
                Tensor::multi_head_attention(&q, &k, &v, &masks, b, s, nh).unwrap()
            } else {
                let scale = 1.0 / (dh as f64).sqrt();
                let mut rows = Vec::new();
                for bi in 0..b {
                    let mask =
                        Tensor::new(&[s, s], masks[bi * s * s..(bi + 1) * s * s].to_vec());
                    let mut heads = Vec::new();
                    for h in 0..nh {
                        let qh = q.slice2d(bi * s, s, h * dh, dh).unwrap();
                        let kh = k.slice2d(bi * s, s, h * dh, dh).unwrap();
                        let vh = v.slice2d(bi * s, s, h * dh, dh).unwrap();
                        let scores = qh
                            .matmul(&kh.transpose().unwrap())
                            .unwrap()
                            .scale(scale)
                            .add(&mask)
                            .unwrap();
                        heads.push(scores.softmax(1).unwrap().matmul(&vh).unwrap());
                    }
                    rows.push(Tensor::concat_cols(&heads).unwrap());
                }
                Tensor::concat_rows(&rows).unwrap()
            };
            let weight = Tensor::new(&[b * s, d], gseed.clone());
            out.mul(&weight).unwrap().sum().backward().unwrap();
            (
                out.to_vec(),
                q.grad().unwrap(),
                k.grad().unwrap(),
                v.grad().unwrap(),
            )
        };
        let (of, qf, kf, vf) = run(true);
        let (oc, qc, kc, vc) = run(false);
        for (a, b) in of.iter().zip(&oc) {
            approx(*a, *b, 1e-12);
        }
        for (x, y) in [(&qf, &qc), (&kf, &kc), (&vf, &vc)] {
            for (a, b) in x.iter().zip(y.iter()) {
                approx(*a, *b, 1e-10);
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(&[3, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let i3 = Tensor::new(&[3, 3], eye);
        let out = i3.matmul(&a).unwrap();
        assert_eq!(out.to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_zero() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let z = Tensor::new(&[2, 1], vec![0.0, 0.0]);
        let out = a.matmul(&z).unwrap();
        assert_eq!(out.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::RngStream::new(7, 0, 0, crate::rng::Purpose::Test);
        let a: Vec<f64> = (0..20).map(|_| rng.next_standard_normal()).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.next_standard_normal()).collect();
        // naive triple loop
        let mut expect = vec![0.0; 4 * 3];
        for i in 0..4 {
            for j in 0..3 {
                for p in 0..5 {
                    expect[i * 3 + j] += a[i * 5 + p] * b[p * 3 + j];
                }
            }
        }
        let out = Tensor::new(&[4, 5], a).matmul(&Tensor::new(&[5, 3], b)).unwrap();
        for (o, e) in out.to_vec().iter().zip(&expect) {
            approx(*o, *e, 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let out = Tensor::new(&[2], vec![0.0, 0.0]).softmax(0).unwrap();
        assert_eq!(out.to_vec(), vec![0.5, 0.5]);
        let out = Tensor::new(&[2], vec![1000.0, 0.0]).softmax(0).unwrap();
        approx(out.to_vec()[0], 1.0, 1e-12);
        approx(out.to_vec()[1], 0.0, 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = [1.0f64, 2.0, 3.0];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let out = Tensor::new(&[3], x.to_vec()).softmax(0).unwrap();
        for (o, xv) in out.to_vec().iter().zip(&x) {
            approx(*o, xv.exp() / z, 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_on_inner_axis() {
        let mut rng = crate::rng::RngStream::new(3, 0, 0, crate::rng::Purpose::Test);
        let data: Vec<f64> = (0..24).map(|_| 3.0 * rng.next_standard_normal()).collect();
        let t = Tensor::new(&[2, 3, 4], data);
        for axis in 0..3 {
            let out = t.softmax(axis).unwrap();
            let v = out.to_vec();
            assert!(v.iter().all(|&p| p >= 0.0));
            // check sums along the axis
            let s = t.shape();
            let stride: usize = s[axis + 1..].iter().product();
            let lane = s[axis];
            let lanes = v.len() / lane;
            for l in 0..lanes {
                let group = l / stride;
                let offset = group * lane * stride + (l % stride);
                let sum: f64 = (0..lane).map(|j| v[offset + j * stride]).sum();
                approx(sum, 1.0, 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_input_absorbed_by_eps() {
        let x = Tensor::new(&[4], vec![5.0; 4]);
        let gain = Tensor::new(&[4], vec![1.0; 4]);
        let bias = Tensor::zeros(&[4]);
        let out = x.layer_norm(&gain, &bias, 1e-12).unwrap();
        assert_eq!(out.to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn layer_norm_zero_gain_gives_bias() {
        let x = Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let gain = Tensor::zeros(&[4]);
        let bias = Tensor::new(&[4], vec![7.0; 4]);
        let out = x.layer_norm(&gain, &bias, 1e-12).unwrap();
        assert_eq!(out.to_vec(), vec![7.0; 4]);
    }

    #[test]
    fn layer_norm_matches_hand_normalization() {
        let xv = [1.0, 2.0, 3.0, 4.0];
        let mean = 2.5;
        let var = xv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        let x = Tensor::new(&[4], xv.to_vec());
        let gain = Tensor::new(&[4], vec![1.0; 4]);
        let bias = Tensor::zeros(&[4]);
        let out = x.layer_norm(&gain, &bias, 1e-12).unwrap();
        for (o, v) in out.to_vec().iter().zip(&xv) {
            approx(*o, (v - mean) / var.sqrt(), 1e-10);
        }
    }

    #[test]
    fn gelu_values() {
        approx(Tensor::scalar(0.0).gelu().item(), 0.0, 0.0);
        approx(Tensor::scalar(10.0).gelu().item(), 10.0, 1e-9);
        approx(Tensor::scalar(1.0).gelu().item(), 0.8413447460685429, 1e-10);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        let logits = Tensor::new(&[2, 5], vec![0.3; 10]);
        let loss = logits.cross_entropy(&[0, 4]).unwrap();
        approx(loss.item(), (5.0f64).ln(), 1e-12);
    }

    #[test]
    fn cross_entropy_direct_formula() {
        let logits = Tensor::new(&[1, 2], vec![2.0, 0.0]);
        let loss = logits.cross_entropy(&[0]).unwrap();
        let expect = -((2.0f64).exp() / ((2.0f64).exp() + 1.0)).ln();
        approx(loss.item(), expect, 1e-12);
        approx(loss.item(), 0.126928011042972, 1e-12);
    }

    #[test]
    fn cross_entropy_out_of_range_label() {
        let logits = Tensor::new(&[1, 2], vec![0.0, 0.0]);
        assert!(matches!(
            logits.cross_entropy(&[2]),
            Err(HypeError::Input(_))
        ));
    }

    #[test]
    fn mse_self_is_zero() {
        let x = Tensor::new(&[3], vec![1.0, -2.0, 3.0]);
        approx(x.mse(&x).unwrap().item(), 0.0, 0.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let w = Tensor::param(&[2, 3], vec![1.0; 6]);
        let loss = w.sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_of_scalar_mse_is_two_w() {
        let w = Tensor::param(&[1], vec![3.0]);
        let loss = w.mse(&Tensor::zeros(&[1])).unwrap();
        loss.backward().unwrap();
        approx(w.grad().unwrap()[0], 6.0, 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::param(&[2], vec![1.0, 2.0]);
        let y = w.scale(2.0);
        assert!(matches!(y.backward(), Err(HypeError::Usage(_))));
    }

    #[test]
    fn diamond_graph_accumulates_once_per_path() {
        // loss = sum(w + w): grad must be exactly 2, not 4.
        let w = Tensor::param(&[2], vec![1.0, 1.0]);
        let loss = w.add(&w).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn operations_are_deterministic() {
        let mut rng = crate::rng::RngStream::new(11, 0, 0, crate::rng::Purpose::Test);
        let data: Vec<f64> = (0..12).map(|_| rng.next_standard_normal()).collect();
        let run = |d: &[f64]| {
            let t = Tensor::new(&[3, 4], d.to_vec());
            let g = Tensor::new(&[4], vec![1.1, 0.9, 1.0, 1.2]);
            let b = Tensor::new(&[4], vec![0.1; 4]);
            t.layer_norm(&g, &b, 1e-12).unwrap().gelu().softmax(1).unwrap().to_vec()
        };
        assert_eq!(run(&data), run(&data));
    }
}
