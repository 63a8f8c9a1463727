//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node whose parents were created earlier, so creation
//! order is already a topological order and `backward` is a single reverse
//! sweep that visits each node once.

use std::sync::Arc;

use super::tensor::{numel_of, strides_of};
use super::{NumericsError, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Border handling for 3D convolution padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    /// Padding along (time, height, width).
    pub padding: [usize; 3],
    pub mode: PadMode,
}

/// Batch-norm behaviour: batch statistics or frozen running statistics.
#[derive(Debug, Clone)]
pub enum BatchNormMode<F> {
    Train,
    Eval { mean: Vec<F>, var: Vec<F> },
}

/// Per-channel batch statistics observed during a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Unbiased variance, the quantity folded into running averages.
    pub var: Vec<F>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, F),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanAxis { x: Var, axis: usize },
    Softmax(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F>, train: bool },
    Conv3d { x: Var, w: Var, spec: Conv3dSpec },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GatherRows { x: Var, idx: Arc<[usize]> },
    ScatterRows { x: Var, idx: Arc<[usize]> },
    BceWithLogits { logits: Var, target: Vec<F> },
    Mse { pred: Var, target: Vec<F> },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddTiled(..) => "add_tiled",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Softmax(..) => "softmax",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm_3d",
            Op::Conv3d { .. } => "conv3d",
            Op::MaxPool2d { .. } => "max_pool",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Mse { .. } => "mse",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], retained for leaf nodes only.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    check_finite: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Resolves a padded coordinate onto the input axis.
#[inline]
fn pad_index(pos: isize, len: usize, mode: PadMode) -> Option<usize> {
    if pos >= 0 && (pos as usize) < len {
        Some(pos as usize)
    } else {
        match mode {
            PadMode::Zeros => None,
            PadMode::Replicate => Some(pos.clamp(0, len as isize - 1) as usize),
        }
    }
}

/// `out[i][j] += sum_k a[i][k] * b[k][j]`
fn matmul_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[i][j] += sum_k a[i][k] * b[j][k]`, i.e. `a * b^T`.
fn matmul_bt_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            out[i * n + j] = out[i * n + j] + s;
        }
    }
}

/// `out[i][j] += sum_k a[k][i] * b[k][j]`, i.e. `a^T * b`.
fn matmul_at_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == F::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

#[inline]
fn gelu_fwd<F: Real>(x: F) -> F {
    let k = F::lit(GELU_K);
    let c = F::lit(GELU_C);
    let half = F::lit(0.5);
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<F: Real>(x: F) -> F {
    let k = F::lit(GELU_K);
    let c = F::lit(GELU_C);
    let half = F::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::lit(3.0) * c * x * x)
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: true }
    }

    /// Disables the per-op NaN/Inf scan.
    pub fn without_finite_checks(mut self) -> Self {
        self.check_finite = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Result<Var, NumericsError> {
        if self.check_finite && !value.is_finite() {
            return Err(NumericsError::NonFiniteDetected { op: op.name(), phase: "forward" });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op<F>, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Var, NumericsError> {
        let name = op.name();
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// `a + b` where `b` is repeated across the leading elements of `a`
    /// (`a.numel()` must be a multiple of `b.numel()`); used for biases and
    /// positional tables.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let na = self.value(a).numel();
        let nb = self.value(b).numel();
        if nb == 0 || na % nb != 0 {
            return Err(mismatch("add_tiled", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let vb = self.value(b).data().to_vec();
        let va = self.value(a);
        let data = va.data().chunks(nb).flat_map(|c| c.iter().zip(&vb).map(|(&x, &y)| x + y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddTiled(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![F::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut data, m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// Batched `[g,m,k] x [g,k,n] -> [g,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("bmm", format!("{:?} x {:?}", sa, sb)));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![F::zero(); g * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            matmul_acc(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut data[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::new(vec![g, m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Bmm(a, b), rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(a).permuted(perm)?;
        let rg = self.rg(a);
        self.push(out, Op::Permute(a, perm.to_vec()), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(mismatch("transpose", format!("{:?}", self.shape(a))));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(mismatch("mean", "empty tensor".into()));
        }
        let out = Tensor::scalar(v.sum() / F::lit(v.numel() as f64));
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Mean over one axis, removing it from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(mismatch("mean_axis", format!("axis {axis} of {:?}", shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let inv = F::one() / F::lit(len as f64);
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                add_into(&mut data[o * inner..(o + 1) * inner], &src[base..base + inner]);
            }
        }
        for d in &mut data {
            *d = *d * inv;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(a);
        self.push(out, Op::MeanAxis { x: a, axis }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let v = self.value(a);
        let n = *v.shape().last().ok_or_else(|| mismatch("softmax", "scalar input".into()))?;
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s = s + *x;
            }
            for x in row.iter_mut() {
                *x = *x / s;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(gelu_fwd);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Layer norm over the last axis with affine `gamma`, `beta` of that width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| mismatch("layer_norm", "scalar input".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch(
                "layer_norm",
                format!("affine {:?}/{:?} for width {d}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let eps = F::lit(LAYER_NORM_EPS);
        let inv_d = F::one() / F::lit(d as f64);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut xhat = vec![F::zero(); src.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut data = vec![F::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                data[r * d + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Batch norm for `[B, C, ...]` inputs, normalizing each channel over
    /// the batch and all trailing axes. Training mode returns the observed
    /// batch statistics so the caller can fold them into running averages.
    pub fn batch_norm_3d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: &BatchNormMode<F>,
    ) -> Result<(Var, Option<BatchStats<F>>), NumericsError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(mismatch("batch_norm_3d", format!("{:?}", shape)));
        }
        let (bsz, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("batch_norm_3d", format!("affine for {c} channels")));
        }
        let count = bsz * inner;
        let eps = F::lit(BATCH_NORM_EPS);
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let src = self.value(x).data();
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        let train = matches!(mode, BatchNormMode::Train);
        let mut stats = None;
        match mode {
            BatchNormMode::Train => {
                if count < 2 {
                    return Err(NumericsError::InvalidArgument(
                        "batch_norm_3d in training mode needs at least two values per channel".into(),
                    ));
                }
                let inv = F::one() / F::lit(count as f64);
                for bi in 0..bsz {
                    for ci in 0..c {
                        let base = (bi * c + ci) * inner;
                        mean[ci] = mean[ci] + src[base..base + inner].iter().copied().sum::<F>();
                    }
                }
                for m in &mut mean {
                    *m = *m * inv;
                }
                for bi in 0..bsz {
                    for ci in 0..c {
                        let base = (bi * c + ci) * inner;
                        let m = mean[ci];
                        var[ci] = var[ci] + src[base..base + inner].iter().map(|&v| (v - m) * (v - m)).sum::<F>();
                    }
                }
                let unbiased: Vec<F> = var.iter().map(|&s| s / F::lit((count - 1) as f64)).collect();
                for v in &mut var {
                    *v = *v * inv;
                }
                stats = Some(BatchStats { mean: mean.clone(), var: unbiased });
            }
            BatchNormMode::Eval { mean: rm, var: rv } => {
                if rm.len() != c || rv.len() != c {
                    return Err(mismatch("batch_norm_3d", "running statistics width".into()));
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
        }
        let rstd: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); src.len()];
        let mut data = vec![F::zero(); src.len()];
        for bi in 0..bsz {
            for ci in 0..c {
                let base = (bi * c + ci) * inner;
                for i in base..base + inner {
                    let xh = (src[i] - mean[ci]) * rstd[ci];
                    xhat[i] = xh;
                    data[i] = xh * g[ci] + b[ci];
                }
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, rstd, train }, rg)?;
        Ok((v, stats))
    }

    /// Stride-1 3D convolution: input `[B, Cin, T, H, W]`, weight
    /// `[Cout, Cin, kt, kh, kw]`, no bias.
    pub fn conv3d(&mut self, x: Var, w: Var, spec: Conv3dSpec) -> Result<Var, NumericsError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 || sx[1] != sw[1] {
            return Err(mismatch("conv3d", format!("input {:?} weight {:?}", sx, sw)));
        }
        let out_dims = conv_out_dims(&sx, &sw, spec)
            .ok_or_else(|| mismatch("conv3d", format!("kernel {:?} larger than padded input {:?}", sw, sx)))?;
        let (bsz, cout) = (sx[0], sw[0]);
        let mut data = vec![F::zero(); bsz * cout * out_dims.iter().product::<usize>()];
        let (vx, vw) = (self.value(x).data(), self.value(w).data());
        conv3d_visit(&sx, &sw, spec, |o, i, k| data[o] = data[o] + vx[i] * vw[k]);
        let out = Tensor::new(vec![bsz, cout, out_dims[0], out_dims[1], out_dims[2]], data)?;
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::Conv3d { x, w, spec }, rg)
    }

    /// Non-overlapping `k x k` max pool over the last two axes.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let nd = shape.len();
        if nd < 2 || k == 0 || shape[nd - 2] % k != 0 || shape[nd - 1] % k != 0 {
            return Err(mismatch("max_pool", format!("{:?} with window {k}", shape)));
        }
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let (oh, ow) = (h / k, w / k);
        let outer: usize = shape[..nd - 2].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * oh * ow);
        let mut argmax = Vec::with_capacity(outer * oh * ow);
        for o in 0..outer {
            for pr in 0..oh {
                for pc in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut at = 0;
                    for r in pr * k..(pr + 1) * k {
                        for c in pc * k..(pc + 1) * k {
                            let i = o * h * w + r * w + c;
                            if src[i] > best {
                                best = src[i];
                                at = i;
                            }
                        }
                    }
                    data.push(best);
                    argmax.push(at);
                }
            }
        }
        let mut out_shape = shape[..nd - 2].to_vec();
        out_shape.extend([oh, ow]);
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2d { x, argmax }, rg)
    }

    /// Selects rows of a `[R, D]` tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &Arc<[usize]>) -> Result<Var, NumericsError> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(mismatch("gather_rows", format!("{:?}", shape)));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(mismatch("gather_rows", format!("row {bad} of {rows}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        let rg = self.rg(x);
        self.push(out, Op::GatherRows { x, idx: idx.clone() }, rg)
    }

    /// Places row `k` of a `[K, D]` tensor at row `idx[k]` of a zero
    /// `[rows, D]` tensor. Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: &Arc<[usize]>, rows: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] != idx.len() {
            return Err(mismatch("scatter_rows", format!("{:?} with {} indices", shape, idx.len())));
        }
        let d = shape[1];
        let mut seen = vec![false; rows];
        for &i in idx.iter() {
            if i >= rows || std::mem::replace(&mut seen[i], true) {
                return Err(mismatch("scatter_rows", format!("row {i} out of range or repeated")));
            }
        }
        let src = self.value(x).data();
        let mut data = vec![F::zero(); rows * d];
        for (k, &i) in idx.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&src[k * d..(k + 1) * d]);
        }
        let out = Tensor::new(vec![rows, d], data)?;
        let rg = self.rg(x);
        self.push(out, Op::ScatterRows { x, idx: idx.clone() }, rg)
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and soft targets in `[0,1]`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<F>) -> Result<Var, NumericsError> {
        let v = self.value(logits);
        if v.numel() != target.numel() || v.numel() == 0 {
            return Err(mismatch("bce_with_logits", format!("{:?} vs {:?}", v.shape(), target.shape())));
        }
        let mut s = F::zero();
        for (&x, &y) in v.data().iter().zip(target.data()) {
            s = s + x.max(F::zero()) - x * y + (F::one() + (-x.abs()).exp()).ln();
        }
        let out = Tensor::scalar(s / F::lit(v.numel() as f64));
        let rg = self.rg(logits);
        self.push(out, Op::BceWithLogits { logits, target: target.data().to_vec() }, rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<F>) -> Result<Var, NumericsError> {
        let v = self.value(pred);
        if v.numel() != target.numel() || v.numel() == 0 {
            return Err(mismatch("mse", format!("{:?} vs {:?}", v.shape(), target.shape())));
        }
        let s: F = v.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(s / F::lit(v.numel() as f64));
        let rg = self.rg(pred);
        self.push(out, Op::Mse { pred, target: target.data().to_vec() }, rg)
    }

    /// Back-propagates from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>, NumericsError> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(NumericsError::NotScalar { shape: rv.shape().to_vec() });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        let mut leaves: Vec<Option<Tensor<F>>> = vec![None; n];
        grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if self.check_finite && g.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFiniteDetected { op: node.op.name(), phase: "backward" });
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, contrib: Vec<F>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => add_into(existing, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Like `accumulate`, but builds the contribution lazily into the slot.
    fn accumulate_with(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.rg(v) {
            return;
        }
        let len = self.value(v).numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); len]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                self.accumulate(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
            }
            Op::AddTiled(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                let nb = self.value(*b).numel();
                self.accumulate_with(grads, *b, |slot| {
                    for chunk in g.chunks(nb) {
                        add_into(slot, chunk);
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|&v| v * *s).collect());
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |slot| matmul_bt_acc(g, vb, slot, m, n, k));
                self.accumulate_with(grads, *b, |slot| matmul_at_acc(va, g, slot, k, m, n));
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate_with(grads, *a, |slot| {
                    for i in 0..bs {
                        matmul_bt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut slot[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.accumulate_with(grads, *b, |slot| {
                    for i in 0..bs {
                        matmul_at_acc(
                            &va[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut slot[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("grad shape");
                let back = gt.permuted(&inverse).expect("inverse permutation");
                self.accumulate(grads, *a, back.into_data());
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0] / F::lit(n as f64); n]);
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let inv = F::one() / F::lit(len as f64);
                self.accumulate_with(grads, *x, |slot| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for j in 0..inner {
                                slot[base + j] = slot[base + j] + g[o * inner + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("softmax rank");
                let mut dx = vec![F::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(&d, &v)| d * gelu_grad(v)).collect());
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, g.iter().zip(y).map(|(&d, &s)| d * s * (F::one() - s)).collect());
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let gv = self.value(*gamma).data();
                let inv_d = F::one() / F::lit(d as f64);
                self.accumulate_with(grads, *x, |slot| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let range = r * d..(r + 1) * d;
                        let (gr, xh) = (&g[range.clone()], &xhat[range.clone()]);
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xh[j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            slot[r * d + j] = slot[r * d + j] + rs * (dxh - m1 - xh[j] * m2);
                        }
                    }
                });
                self.accumulate_with(grads, *gamma, |slot| {
                    for (gr, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            slot[j] = slot[j] + gr[j] * xh[j];
                        }
                    }
                });
                self.accumulate_with(grads, *beta, |slot| {
                    for gr in g.chunks(d) {
                        add_into(slot, gr);
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let shape = self.shape(*x);
                let (bsz, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for bi in 0..bsz {
                    for ci in 0..c {
                        let base = (bi * c + ci) * inner;
                        for i in base..base + inner {
                            dgamma[ci] = dgamma[ci] + g[i] * xhat[i];
                            dbeta[ci] = dbeta[ci] + g[i];
                        }
                    }
                }
                let count = F::lit((bsz * inner) as f64);
                let train = *train;
                self.accumulate_with(grads, *x, |slot| {
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let base = (bi * c + ci) * inner;
                            let scale = gv[ci] * rstd[ci];
                            for i in base..base + inner {
                                let dx = if train {
                                    scale * (g[i] - dbeta[ci] / count - xhat[i] * dgamma[ci] / count)
                                } else {
                                    scale * g[i]
                                };
                                slot[i] = slot[i] + dx;
                            }
                        }
                    }
                });
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Conv3d { x, w, spec } => {
                let (sx, sw) = (self.shape(*x).to_vec(), self.shape(*w).to_vec());
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                self.accumulate_with(grads, *x, |slot| {
                    conv3d_visit(&sx, &sw, *spec, |o, i, k| slot[i] = slot[i] + g[o] * vw[k]);
                });
                self.accumulate_with(grads, *w, |slot| {
                    conv3d_visit(&sx, &sw, *spec, |o, i, k| slot[k] = slot[k] + g[o] * vx[i]);
                });
            }
            Op::MaxPool2d { x, argmax } => {
                self.accumulate_with(grads, *x, |slot| {
                    for (&at, &d) in argmax.iter().zip(g) {
                        slot[at] = slot[at] + d;
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = self.shape(*x)[1];
                self.accumulate_with(grads, *x, |slot| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut slot[i * d..(i + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                });
            }
            Op::ScatterRows { x, idx } => {
                let d = self.shape(*x)[1];
                self.accumulate_with(grads, *x, |slot| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut slot[k * d..(k + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::BceWithLogits { logits, target } => {
                let x = self.value(*logits).data();
                let scale = g[0] / F::lit(x.len() as f64);
                self.accumulate(grads, *logits, x.iter().zip(target).map(|(&v, &y)| scale * (sigmoid(v) - y)).collect());
            }
            Op::Mse { pred, target } => {
                let x = self.value(*pred).data();
                let scale = F::lit(2.0) * g[0] / F::lit(x.len() as f64);
                self.accumulate(grads, *pred, x.iter().zip(target).map(|(&v, &y)| scale * (v - y)).collect());
            }
        }
    }
}

fn conv_out_dims(sx: &[usize], sw: &[usize], spec: Conv3dSpec) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        let padded = sx[2 + a] + 2 * spec.padding[a];
        if sw[2 + a] == 0 || sw[2 + a] > padded {
            return None;
        }
        out[a] = padded - sw[2 + a] + 1;
    }
    Some(out)
}

/// Calls `f(out_index, in_index, weight_index)` for every multiply-add of
/// the convolution; forward and both backward passes share this traversal.
fn conv3d_visit(sx: &[usize], sw: &[usize], spec: Conv3dSpec, mut f: impl FnMut(usize, usize, usize)) {
    let dims = conv_out_dims(sx, sw, spec).expect("validated at forward");
    let (bsz, cin, t, h, w) = (sx[0], sx[1], sx[2], sx[3], sx[4]);
    let (cout, kt, kh, kw) = (sw[0], sw[2], sw[3], sw[4]);
    let [ot, oh, ow] = dims;
    // Per axis: (kernel offset, output position) -> input position.
    let axis_map = |len: usize, k: usize, out: usize, pad: usize| -> Vec<Option<usize>> {
        let mut m = Vec::with_capacity(k * out);
        for dk in 0..k {
            for o in 0..out {
                m.push(pad_index(o as isize + dk as isize - pad as isize, len, spec.mode));
            }
        }
        m
    };
    let mt = axis_map(t, kt, ot, spec.padding[0]);
    let mh = axis_map(h, kh, oh, spec.padding[1]);
    let mw = axis_map(w, kw, ow, spec.padding[2]);
    let in_strides = strides_of(sx);
    let out_spatial = ot * oh * ow;
    let in_spatial = t * h * w;
    let k_spatial = kt * kh * kw;
    for b in 0..bsz {
        for co in 0..cout {
            let obase = (b * cout + co) * out_spatial;
            for ci in 0..cin {
                let ibase = (b * cin + ci) * in_spatial;
                let kbase = (co * cin + ci) * k_spatial;
                for dt in 0..kt {
                    for dh in 0..kh {
                        for dw in 0..kw {
                            let kidx = kbase + (dt * kh + dh) * kw + dw;
                            for pt in 0..ot {
                                let Some(it) = mt[dt * ot + pt] else { continue };
                                for ph in 0..oh {
                                    let Some(ih) = mh[dh * oh + ph] else { continue };
                                    for pw in 0..ow {
                                        let Some(iw) = mw[dw * ow + pw] else { continue };
                                        let o = obase + (pt * oh + ph) * ow + pw;
                                        let i = ibase + it * in_strides[2] + ih * in_strides[3] + iw;
                                        f(o, i, kidx);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    debug_assert_eq!(numel_of(&[bsz, cout, ot, oh, ow]), bsz * cout * out_spatial);
}
