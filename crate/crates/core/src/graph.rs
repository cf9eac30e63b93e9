//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an arena of nodes. Every primitive op appends one node whose
//! inputs are earlier nodes, so node order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep that visits each op once.
//!
//! Tensors are addressed by [`TensorId`]. Leaves created with
//! [`Graph::param`] accumulate gradients across backward calls until
//! [`Graph::zero_grad`]; interior nodes keep a gradient only when marked with
//! [`Graph::retain_grad`].
//!
//! Most ops accept arbitrary leading batch axes and act on the trailing one or
//! two axes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId, broadcast_b: bool },
    MatMulT { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    AddBias { x: TensorId, bias: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, factor: f64 },
    Sum { x: TensorId },
    Softmax { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { x: TensorId },
    ConcatRows { a: TensorId, b: TensorId },
    ConcatLast { parts: Vec<TensorId> },
    MeanRows { x: TensorId },
    SliceRows { x: TensorId, start: usize },
    Reshape { x: TensorId },
    SplitHeads { x: TensorId, heads: usize },
    MergeHeads { x: TensorId },
    SampleScale { x: TensorId, factors: Vec<f64> },
    Pick { x: TensorId, offset: usize },
    SoftCrossEntropy { logits: TensorId, targets: Vec<f64>, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulT { .. } => "matmul_t",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Softmax { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::ConcatRows { .. } => "concat_patches",
            Op::ConcatLast { .. } => "concat_last",
            Op::MeanRows { .. } => "mean_pool_patches",
            Op::SliceRows { .. } => "slice_patches",
            Op::Reshape { .. } => "reshape",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::SampleScale { .. } => "sample_scale",
            Op::Pick { .. } => "pick",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    retain_grad: bool,
    op: Op,
}

/// A recorded computation. Confined to one thread; create one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`.
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (t, &a_it) in a[i * k..(i + 1) * k].iter().enumerate() {
            if a_it == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (c_ij, &b_tj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_it * b_tj;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×k`, `b: n×k`.
fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += aᵀ · b` for `a: k×m`, `b: k×n`.
fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for t in 0..k {
        let b_row = &b[t * n..(t + 1) * n];
        for (i, &a_ti) in a[t * m..(t + 1) * m].iter().enumerate() {
            if a_ti == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_tj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ti * b_tj;
            }
        }
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn split_last2(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape.len();
    let batch = shape[..n - 2].iter().product();
    (batch, shape[n - 2], shape[n - 1])
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

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient; `None` for detached tensors or before backward.
    pub fn grad(&self, id: TensorId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Keep the gradient of an interior node after backward.
    pub fn retain_grad(&mut self, id: TensorId) {
        self.nodes[id.0].retain_grad = true;
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Result<TensorId> {
        self.leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Result<TensorId> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<TensorId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            retain_grad: false,
            op: Op::Leaf,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[TensorId]) -> Result<TensorId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            retain_grad: false,
            op,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a plain `k×n` matrix shared by every batch entry of `a`,
    /// or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (batch, m, k) = split_last2(&sa);
        let broadcast_b = sb.len() == 2 && sa.len() > 2;
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if kb != k || (!broadcast_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let b_off = if broadcast_b { 0 } else { bi * k * n };
            mm_acc(
                &va[bi * m * k..(bi + 1) * m * k],
                &vb[b_off..b_off + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        self.push(Op::MatMul { a, b, broadcast_b }, value, &[a, b])
    }

    /// `a · bᵀ` over the last two axes; both operands share leading axes.
    pub fn matmul_t(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul_t", &sa, &sb));
        }
        let (batch, m, k) = split_last2(&sa);
        let (_, n, kb) = split_last2(&sb);
        if kb != k {
            return Err(Error::shape("matmul_t", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            mm_nt_acc(
                &va[bi * m * k..(bi + 1) * m * k],
                &vb[bi * n * k..(bi + 1) * n * k],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        self.push(Op::MatMulT { a, b }, value, &[a, b])
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Add { a, b }, value, &[a, b])
    }

    /// Adds a `[D]` vector along the last axis.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let vb = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(vb).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(Op::AddBias { x, bias }, value, &[x, bias])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Mul { a, b }, value, &[a, b])
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale { x, factor }, value, &[x])
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum { x }, value, &[x])
    }

    /// Row-wise softmax over the last axis, shifted by the row max.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(row.iter().map(|v| (v - max).exp()));
            let total: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(Op::Softmax { x }, value, &[x])
    }

    /// Normalizes over the last axis (biased variance) then applies `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.shape(gamma) != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(gamma)));
        }
        if self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), self.shape(beta)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            value,
            &[x, gamma, beta],
        )
    }

    /// Affine map along the last axis: `x · w + b`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let value = self.value(x).map(gelu);
        self.push(Op::Gelu { x }, value, &[x])
    }

    /// Concatenates along the patch axis (second to last).
    pub fn concat_patches(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let n = sa.len();
        if n < 2 || sb.len() != n || sa[..n - 2] != sb[..n - 2] || sa[n - 1] != sb[n - 1] {
            return Err(Error::shape("concat_patches", &sa, &sb));
        }
        let (batch, pa, d) = split_last2(&sa);
        let pb = sb[n - 2];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(batch * (pa + pb) * d);
        for bi in 0..batch {
            data.extend_from_slice(&va[bi * pa * d..(bi + 1) * pa * d]);
            data.extend_from_slice(&vb[bi * pb * d..(bi + 1) * pb * d]);
        }
        let mut shape = sa.clone();
        shape[n - 2] = pa + pb;
        let value = Tensor::new(shape, data)?;
        self.push(Op::ConcatRows { a, b }, value, &[a, b])
    }

    /// Concatenates along the last axis; all parts share their leading axes.
    pub fn concat_last(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_last of nothing".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_last", self.shape(*first), s));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        self.push(
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
            value,
            parts,
        )
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(Op::Reshape { x }, value, &[x])
    }

    /// Patches `start..start + len` along the patch axis.
    pub fn slice_patches(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || len == 0 || start + len > s[s.len() - 2] {
            return Err(Error::InvalidArgument(format!(
                "slice_patches: rows {start}..{} out of range for shape {s:?}",
                start + len
            )));
        }
        let (batch, p, d) = split_last2(&s);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(batch * len * d);
        for bi in 0..batch {
            let base = bi * p * d + start * d;
            data.extend_from_slice(&xv[base..base + len * d]);
        }
        let mut shape = s;
        let n = shape.len();
        shape[n - 2] = len;
        let value = Tensor::new(shape, data)?;
        self.push(Op::SliceRows { x, start }, value, &[x])
    }

    /// Mean over the patch axis: `[.., P, D] -> [.., D]`.
    pub fn mean_pool_patches(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("mean_pool_patches", &s, &[]));
        }
        let (batch, p, d) = split_last2(&s);
        let xv = self.value(x).data();
        let mut data = vec![0.0; batch * d];
        for bi in 0..batch {
            let out = &mut data[bi * d..(bi + 1) * d];
            for row in xv[bi * p * d..(bi + 1) * p * d].chunks(d) {
                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|o| *o /= p as f64);
        }
        let value = Tensor::new(s[..s.len() - 2].iter().copied().chain([d]).collect::<Vec<_>>(), data)?;
        self.push(Op::MeanRows { x }, value, &[x])
    }

    /// `[.., P, h·d] -> [.., h, P, d]`.
    pub fn split_heads(&mut self, x: TensorId, heads: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || heads == 0 || !s[s.len() - 1].is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "split_heads: cannot split shape {s:?} into {heads} heads"
            )));
        }
        let (batch, p, dm) = split_last2(&s);
        let d = dm / heads;
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for bi in 0..batch {
            for i in 0..p {
                for h in 0..heads {
                    let src = bi * p * dm + i * dm + h * d;
                    let dst = bi * p * dm + h * p * d + i * d;
                    data[dst..dst + d].copy_from_slice(&xv[src..src + d]);
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([heads, p, d]);
        let value = Tensor::new(shape, data)?;
        self.push(Op::SplitHeads { x, heads }, value, &[x])
    }

    /// `[.., h, P, d] -> [.., P, h·d]`, inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::shape("merge_heads", &s, &[]));
        }
        let n = s.len();
        let (heads, p, d) = (s[n - 3], s[n - 2], s[n - 1]);
        let batch: usize = s[..n - 3].iter().product();
        let xv = self.value(x).data();
        let dm = heads * d;
        let mut data = vec![0.0; xv.len()];
        for bi in 0..batch {
            for h in 0..heads {
                for i in 0..p {
                    let src = bi * p * dm + h * p * d + i * d;
                    let dst = bi * p * dm + i * dm + h * d;
                    data[dst..dst + d].copy_from_slice(&xv[src..src + d]);
                }
            }
        }
        let mut shape = s[..n - 3].to_vec();
        shape.extend([p, dm]);
        let value = Tensor::new(shape, data)?;
        self.push(Op::MergeHeads { x }, value, &[x])
    }

    /// Multiplies each entry along the leading axis by a constant factor.
    ///
    /// Tensors of rank < 3 are treated as a single sample.
    pub fn sample_scale(&mut self, x: TensorId, factors: &[f64]) -> Result<TensorId> {
        let xv = self.value(x);
        let samples = if xv.rank() >= 3 { xv.shape()[0] } else { 1 };
        if factors.len() != samples {
            return Err(Error::shape("sample_scale", xv.shape(), &[factors.len()]));
        }
        let per = xv.numel() / samples;
        let data = xv
            .data()
            .chunks(per)
            .zip(factors)
            .flat_map(|(chunk, f)| chunk.iter().map(move |v| v * f))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            Op::SampleScale {
                x,
                factors: factors.to_vec(),
            },
            value,
            &[x],
        )
    }

    /// Selects one element as a scalar.
    pub fn pick(&mut self, x: TensorId, index: &[usize]) -> Result<TensorId> {
        let offset = self.value(x).offset(index)?;
        let value = Tensor::scalar(self.value(x).data()[offset]);
        self.push(Op::Pick { x, offset }, value, &[x])
    }

    /// Mean over rows of `-Σ_c target_c · log softmax(logits)_c`.
    ///
    /// `targets` must have the shape of `logits` (`[B, N]`) and is constant.
    pub fn soft_cross_entropy(&mut self, logits: TensorId, targets: &Tensor) -> Result<TensorId> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape() != targets.shape() {
            return Err(Error::shape("soft_cross_entropy", lv.shape(), targets.shape()));
        }
        let n = lv.last_dim();
        let rows = lv.numel() / n;
        let mut probs = Vec::with_capacity(lv.numel());
        let mut loss = 0.0;
        for (row, q) in lv.data().chunks(n).zip(targets.data().chunks(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (&z, &qc) in row.iter().zip(q) {
                loss -= qc * (z - lse);
                probs.push((z - lse).exp());
            }
        }
        let value = Tensor::scalar(loss / rows as f64);
        self.push(
            Op::SoftCrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
            value,
            &[logits],
        )
    }

    /// Back-propagates from a scalar, accumulating into leaf gradients.
    ///
    /// Leaves that do not require grad are left without a gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) || node.retain_grad {
                let shape = node.value.shape().to_vec();
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(Tensor::new(shape, g.clone())?),
                }
                if matches!(self.nodes[idx].op, Op::Leaf) {
                    continue;
                }
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, broadcast_b } => {
                let sa = self.shape(a);
                let (batch, m, k) = split_last2(sa);
                let n = node.value.last_dim();
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut da = vec![0.0; va.len()];
                    for bi in 0..batch {
                        let b_off = if broadcast_b { 0 } else { bi * k * n };
                        mm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &vb[b_off..b_off + k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; vb.len()];
                    for bi in 0..batch {
                        let b_off = if broadcast_b { 0 } else { bi * k * n };
                        mm_tn_acc(
                            &va[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut db[b_off..b_off + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            &Op::MatMulT { a, b } => {
                let (batch, m, k) = split_last2(self.shape(a));
                let n = node.value.last_dim();
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let mut da = vec![0.0; va.len()];
                    for bi in 0..batch {
                        mm_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &vb[bi * n * k..(bi + 1) * n * k],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(b) {
                    let mut db = vec![0.0; vb.len()];
                    for bi in 0..batch {
                        mm_tn_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &va[bi * m * k..(bi + 1) * m * k],
                            &mut db[bi * n * k..(bi + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            &Op::Add { a, b } => {
                if self.wants(a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            &Op::AddBias { x, bias } => {
                if self.wants(x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.wants(bias) {
                    let d = self.value(bias).numel();
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    add_into(&mut grads[bias.0], &db);
                }
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let da: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(b) {
                    let db: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[b.0], &db);
                }
            }
            &Op::Scale { x, factor } => {
                let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                add_into(&mut grads[x.0], &dx);
            }
            &Op::Sum { x } => {
                let dx = vec![g[0]; self.value(x).numel()];
                add_into(&mut grads[x.0], &dx);
            }
            &Op::Softmax { x } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(d).zip(g.chunks(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(xhat.len());
                    for ((hr, gr), is) in xhat.chunks(d).zip(g.chunks(d)).zip(inv_std) {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(g, w)| g * w).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        dx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(dh, h)| is * (dh - mean_dh - h * mean_dh_h)),
                        );
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (hr, gr) in xhat.chunks(d).zip(g.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    add_into(&mut grads[gamma.0], &dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    add_into(&mut grads[beta.0], &db);
                }
            }
            &Op::Gelu { x } => {
                let dx: Vec<f64> = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, g)| g * gelu_grad(v))
                    .collect();
                add_into(&mut grads[x.0], &dx);
            }
            &Op::ConcatRows { a, b } => {
                let (batch, pa, d) = split_last2(self.shape(a));
                let pb = self.shape(b)[self.shape(b).len() - 2];
                let stride = (pa + pb) * d;
                if self.wants(a) {
                    let da: Vec<f64> = (0..batch)
                        .flat_map(|bi| g[bi * stride..bi * stride + pa * d].iter().copied())
                        .collect();
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(b) {
                    let db: Vec<f64> = (0..batch)
                        .flat_map(|bi| g[bi * stride + pa * d..(bi + 1) * stride].iter().copied())
                        .collect();
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::ConcatLast { parts } => {
                let total = node.value.last_dim();
                let rows = node.value.numel() / total;
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.wants(p) {
                        let dp: Vec<f64> = (0..rows)
                            .flat_map(|r| g[r * total + start..r * total + start + w].iter().copied())
                            .collect();
                        add_into(&mut grads[p.0], &dp);
                    }
                    start += w;
                }
            }
            &Op::MeanRows { x } => {
                let (batch, p, d) = split_last2(self.shape(x));
                let mut dx = Vec::with_capacity(batch * p * d);
                for bi in 0..batch {
                    for _ in 0..p {
                        dx.extend(g[bi * d..(bi + 1) * d].iter().map(|v| v / p as f64));
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            &Op::Reshape { x } => add_into(&mut grads[x.0], g),
            &Op::SliceRows { x, start } => {
                let (batch, p, d) = split_last2(self.shape(x));
                let len = node.value.shape()[node.value.rank() - 2];
                let mut dx = vec![0.0; batch * p * d];
                for bi in 0..batch {
                    let base = bi * p * d + start * d;
                    dx[base..base + len * d].copy_from_slice(&g[bi * len * d..(bi + 1) * len * d]);
                }
                add_into(&mut grads[x.0], &dx);
            }
            &Op::SplitHeads { x, heads } => {
                let (batch, p, dm) = split_last2(self.shape(x));
                let d = dm / heads;
                let mut dx = vec![0.0; g.len()];
                for bi in 0..batch {
                    for i in 0..p {
                        for h in 0..heads {
                            let src = bi * p * dm + h * p * d + i * d;
                            let dst = bi * p * dm + i * dm + h * d;
                            dx[dst..dst + d].copy_from_slice(&g[src..src + d]);
                        }
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            &Op::MergeHeads { x } => {
                let s = self.shape(x);
                let n = s.len();
                let (heads, p, d) = (s[n - 3], s[n - 2], s[n - 1]);
                let batch: usize = s[..n - 3].iter().product();
                let dm = heads * d;
                let mut dx = vec![0.0; g.len()];
                for bi in 0..batch {
                    for h in 0..heads {
                        for i in 0..p {
                            let dst = bi * p * dm + h * p * d + i * d;
                            let src = bi * p * dm + i * dm + h * d;
                            dx[dst..dst + d].copy_from_slice(&g[src..src + d]);
                        }
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::SampleScale { x, factors } => {
                let per = g.len() / factors.len();
                let dx: Vec<f64> = g
                    .chunks(per)
                    .zip(factors)
                    .flat_map(|(chunk, f)| chunk.iter().map(move |v| v * f))
                    .collect();
                add_into(&mut grads[x.0], &dx);
            }
            &Op::Pick { x, offset } => {
                let mut dx = vec![0.0; self.value(x).numel()];
                dx[offset] = g[0];
                add_into(&mut grads[x.0], &dx);
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.value(*logits).last_dim();
                let rows = probs.len() / n;
                let scale = g[0] / rows as f64;
                let dl: Vec<f64> = probs
                    .iter()
                    .zip(targets)
                    .map(|(p, q)| scale * (p - q))
                    .collect();
                add_into(&mut grads[logits.0], &dl);
            }
        }
    }
}
