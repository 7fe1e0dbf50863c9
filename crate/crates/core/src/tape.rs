//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records a DAG of operations as they execute. Node values are
//! immutable once pushed; `backward` walks the tape in reverse and accumulates
//! gradients additively in f64 buffers, rounding to f32 at the end. The op set
//! is exactly what the models need — no general broadcasting, no fusion.
//!
//! Determinism contract: every reduction accumulates in f64 over ascending
//! indices. Outputs are bitwise reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// For scalar outputs: the f64 accumulation before rounding to f32.
    /// Finite-difference checks read losses through this to keep the
    /// difference quotient above the f32 noise floor.
    scalar_f64: Option<f64>,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Conv3d {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    DwConv1d {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
    },
    MaxPoolHw {
        x: NodeId,
        argmax: Vec<usize>,
    },
    MeanHw(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    },
    ChannelNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Swish(NodeId),
    Sigmoid(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatLast(NodeId, NodeId),
    SliceLast {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    CtcLoss {
        logp: NodeId,
        label: Vec<usize>,
        blank: usize,
    },
    CeLoss {
        logp: NodeId,
        targets: Vec<usize>,
        eps: f32,
    },
}

/// Result of building a CTC loss node: short utterances cannot carry long
/// labels, and that case is a defined outcome rather than an error so callers
/// can skip the sample.
pub enum CtcOutcome {
    Feasible(NodeId),
    Infeasible,
}

/// Gradients produced by [`Tape::backward`]. Nodes never reached by the
/// sweep report zero gradients of the right shape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Constant input: no gradient will be computed for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Differentiable leaf (a model parameter or an input under test).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scalar_f64: None,
        });
        id
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        value.check_finite(op_name)?;
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn push_scalar(
        &mut self,
        op_name: &'static str,
        exact: f64,
        op: Op,
        requires_grad: bool,
    ) -> Result<NodeId> {
        let id = self.push(op_name, Tensor::scalar(exact as f32), op, requires_grad)?;
        self.nodes[id.0].scalar_f64 = Some(exact);
        Ok(id)
    }

    /// Read a scalar node at the f64 precision of its defining reduction,
    /// when that was retained (losses, sums); otherwise the stored f32.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let node = &self.nodes[id.0];
        node.scalar_f64
            .unwrap_or_else(|| node.value.data()[0] as f64)
    }

    /// Hash of every piecewise-linear branch decision on the tape: max-pool
    /// argmax choices and relu activation signs. Finite-difference checks
    /// compare signatures of the two perturbed evaluations — when they
    /// differ, the difference quotient straddles a derivative kink and says
    /// nothing about the analytic gradient.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::MaxPoolHw { argmax, .. } => {
                    for &i in argmax {
                        feed(i as u64);
                    }
                }
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        feed(u64::from(v > 0.0));
                    }
                }
                _ => {}
            }
        }
        h
    }

    // ── Elementwise and shape ops ───────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                first_mismatch(va.shape(), vb.shape()),
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let scalar = out.numel() == 1;
        let rg = self.requires(a) || self.requires(b);
        let id = self.push("add", out, Op::Add(a, b), rg)?;
        if scalar {
            self.nodes[id.0].scalar_f64 = Some(self.scalar_value(a) + self.scalar_value(b));
        }
        Ok(id)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                first_mismatch(va.shape(), vb.shape()),
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let scalar = out.numel() == 1;
        let rg = self.requires(a) || self.requires(b);
        let id = self.push("mul", out, Op::Mul(a, b), rg)?;
        if scalar {
            self.nodes[id.0].scalar_f64 = Some(self.scalar_value(a) * self.scalar_value(b));
        }
        Ok(id)
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * c).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let scalar = out.numel() == 1;
        let rg = self.requires(x);
        let id = self.push("scale", out, Op::Scale(x, c), rg)?;
        if scalar {
            self.nodes[id.0].scalar_f64 = Some(self.scalar_value(x) * c as f64);
        }
        Ok(id)
    }

    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape()[..va.rank() - 1] != vb.shape()[..vb.rank() - 1] {
            return Err(Error::shape(
                "concat_last",
                0,
                format!("leading dims differ: {:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let (da, db) = (va.last_dim(), vb.last_dim());
        let rows = va.leading();
        let mut data = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * da..(r + 1) * da]);
            data.extend_from_slice(&vb.data()[r * db..(r + 1) * db]);
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = da + db;
        let out = Tensor::new(shape, data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push("concat_last", out, Op::ConcatLast(a, b), rg)
    }

    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        let d = v.last_dim();
        if start + len > d {
            return Err(Error::shape(
                "slice_last",
                v.rank() - 1,
                format!("slice {start}..{} exceeds dim {d}", start + len),
            ));
        }
        let rows = v.leading();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        let rg = self.requires(x);
        self.push("slice_last", out, Op::SliceLast { x, start, len }, rg)
    }

    // ── Activations ─────────────────────────────────────────────────────

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a.max(0.0)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires(x);
        self.push("relu", out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid_f(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires(x);
        self.push("sigmoid", out, Op::Sigmoid(x), rg)
    }

    /// tanh-approximation GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| gelu_f(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires(x);
        self.push("gelu", out, Op::Gelu(x), rg)
    }

    /// Swish / SiLU: `x * sigmoid(x)`.
    pub fn swish(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * sigmoid_f(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires(x);
        self.push("swish", out, Op::Swish(x), rg)
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// Affine map along the last axis: `x[..., d_in] -> [..., d_out]`
    /// with `w: [d_out, d_in]`, optional `b: [d_out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.rank() != 2 {
            return Err(Error::shape("linear", 0, "weight must be 2-D".to_string()));
        }
        let (d_out, d_in) = (vw.shape()[0], vw.shape()[1]);
        if vx.last_dim() != d_in {
            return Err(Error::shape(
                "linear",
                vx.rank() - 1,
                format!("input last dim {} != weight d_in {d_in}", vx.last_dim()),
            ));
        }
        if let Some(bid) = b {
            let vb = self.value(bid);
            if vb.shape() != [d_out] {
                return Err(Error::shape(
                    "linear",
                    0,
                    format!("bias shape {:?} != [{d_out}]", vb.shape()),
                ));
            }
        }
        let rows = vx.leading();
        let xd = vx.data();
        let wd = vw.data();
        let bd = b.map(|bid| self.value(bid).data().to_vec());
        let mut data = vec![0f32; rows * d_out];
        for m in 0..rows {
            for o in 0..d_out {
                let mut acc = bd.as_ref().map_or(0.0, |bb| bb[o] as f64);
                let xrow = &xd[m * d_in..(m + 1) * d_in];
                let wrow = &wd[o * d_in..(o + 1) * d_in];
                for i in 0..d_in {
                    acc += xrow[i] as f64 * wrow[i] as f64;
                }
                data[m * d_out + o] = acc as f32;
            }
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        let out = Tensor::new(shape, data)?;
        let rg = self.requires(x) || self.requires(w) || b.is_some_and(|bid| self.requires(bid));
        self.push("linear", out, Op::Linear { x, w, b }, rg)
    }

    /// `a: [m, k] @ b: [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 {
            return Err(Error::shape("matmul", 0, "operands must be 2-D".to_string()));
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                1,
                format!("inner dims {k} vs {k2}"),
            ));
        }
        let (ad, bd) = (va.data(), vb.data());
        let mut data = vec![0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0f64;
                for p in 0..k {
                    acc += ad[i * k + p] as f64 * bd[p * n + j] as f64;
                }
                data[i * n + j] = acc as f32;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.requires(a) || self.requires(b);
        self.push("matmul", out, Op::Matmul(a, b), rg)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::shape("transpose", 0, "operand must be 2-D".to_string()));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let src = v.data();
        let mut data = vec![0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        let rg = self.requires(x);
        self.push("transpose", out, Op::Transpose(x), rg)
    }

    // ── Convolutions and pooling ────────────────────────────────────────

    /// Cross-correlation: `x: [c_in, t, h, w]`, `k: [c_out, c_in, kt, kh, kw]`.
    /// Accumulates per output element over `(c_in, kt, kh, kw)` ascending.
    pub fn conv3d(
        &mut self,
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<NodeId> {
        let (vx, vk) = (self.value(x), self.value(k));
        if vx.rank() != 4 {
            return Err(Error::shape("conv3d", 0, "input must be [c, t, h, w]".to_string()));
        }
        if vk.rank() != 5 {
            return Err(Error::shape("conv3d", 0, "kernel must be [co, ci, kt, kh, kw]".to_string()));
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(Error::Config("conv3d: stride must be >= 1".to_string()));
        }
        let [c_in, t, h, w] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let [c_out, kc, kt, kh, kw] = [
            vk.shape()[0],
            vk.shape()[1],
            vk.shape()[2],
            vk.shape()[3],
            vk.shape()[4],
        ];
        if kc != c_in {
            return Err(Error::shape(
                "conv3d",
                0,
                format!("kernel c_in {kc} != input channels {c_in}"),
            ));
        }
        for (axis, (dim, (ks, p))) in [(t, (kt, pad[0])), (h, (kh, pad[1])), (w, (kw, pad[2]))]
            .into_iter()
            .enumerate()
        {
            if ks > dim + 2 * p {
                return Err(Error::shape(
                    "conv3d",
                    axis + 1,
                    format!("kernel {ks} exceeds padded input {}", dim + 2 * p),
                ));
            }
        }
        if let Some(bid) = b {
            if self.value(bid).shape() != [c_out] {
                return Err(Error::shape("conv3d", 0, "bias must be [c_out]".to_string()));
            }
        }
        let t_out = (t + 2 * pad[0] - kt) / stride[0] + 1;
        let h_out = (h + 2 * pad[1] - kh) / stride[1] + 1;
        let w_out = (w + 2 * pad[2] - kw) / stride[2] + 1;
        let xd = vx.data();
        let kd = vk.data();
        let bd = b.map(|bid| self.value(bid).data().to_vec());
        let mut data = vec![0f32; c_out * t_out * h_out * w_out];
        for co in 0..c_out {
            for to in 0..t_out {
                for ho in 0..h_out {
                    for wo in 0..w_out {
                        let mut acc = bd.as_ref().map_or(0.0, |bb| bb[co] as f64);
                        for ci in 0..c_in {
                            for dt in 0..kt {
                                let ti = (to * stride[0] + dt) as isize - pad[0] as isize;
                                if ti < 0 || ti >= t as isize {
                                    continue;
                                }
                                for dh in 0..kh {
                                    let hi = (ho * stride[1] + dh) as isize - pad[1] as isize;
                                    if hi < 0 || hi >= h as isize {
                                        continue;
                                    }
                                    let xbase = ((ci * t + ti as usize) * h + hi as usize) * w;
                                    let kbase = (((co * c_in + ci) * kt + dt) * kh + dh) * kw;
                                    for dw in 0..kw {
                                        let wi =
                                            (wo * stride[2] + dw) as isize - pad[2] as isize;
                                        if wi < 0 || wi >= w as isize {
                                            continue;
                                        }
                                        acc += xd[xbase + wi as usize] as f64
                                            * kd[kbase + dw] as f64;
                                    }
                                }
                            }
                        }
                        data[((co * t_out + to) * h_out + ho) * w_out + wo] = acc as f32;
                    }
                }
            }
        }
        let out = Tensor::new(vec![c_out, t_out, h_out, w_out], data)?;
        let rg = self.requires(x) || self.requires(k) || b.is_some_and(|bid| self.requires(bid));
        self.push("conv3d", out, Op::Conv3d { x, k, b, stride, pad }, rg)
    }

    /// Per-channel temporal convolution with same padding.
    /// `x: [t, d]`, `k: [d, ks]` (ks odd), optional `b: [d]`.
    pub fn dwconv1d(&mut self, x: NodeId, k: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (vx, vk) = (self.value(x), self.value(k));
        if vx.rank() != 2 || vk.rank() != 2 {
            return Err(Error::shape("dwconv1d", 0, "x must be [t, d], k must be [d, ks]".to_string()));
        }
        let (t, d) = (vx.shape()[0], vx.shape()[1]);
        let (dk, ks) = (vk.shape()[0], vk.shape()[1]);
        if dk != d {
            return Err(Error::shape(
                "dwconv1d",
                1,
                format!("kernel channels {dk} != input channels {d}"),
            ));
        }
        if ks % 2 == 0 {
            return Err(Error::Config(format!("dwconv1d: kernel size {ks} must be odd")));
        }
        let pad = (ks - 1) / 2;
        let xd = vx.data();
        let kd = vk.data();
        let bd = b.map(|bid| self.value(bid).data().to_vec());
        let mut data = vec![0f32; t * d];
        for ti in 0..t {
            for c in 0..d {
                let mut acc = bd.as_ref().map_or(0.0, |bb| bb[c] as f64);
                for j in 0..ks {
                    let src = ti as isize + j as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    acc += xd[src as usize * d + c] as f64 * kd[c * ks + j] as f64;
                }
                data[ti * d + c] = acc as f32;
            }
        }
        let out = Tensor::new(vec![t, d], data)?;
        let rg = self.requires(x) || self.requires(k) || b.is_some_and(|bid| self.requires(bid));
        self.push("dwconv1d", out, Op::DwConv1d { x, k, b }, rg)
    }

    /// 2x2 stride-2 max pooling over the two trailing spatial axes of
    /// `[c, t, h, w]`; floor semantics for odd sizes.
    pub fn max_pool_hw(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 4 {
            return Err(Error::shape("max_pool_hw", 0, "input must be [c, t, h, w]".to_string()));
        }
        let [c, t, h, w] = [v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]];
        let (h2, w2) = (h / 2, w / 2);
        if h2 == 0 || w2 == 0 {
            return Err(Error::shape(
                "max_pool_hw",
                if h2 == 0 { 2 } else { 3 },
                format!("spatial size {h}x{w} too small to pool"),
            ));
        }
        let xd = v.data();
        let mut data = vec![0f32; c * t * h2 * w2];
        let mut argmax = vec![0usize; c * t * h2 * w2];
        for ci in 0..c {
            for ti in 0..t {
                for ho in 0..h2 {
                    for wo in 0..w2 {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dh in 0..2 {
                            for dw in 0..2 {
                                let idx = ((ci * t + ti) * h + (ho * 2 + dh)) * w + (wo * 2 + dw);
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let oidx = ((ci * t + ti) * h2 + ho) * w2 + wo;
                        data[oidx] = best;
                        argmax[oidx] = best_idx;
                    }
                }
            }
        }
        let out = Tensor::new(vec![c, t, h2, w2], data)?;
        let rg = self.requires(x);
        self.push("max_pool_hw", out, Op::MaxPoolHw { x, argmax }, rg)
    }

    /// Mean over the two trailing spatial axes: `[c, t, h, w] -> [c, t]`.
    pub fn mean_hw(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 4 {
            return Err(Error::shape("mean_hw", 0, "input must be [c, t, h, w]".to_string()));
        }
        let [c, t, h, w] = [v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]];
        let xd = v.data();
        let hw = h * w;
        let mut data = vec![0f32; c * t];
        for ci in 0..c {
            for ti in 0..t {
                let base = (ci * t + ti) * hw;
                let mut acc = 0f64;
                for i in 0..hw {
                    acc += xd[base + i] as f64;
                }
                data[ci * t + ti] = (acc / hw as f64) as f32;
            }
        }
        let out = Tensor::new(vec![c, t], data)?;
        let rg = self.requires(x);
        self.push("mean_hw", out, Op::MeanHw(x), rg)
    }

    // ── Normalization ───────────────────────────────────────────────────

    /// Zero-mean/unit-variance over the last axis, then affine.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f32) -> Result<NodeId> {
        let v = self.value(x);
        let d = v.last_dim();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                v.rank() - 1,
                format!("gamma/beta must be [{d}]"),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm: eps must be > 0".to_string()));
        }
        let rows = v.leading();
        let xd = v.data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut data = vec![0f32; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps as f64).sqrt();
            for i in 0..d {
                let xhat = (row[i] as f64 - mean) * inv;
                data[r * d + i] = (xhat * gd[i] as f64 + bd[i] as f64) as f32;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push("layer_norm", out, Op::LayerNorm { x, gamma, beta, eps }, rg)
    }

    /// Per-channel normalization over all of `(t, h, w)` within one sample;
    /// `x: [c, t, h, w]`, `gamma`/`beta`: `[c]`. Batch-free by construction.
    pub fn channel_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f32) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 4 {
            return Err(Error::shape("channel_norm", 0, "input must be [c, t, h, w]".to_string()));
        }
        let c = v.shape()[0];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("channel_norm", 0, format!("gamma/beta must be [{c}]")));
        }
        let n = v.numel() / c;
        let xd = v.data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut data = vec![0f32; v.numel()];
        for ci in 0..c {
            let chan = &xd[ci * n..(ci + 1) * n];
            let (mean, var) = mean_var(chan);
            let inv = 1.0 / (var + eps as f64).sqrt();
            for i in 0..n {
                let xhat = (chan[i] as f64 - mean) * inv;
                data[ci * n + i] = (xhat * gd[ci] as f64 + bd[ci] as f64) as f32;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push("channel_norm", out, Op::ChannelNorm { x, gamma, beta, eps }, rg)
    }

    // ── Softmax family ──────────────────────────────────────────────────

    /// Softmax over the last axis with max-subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let d = v.last_dim();
        let rows = v.leading();
        let xd = v.data();
        let mut data = vec![0f32; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0f64;
            let mut exps = vec![0f64; d];
            for i in 0..d {
                let e = ((row[i] - max) as f64).exp();
                exps[i] = e;
                denom += e;
            }
            for i in 0..d {
                data[r * d + i] = (exps[i] / denom) as f32;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires(x);
        self.push("softmax", out, Op::Softmax(x), rg)
    }

    /// Log-softmax over the last axis; rows log-sum-exp to 0.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let d = v.last_dim();
        let rows = v.leading();
        let xd = v.data();
        let mut data = vec![0f32; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0f64;
            for i in 0..d {
                denom += ((row[i] - max) as f64).exp();
            }
            let log_denom = denom.ln();
            for i in 0..d {
                data[r * d + i] = ((row[i] - max) as f64 - log_denom) as f32;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires(x);
        self.push("log_softmax", out, Op::LogSoftmax(x), rg)
    }

    // ── Embedding ───────────────────────────────────────────────────────

    /// Row lookup: `table: [v, d]`, `ids` of length `l` -> `[l, d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let v = self.value(table);
        if v.rank() != 2 {
            return Err(Error::shape("embedding", 0, "table must be [v, d]".to_string()));
        }
        let (vocab, d) = (v.shape()[0], v.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Data("embedding: empty id sequence".to_string()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Data(format!(
                "embedding: token id {bad} out of range (vocab {vocab})"
            )));
        }
        let td = v.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.requires(table);
        self.push(
            "embedding",
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let mut acc = 0f64;
        for &a in v.data() {
            acc += a as f64;
        }
        let rg = self.requires(x);
        self.push_scalar("sum_all", acc, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let n = v.numel();
        let mut acc = 0f64;
        for &a in v.data() {
            acc += a as f64;
        }
        let rg = self.requires(x);
        self.push_scalar("mean_all", acc / n as f64, Op::MeanAll(x), rg)
    }

    // ── Losses ──────────────────────────────────────────────────────────

    /// CTC negative log-likelihood from per-frame log-probabilities
    /// `logp: [t, v]`. Labels must not contain the blank id. Returns
    /// [`CtcOutcome::Infeasible`] when no alignment exists.
    pub fn ctc_loss(&mut self, logp: NodeId, label: &[usize], blank: usize) -> Result<CtcOutcome> {
        let v = self.value(logp);
        if v.rank() != 2 {
            return Err(Error::shape("ctc_loss", 0, "log-probs must be [t, v]".to_string()));
        }
        let vocab = v.shape()[1];
        if blank >= vocab {
            return Err(Error::Config(format!("ctc_loss: blank id {blank} out of range")));
        }
        if label.iter().any(|&l| l == blank) {
            return Err(Error::Data("ctc_loss: label contains blank".to_string()));
        }
        if let Some(&bad) = label.iter().find(|&&l| l >= vocab) {
            return Err(Error::Data(format!("ctc_loss: label id {bad} out of range")));
        }
        let nll = ctc_forward_nll(v, label, blank);
        if !nll.is_finite() {
            return Ok(CtcOutcome::Infeasible);
        }
        let rg = self.requires(logp);
        let id = self.push_scalar(
            "ctc_loss",
            nll,
            Op::CtcLoss {
                logp,
                label: label.to_vec(),
                blank,
            },
            rg,
        )?;
        Ok(CtcOutcome::Feasible(id))
    }

    /// Label-smoothed cross entropy from log-probabilities `logp: [l, v]`,
    /// averaged over positions.
    pub fn ce_loss(&mut self, logp: NodeId, targets: &[usize], eps: f32) -> Result<NodeId> {
        let v = self.value(logp);
        if v.rank() != 2 {
            return Err(Error::shape("ce_loss", 0, "log-probs must be [l, v]".to_string()));
        }
        let (l, vocab) = (v.shape()[0], v.shape()[1]);
        if targets.len() != l {
            return Err(Error::shape(
                "ce_loss",
                0,
                format!("{} targets for {l} positions", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Data(format!("ce_loss: target id {bad} out of range")));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Config(format!("ce_loss: label smoothing {eps} outside [0, 1)")));
        }
        let d = v.data();
        let uniform = eps as f64 / vocab as f64;
        let mut acc = 0f64;
        for (pos, &tgt) in targets.iter().enumerate() {
            let row = &d[pos * vocab..(pos + 1) * vocab];
            let mut row_sum = 0f64;
            for &lp in row {
                row_sum += lp as f64;
            }
            acc -= (1.0 - eps as f64) * row[tgt] as f64 + uniform * row_sum;
        }
        let loss = acc / l as f64;
        let rg = self.requires(logp);
        self.push_scalar(
            "ce_loss",
            loss,
            Op::CeLoss {
                logp,
                targets: targets.to_vec(),
                eps,
            },
            rg,
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively;
    /// leaves never reached report zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Config(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate_parents(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|buf| {
                    Tensor::new(shapes[i].clone(), buf.iter().map(|&x| x as f32).collect())
                        .expect("gradient shape")
                })
            })
            .collect();
        Ok(Gradients { grads: out, shapes })
    }

    fn add_to(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: NodeId,
        contribution: &[f64],
    ) {
        if !self.requires(target) {
            return;
        }
        let slot = &mut grads[target.0];
        match slot {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => {
                *slot = Some(contribution.to_vec());
            }
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate_parents(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_to(grads, *a, g);
                self.add_to(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires(*a) {
                    let da: Vec<f64> = g.iter().zip(vb).map(|(gg, y)| gg * *y as f64).collect();
                    self.add_to(grads, *a, &da);
                }
                if self.requires(*b) {
                    let db: Vec<f64> = g.iter().zip(va).map(|(gg, x)| gg * *x as f64).collect();
                    self.add_to(grads, *b, &db);
                }
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|gg| gg * *c as f64).collect();
                self.add_to(grads, *x, &dx);
            }
            Op::Linear { x, w, b } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (d_out, d_in) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.leading();
                let xd = vx.data();
                let wd = vw.data();
                if self.requires(*x) {
                    let mut dx = vec![0f64; rows * d_in];
                    for m in 0..rows {
                        for o in 0..d_out {
                            let gv = g[m * d_out + o];
                            for i in 0..d_in {
                                dx[m * d_in + i] += gv * wd[o * d_in + i] as f64;
                            }
                        }
                    }
                    self.add_to(grads, *x, &dx);
                }
                if self.requires(*w) {
                    let mut dw = vec![0f64; d_out * d_in];
                    for m in 0..rows {
                        for o in 0..d_out {
                            let gv = g[m * d_out + o];
                            for i in 0..d_in {
                                dw[o * d_in + i] += gv * xd[m * d_in + i] as f64;
                            }
                        }
                    }
                    self.add_to(grads, *w, &dw);
                }
                if let Some(bid) = b {
                    if self.requires(*bid) {
                        let mut db = vec![0f64; d_out];
                        for m in 0..rows {
                            for o in 0..d_out {
                                db[o] += g[m * d_out + o];
                            }
                        }
                        self.add_to(grads, *bid, &db);
                    }
                }
            }
            Op::Matmul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let (ad, bd) = (va.data(), vb.data());
                if self.requires(*a) {
                    let mut da = vec![0f64; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0f64;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j] as f64;
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    self.add_to(grads, *a, &da);
                }
                if self.requires(*b) {
                    let mut db = vec![0f64; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0f64;
                            for i in 0..m {
                                acc += ad[i * k + p] as f64 * g[i * n + j];
                            }
                            db[p * n + j] = acc;
                        }
                    }
                    self.add_to(grads, *b, &db);
                }
            }
            Op::Transpose(x) => {
                let v = self.value(*x);
                let (r, c) = (v.shape()[0], v.shape()[1]);
                let mut dx = vec![0f64; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                self.add_to(grads, *x, &dx);
            }
            Op::Conv3d { x, k, b, stride, pad } => {
                let vx = self.value(*x);
                let vk = self.value(*k);
                let [c_in, t, h, w] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
                let [c_out, _, kt, kh, kw] = [
                    vk.shape()[0],
                    vk.shape()[1],
                    vk.shape()[2],
                    vk.shape()[3],
                    vk.shape()[4],
                ];
                let t_out = (t + 2 * pad[0] - kt) / stride[0] + 1;
                let h_out = (h + 2 * pad[1] - kh) / stride[1] + 1;
                let w_out = (w + 2 * pad[2] - kw) / stride[2] + 1;
                let xd = vx.data();
                let kd = vk.data();
                let need_dx = self.requires(*x);
                let need_dk = self.requires(*k);
                let mut dx = if need_dx { vec![0f64; xd.len()] } else { Vec::new() };
                let mut dk = if need_dk { vec![0f64; kd.len()] } else { Vec::new() };
                for co in 0..c_out {
                    for to in 0..t_out {
                        for ho in 0..h_out {
                            for wo in 0..w_out {
                                let gv = g[((co * t_out + to) * h_out + ho) * w_out + wo];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ci in 0..c_in {
                                    for dt in 0..kt {
                                        let ti = (to * stride[0] + dt) as isize - pad[0] as isize;
                                        if ti < 0 || ti >= t as isize {
                                            continue;
                                        }
                                        for dh in 0..kh {
                                            let hi = (ho * stride[1] + dh) as isize
                                                - pad[1] as isize;
                                            if hi < 0 || hi >= h as isize {
                                                continue;
                                            }
                                            let xbase = ((ci * t + ti as usize) * h
                                                + hi as usize)
                                                * w;
                                            let kbase =
                                                (((co * c_in + ci) * kt + dt) * kh + dh) * kw;
                                            for dw_ in 0..kw {
                                                let wi = (wo * stride[2] + dw_) as isize
                                                    - pad[2] as isize;
                                                if wi < 0 || wi >= w as isize {
                                                    continue;
                                                }
                                                if need_dx {
                                                    dx[xbase + wi as usize] +=
                                                        gv * kd[kbase + dw_] as f64;
                                                }
                                                if need_dk {
                                                    dk[kbase + dw_] +=
                                                        gv * xd[xbase + wi as usize] as f64;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_dx {
                    self.add_to(grads, *x, &dx);
                }
                if need_dk {
                    self.add_to(grads, *k, &dk);
                }
                if let Some(bid) = b {
                    if self.requires(*bid) {
                        let per = t_out * h_out * w_out;
                        let mut db = vec![0f64; c_out];
                        for co in 0..c_out {
                            for i in 0..per {
                                db[co] += g[co * per + i];
                            }
                        }
                        self.add_to(grads, *bid, &db);
                    }
                }
            }
            Op::DwConv1d { x, k, b } => {
                let vx = self.value(*x);
                let vk = self.value(*k);
                let (t, d) = (vx.shape()[0], vx.shape()[1]);
                let ks = vk.shape()[1];
                let pad = (ks - 1) / 2;
                let xd = vx.data();
                let kd = vk.data();
                let mut dx = vec![0f64; t * d];
                let mut dk = vec![0f64; d * ks];
                for ti in 0..t {
                    for c in 0..d {
                        let gv = g[ti * d + c];
                        if gv == 0.0 {
                            continue;
                        }
                        for j in 0..ks {
                            let src = ti as isize + j as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            dx[src as usize * d + c] += gv * kd[c * ks + j] as f64;
                            dk[c * ks + j] += gv * xd[src as usize * d + c] as f64;
                        }
                    }
                }
                self.add_to(grads, *x, &dx);
                self.add_to(grads, *k, &dk);
                if let Some(bid) = b {
                    if self.requires(*bid) {
                        let mut db = vec![0f64; d];
                        for ti in 0..t {
                            for c in 0..d {
                                db[c] += g[ti * d + c];
                            }
                        }
                        self.add_to(grads, *bid, &db);
                    }
                }
            }
            Op::MaxPoolHw { x, argmax } => {
                let mut dx = vec![0f64; self.value(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                self.add_to(grads, *x, &dx);
            }
            Op::MeanHw(x) => {
                let v = self.value(*x);
                let [c, t, h, w] = [v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]];
                let hw = (h * w) as f64;
                let mut dx = vec![0f64; v.numel()];
                for ci in 0..c {
                    for ti in 0..t {
                        let gv = g[ci * t + ti] / hw;
                        let base = (ci * t + ti) * h * w;
                        for i in 0..h * w {
                            dx[base + i] = gv;
                        }
                    }
                }
                self.add_to(grads, *x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let v = self.value(*x);
                let d = v.last_dim();
                let rows = v.leading();
                let xd = v.data();
                let gd = self.value(*gamma).data();
                let mut dx = vec![0f64; rows * d];
                let mut dgamma = vec![0f64; d];
                let mut dbeta = vec![0f64; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    norm_backward(row, grow, gd, *eps as f64, &mut dx[r * d..(r + 1) * d], &mut dgamma, &mut dbeta, false);
                }
                self.add_to(grads, *x, &dx);
                self.add_to(grads, *gamma, &dgamma);
                self.add_to(grads, *beta, &dbeta);
            }
            Op::ChannelNorm { x, gamma, beta, eps } => {
                let v = self.value(*x);
                let c = v.shape()[0];
                let n = v.numel() / c;
                let xd = v.data();
                let gd = self.value(*gamma).data();
                let mut dx = vec![0f64; v.numel()];
                let mut dgamma = vec![0f64; c];
                let mut dbeta = vec![0f64; c];
                for ci in 0..c {
                    let chan = &xd[ci * n..(ci + 1) * n];
                    let gchan = &g[ci * n..(ci + 1) * n];
                    let mut dg1 = vec![0f64; 1];
                    let mut db1 = vec![0f64; 1];
                    norm_backward(
                        chan,
                        gchan,
                        &[gd[ci]],
                        *eps as f64,
                        &mut dx[ci * n..(ci + 1) * n],
                        &mut dg1,
                        &mut db1,
                        true,
                    );
                    dgamma[ci] += dg1[0];
                    dbeta[ci] += db1[0];
                }
                self.add_to(grads, *x, &dx);
                self.add_to(grads, *gamma, &dgamma);
                self.add_to(grads, *beta, &dbeta);
            }
            Op::Softmax(x) => {
                let y = self.nodes[idx].value.data();
                let d = self.nodes[idx].value.last_dim();
                let rows = self.nodes[idx].value.leading();
                let mut dx = vec![0f64; y.len()];
                for r in 0..rows {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = 0f64;
                    for i in 0..d {
                        dot += gr[i] * yr[i] as f64;
                    }
                    for i in 0..d {
                        dx[r * d + i] = yr[i] as f64 * (gr[i] - dot);
                    }
                }
                self.add_to(grads, *x, &dx);
            }
            Op::LogSoftmax(x) => {
                let y = self.nodes[idx].value.data();
                let d = self.nodes[idx].value.last_dim();
                let rows = self.nodes[idx].value.leading();
                let mut dx = vec![0f64; y.len()];
                for r in 0..rows {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut gsum = 0f64;
                    for i in 0..d {
                        gsum += gr[i];
                    }
                    for i in 0..d {
                        dx[r * d + i] = gr[i] - (yr[i] as f64).exp() * gsum;
                    }
                }
                self.add_to(grads, *x, &dx);
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd)
                    .map(|(gg, &xv)| if xv > 0.0 { *gg } else { 0.0 })
                    .collect();
                self.add_to(grads, *x, &dx);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(y)
                    .map(|(gg, &s)| gg * s as f64 * (1.0 - s as f64))
                    .collect();
                self.add_to(grads, *x, &dx);
            }
            Op::Swish(x) => {
                let xd = self.value(*x).data();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd)
                    .map(|(gg, &xv)| {
                        let s = sigmoid_f(xv) as f64;
                        gg * (s + xv as f64 * s * (1.0 - s))
                    })
                    .collect();
                self.add_to(grads, *x, &dx);
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xd)
                    .map(|(gg, &xv)| {
                        let xf = xv as f64;
                        let inner = c * (xf + 0.044715 * xf.powi(3));
                        let th = inner.tanh();
                        let sech2 = 1.0 - th * th;
                        let dinner = c * (1.0 + 3.0 * 0.044715 * xf * xf);
                        gg * (0.5 * (1.0 + th) + 0.5 * xf * sech2 * dinner)
                    })
                    .collect();
                self.add_to(grads, *x, &dx);
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                let mut dt = vec![0f64; self.value(*table).numel()];
                for (l, &id) in ids.iter().enumerate() {
                    for i in 0..d {
                        dt[id * d + i] += g[l * d + i];
                    }
                }
                self.add_to(grads, *table, &dt);
            }
            Op::ConcatLast(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (da, db_) = (va.last_dim(), vb.last_dim());
                let rows = va.leading();
                if self.requires(*a) {
                    let mut da_buf = vec![0f64; va.numel()];
                    for r in 0..rows {
                        for i in 0..da {
                            da_buf[r * da + i] = g[r * (da + db_) + i];
                        }
                    }
                    self.add_to(grads, *a, &da_buf);
                }
                if self.requires(*b) {
                    let mut db_buf = vec![0f64; vb.numel()];
                    for r in 0..rows {
                        for i in 0..db_ {
                            db_buf[r * db_ + i] = g[r * (da + db_) + da + i];
                        }
                    }
                    self.add_to(grads, *b, &db_buf);
                }
            }
            Op::SliceLast { x, start, len } => {
                let v = self.value(*x);
                let d = v.last_dim();
                let rows = v.leading();
                let mut dx = vec![0f64; v.numel()];
                for r in 0..rows {
                    for i in 0..*len {
                        dx[r * d + start + i] = g[r * len + i];
                    }
                }
                self.add_to(grads, *x, &dx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                let dx = vec![g[0]; n];
                self.add_to(grads, *x, &dx);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                let dx = vec![g[0] / n as f64; n];
                self.add_to(grads, *x, &dx);
            }
            Op::CtcLoss { logp, label, blank } => {
                let dlogp = ctc_backward(self.value(*logp), label, *blank);
                let dx: Vec<f64> = dlogp.iter().map(|d| d * g[0]).collect();
                self.add_to(grads, *logp, &dx);
            }
            Op::CeLoss { logp, targets, eps } => {
                let v = self.value(*logp);
                let (l, vocab) = (v.shape()[0], v.shape()[1]);
                let uniform = *eps as f64 / vocab as f64;
                let mut dx = vec![0f64; l * vocab];
                for (pos, &tgt) in targets.iter().enumerate() {
                    for vv in 0..vocab {
                        let q = uniform + if vv == tgt { 1.0 - *eps as f64 } else { 0.0 };
                        dx[pos * vocab + vv] = -q / l as f64 * g[0];
                    }
                }
                self.add_to(grads, *logp, &dx);
            }
        }
        Ok(())
    }
}

fn first_mismatch(a: &[usize], b: &[usize]) -> usize {
    if a.len() != b.len() {
        return 0;
    }
    a.iter().zip(b).position(|(x, y)| x != y).unwrap_or(0)
}

fn sigmoid_f(x: f32) -> f32 {
    (1.0 / (1.0 + (-x as f64).exp())) as f32
}

fn gelu_f(x: f32) -> f32 {
    let xf = x as f64;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * xf * (1.0 + (c * (xf + 0.044715 * xf.powi(3))).tanh())) as f32
}

fn mean_var(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let mut mean = 0f64;
    for &x in row {
        mean += x as f64;
    }
    mean /= n;
    let mut var = 0f64;
    for &x in row {
        let d = x as f64 - mean;
        var += d * d;
    }
    (mean, var / n)
}

/// Shared backward for layer/channel norm over one normalization group.
/// `scalar_gamma` means gamma/beta are single values for the whole group.
#[allow(clippy::too_many_arguments)]
fn norm_backward(
    x: &[f32],
    g: &[f64],
    gamma: &[f32],
    eps: f64,
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    scalar_gamma: bool,
) {
    let n = x.len();
    let nf = n as f64;
    let (mean, var) = mean_var(x);
    let inv = 1.0 / (var + eps).sqrt();
    let mut dxhat = vec![0f64; n];
    let mut dxhat_sum = 0f64;
    let mut dxhat_xhat_sum = 0f64;
    for i in 0..n {
        let xhat = (x[i] as f64 - mean) * inv;
        let gm = if scalar_gamma { gamma[0] } else { gamma[i] } as f64;
        dxhat[i] = g[i] * gm;
        dxhat_sum += dxhat[i];
        dxhat_xhat_sum += dxhat[i] * xhat;
        if scalar_gamma {
            dgamma[0] += g[i] * xhat;
            dbeta[0] += g[i];
        } else {
            dgamma[i] += g[i] * xhat;
            dbeta[i] += g[i];
        }
    }
    for i in 0..n {
        let xhat = (x[i] as f64 - mean) * inv;
        dx[i] += inv / nf * (nf * dxhat[i] - dxhat_sum - xhat * dxhat_xhat_sum);
    }
}

// ── CTC forward/backward in f64 log space ───────────────────────────────

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Blank-interleaved expansion of a label: `[b, l1, b, l2, ..., b]`.
fn expand_label(label: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(blank);
    for &l in label {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

fn ctc_alphas(logp: &Tensor, ext: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let (t, v) = (logp.shape()[0], logp.shape()[1]);
    let s = ext.len();
    let d = logp.data();
    let lp = |ti: usize, tok: usize| d[ti * v + tok] as f64;
    let mut alpha = vec![vec![f64::NEG_INFINITY; s]; t];
    alpha[0][0] = lp(0, ext[0]);
    if s > 1 {
        alpha[0][1] = lp(0, ext[1]);
    }
    for ti in 1..t {
        for si in 0..s {
            let stay = alpha[ti - 1][si];
            let step = if si >= 1 { alpha[ti - 1][si - 1] } else { f64::NEG_INFINITY };
            let skip = if si >= 2 && ext[si] != blank && ext[si] != ext[si - 2] {
                alpha[ti - 1][si - 2]
            } else {
                f64::NEG_INFINITY
            };
            let prev = lse3(stay, step, skip);
            if prev != f64::NEG_INFINITY {
                alpha[ti][si] = prev + lp(ti, ext[si]);
            }
        }
    }
    alpha
}

fn ctc_betas(logp: &Tensor, ext: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let (t, v) = (logp.shape()[0], logp.shape()[1]);
    let s = ext.len();
    let d = logp.data();
    let lp = |ti: usize, tok: usize| d[ti * v + tok] as f64;
    let mut beta = vec![vec![f64::NEG_INFINITY; s]; t];
    beta[t - 1][s - 1] = lp(t - 1, ext[s - 1]);
    if s > 1 {
        beta[t - 1][s - 2] = lp(t - 1, ext[s - 2]);
    }
    for ti in (0..t - 1).rev() {
        for si in 0..s {
            let stay = beta[ti + 1][si];
            let step = if si + 1 < s { beta[ti + 1][si + 1] } else { f64::NEG_INFINITY };
            let skip = if si + 2 < s && ext[si + 2] != blank && ext[si + 2] != ext[si] {
                beta[ti + 1][si + 2]
            } else {
                f64::NEG_INFINITY
            };
            let next = lse3(stay, step, skip);
            if next != f64::NEG_INFINITY {
                beta[ti][si] = next + lp(ti, ext[si]);
            }
        }
    }
    beta
}

/// Forward-algorithm negative log likelihood; `+inf` when infeasible.
pub(crate) fn ctc_forward_nll(logp: &Tensor, label: &[usize], blank: usize) -> f64 {
    let ext = expand_label(label, blank);
    let t = logp.shape()[0];
    let s = ext.len();
    let alpha = ctc_alphas(logp, &ext, blank);
    let total = if s > 1 {
        lse2(alpha[t - 1][s - 1], alpha[t - 1][s - 2])
    } else {
        alpha[t - 1][s - 1]
    };
    -total
}

/// dL/d(logp), L = -log p(label), via alpha/beta occupancy.
fn ctc_backward(logp: &Tensor, label: &[usize], blank: usize) -> Vec<f64> {
    let ext = expand_label(label, blank);
    let (t, v) = (logp.shape()[0], logp.shape()[1]);
    let s = ext.len();
    let alpha = ctc_alphas(logp, &ext, blank);
    let beta = ctc_betas(logp, &ext, blank);
    let log_total = if s > 1 {
        lse2(alpha[t - 1][s - 1], alpha[t - 1][s - 2])
    } else {
        alpha[t - 1][s - 1]
    };
    let d = logp.data();
    let mut grad = vec![0f64; t * v];
    for ti in 0..t {
        // alpha and beta both include the frame-ti emission, so alpha+beta
        // counts it twice; dividing one copy out leaves the total probability
        // of paths passing through the symbol at this frame, which is the
        // derivative of p with respect to the emission log-prob.
        let mut per_tok = vec![f64::NEG_INFINITY; v];
        for si in 0..s {
            let ab = alpha[ti][si] + beta[ti][si];
            if ab != f64::NEG_INFINITY {
                per_tok[ext[si]] = lse2(per_tok[ext[si]], ab);
            }
        }
        for tok in 0..v {
            if per_tok[tok] != f64::NEG_INFINITY {
                let lp = d[ti * v + tok] as f64;
                grad[ti * v + tok] = -((per_tok[tok] - lp - log_total).exp());
            }
        }
    }
    grad
}
