//! Building blocks shared by the frontend, encoders, decoder, and LM:
//! weight containers with their tape bindings, multi-head attention, FFN,
//! sinusoidal positional encodings, and attention masks.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NORM_EPS: f32 = 1e-5;
/// Additive bias for disallowed attention edges; large enough to zero the
/// probability after exp, small enough to stay finite in f32.
pub const MASK_BIAS: f32 = -1.0e9;

/// Records `(name, node)` pairs while model weights are inserted into a tape,
/// so gradients can be routed back to named parameters after `backward`.
pub struct Binder<'t> {
    pub tape: &'t mut Tape,
    names: Vec<(String, NodeId)>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t mut Tape) -> Self {
        Binder { tape, names: Vec::new() }
    }

    pub fn bind(&mut self, name: String, value: &Tensor) -> NodeId {
        let id = self.tape.param(value.clone());
        self.names.push((name, id));
        id
    }

    pub fn into_names(self) -> Vec<(String, NodeId)> {
        self.names
    }
}

pub type VisitFn<'a> = &'a mut dyn FnMut(&str, &Tensor);
pub type VisitMutFn<'a> = &'a mut dyn FnMut(&str, &mut Tensor);

// ── Weight containers ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LinearW {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy)]
pub struct LinearN {
    pub w: NodeId,
    pub b: NodeId,
}

impl LinearW {
    /// Xavier-uniform weight, zero bias.
    pub fn init(d_out: usize, d_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = (6.0 / (d_in + d_out) as f32).sqrt();
        LinearW {
            w: Tensor::rand_uniform(&[d_out, d_in], -s, s, rng),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> LinearN {
        LinearN {
            w: b.bind(format!("{name}.w"), &self.w),
            b: b.bind(format!("{name}.b"), &self.b),
        }
    }

    pub fn visit(&self, name: &str, f: VisitFn) {
        f(&format!("{name}.w"), &self.w);
        f(&format!("{name}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMutFn) {
        f(&format!("{name}.w"), &mut self.w);
        f(&format!("{name}.b"), &mut self.b);
    }
}

pub fn apply_linear(tape: &mut Tape, x: NodeId, lin: &LinearN) -> Result<NodeId> {
    tape.linear(x, lin.w, Some(lin.b))
}

#[derive(Clone, Debug)]
pub struct NormW {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Copy)]
pub struct NormN {
    pub gamma: NodeId,
    pub beta: NodeId,
}

impl NormW {
    pub fn init(d: usize) -> Self {
        NormW {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> NormN {
        NormN {
            gamma: b.bind(format!("{name}.gamma"), &self.gamma),
            beta: b.bind(format!("{name}.beta"), &self.beta),
        }
    }

    pub fn visit(&self, name: &str, f: VisitFn) {
        f(&format!("{name}.gamma"), &self.gamma);
        f(&format!("{name}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMutFn) {
        f(&format!("{name}.gamma"), &mut self.gamma);
        f(&format!("{name}.beta"), &mut self.beta);
    }
}

pub fn apply_norm(tape: &mut Tape, x: NodeId, n: &NormN) -> Result<NodeId> {
    tape.layer_norm(x, n.gamma, n.beta, NORM_EPS)
}

#[derive(Clone, Debug)]
pub struct Conv3dW {
    pub k: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy)]
pub struct Conv3dN {
    pub k: NodeId,
    pub b: NodeId,
}

impl Conv3dW {
    pub fn init(c_out: usize, c_in: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (c_in * kernel * kernel * kernel) as f32;
        let s = (6.0 / fan_in).sqrt();
        Conv3dW {
            k: Tensor::rand_uniform(&[c_out, c_in, kernel, kernel, kernel], -s, s, rng),
            b: Tensor::zeros(&[c_out]),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> Conv3dN {
        Conv3dN {
            k: b.bind(format!("{name}.k"), &self.k),
            b: b.bind(format!("{name}.b"), &self.b),
        }
    }

    pub fn visit(&self, name: &str, f: VisitFn) {
        f(&format!("{name}.k"), &self.k);
        f(&format!("{name}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMutFn) {
        f(&format!("{name}.k"), &mut self.k);
        f(&format!("{name}.b"), &mut self.b);
    }
}

#[derive(Clone, Debug)]
pub struct DwConvW {
    pub k: Tensor,
    pub b: Tensor,
}

#[derive(Clone, Copy)]
pub struct DwConvN {
    pub k: NodeId,
    pub b: NodeId,
}

impl DwConvW {
    pub fn init(d: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = (6.0 / kernel as f32).sqrt();
        DwConvW {
            k: Tensor::rand_uniform(&[d, kernel], -s, s, rng),
            b: Tensor::zeros(&[d]),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> DwConvN {
        DwConvN {
            k: b.bind(format!("{name}.k"), &self.k),
            b: b.bind(format!("{name}.b"), &self.b),
        }
    }

    pub fn visit(&self, name: &str, f: VisitFn) {
        f(&format!("{name}.k"), &self.k);
        f(&format!("{name}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMutFn) {
        f(&format!("{name}.k"), &mut self.k);
        f(&format!("{name}.b"), &mut self.b);
    }
}

#[derive(Clone, Debug)]
pub struct AttnW {
    pub q: LinearW,
    pub k: LinearW,
    pub v: LinearW,
    pub o: LinearW,
}

#[derive(Clone, Copy)]
pub struct AttnN {
    pub q: LinearN,
    pub k: LinearN,
    pub v: LinearN,
    pub o: LinearN,
}

impl AttnW {
    pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        AttnW {
            q: LinearW::init(d, d, rng),
            k: LinearW::init(d, d, rng),
            v: LinearW::init(d, d, rng),
            o: LinearW::init(d, d, rng),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> AttnN {
        AttnN {
            q: self.q.bind(b, &format!("{name}.q")),
            k: self.k.bind(b, &format!("{name}.k")),
            v: self.v.bind(b, &format!("{name}.v")),
            o: self.o.bind(b, &format!("{name}.o")),
        }
    }

    pub fn visit(&self, name: &str, f: VisitFn) {
        self.q.visit(&format!("{name}.q"), f);
        self.k.visit(&format!("{name}.k"), f);
        self.v.visit(&format!("{name}.v"), f);
        self.o.visit(&format!("{name}.o"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMutFn) {
        self.q.visit_mut(&format!("{name}.q"), f);
        self.k.visit_mut(&format!("{name}.k"), f);
        self.v.visit_mut(&format!("{name}.v"), f);
        self.o.visit_mut(&format!("{name}.o"), f);
    }
}

#[derive(Clone, Debug)]
pub struct FfnW {
    pub lin1: LinearW,
    pub lin2: LinearW,
}

#[derive(Clone, Copy)]
pub struct FfnN {
    pub lin1: LinearN,
    pub lin2: LinearN,
}

impl FfnW {
    pub fn init(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FfnW {
            lin1: LinearW::init(hidden, d, rng),
            lin2: LinearW::init(d, hidden, rng),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> FfnN {
        FfnN {
            lin1: self.lin1.bind(b, &format!("{name}.lin1")),
            lin2: self.lin2.bind(b, &format!("{name}.lin2")),
        }
    }

    pub fn visit(&self, name: &str, f: VisitFn) {
        self.lin1.visit(&format!("{name}.lin1"), f);
        self.lin2.visit(&format!("{name}.lin2"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMutFn) {
        self.lin1.visit_mut(&format!("{name}.lin1"), f);
        self.lin2.visit_mut(&format!("{name}.lin2"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Swish,
}

pub fn apply_activation(tape: &mut Tape, x: NodeId, act: Activation) -> Result<NodeId> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Gelu => tape.gelu(x),
        Activation::Swish => tape.swish(x),
    }
}

pub fn apply_ffn(tape: &mut Tape, x: NodeId, ffn: &FfnN, act: Activation) -> Result<NodeId> {
    let h = apply_linear(tape, x, &ffn.lin1)?;
    let h = apply_activation(tape, h, act)?;
    apply_linear(tape, h, &ffn.lin2)
}

// ── Attention ───────────────────────────────────────────────────────────

/// Boolean attention mask (`true` = attend allowed), stored as an additive
/// bias over scores.
#[derive(Clone, Debug)]
pub struct AttnMask {
    bias: Tensor,
}

impl AttnMask {
    pub fn from_bool(t_q: usize, t_k: usize, allowed: &[bool]) -> Result<Self> {
        if allowed.len() != t_q * t_k {
            return Err(Error::shape("attn_mask", 0, format!("mask needs {} entries", t_q * t_k)));
        }
        let data = allowed.iter().map(|&a| if a { 0.0 } else { MASK_BIAS }).collect();
        Ok(AttnMask { bias: Tensor::new(vec![t_q, t_k], data)? })
    }

    /// Strict causal visibility: position `i` sees positions `<= i`.
    pub fn causal(t: usize) -> Self {
        let mut data = vec![MASK_BIAS; t * t];
        for i in 0..t {
            for j in 0..=i {
                data[i * t + j] = 0.0;
            }
        }
        AttnMask { bias: Tensor::new(vec![t, t], data).expect("causal mask shape") }
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

/// Scaled dot-product multi-head attention with per-head slicing of the
/// projected features and a final output projection. `q_in` is `[t_q, d]`,
/// `kv_in` is `[t_k, d]`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: NodeId,
    kv_in: NodeId,
    w: &AttnN,
    heads: usize,
    mask: Option<&AttnMask>,
) -> Result<NodeId> {
    let d = tape.value(q_in).last_dim();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "attention: d_model {d} not divisible by heads {heads}"
        )));
    }
    let dh = d / heads;
    let q = apply_linear(tape, q_in, &w.q)?;
    let k = apply_linear(tape, kv_in, &w.k)?;
    let v = apply_linear(tape, kv_in, &w.v)?;
    let scale = 1.0 / (dh as f32).sqrt();
    let mask_node = mask.map(|m| tape.leaf(m.bias().clone()));
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_last(q, h * dh, dh)?;
        let kh = tape.slice_last(k, h * dh, dh)?;
        let vh = tape.slice_last(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let scores = match mask_node {
            Some(m) => tape.add(scores, m)?,
            None => scores,
        };
        let attn = tape.softmax(scores)?;
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let mut cat = head_outs[0];
    for &h in &head_outs[1..] {
        cat = tape.concat_last(cat, h)?;
    }
    apply_linear(tape, cat, &w.o)
}

// ── Positional encoding ─────────────────────────────────────────────────

/// Absolute sinusoidal encodings, interleaved sin/cos:
/// `pe[pos, 2i] = sin(pos / 10000^(2i/d))`, `pe[pos, 2i+1] = cos(...)`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0f32; t * d];
    for pos in 0..t {
        for i in 0..d {
            let exponent = 2.0 * (i / 2) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    Tensor::new(vec![t, d], data).expect("positional encoding shape")
}

// ── Dropout ─────────────────────────────────────────────────────────────

/// Forward context: inference uses no dropout; training may carry a rate and
/// an RNG. Masks are sampled per call, scaled by `1/(1-p)`.
pub struct FwdCtx<'r> {
    pub dropout: f32,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl FwdCtx<'_> {
    pub fn inference() -> FwdCtx<'static> {
        FwdCtx { dropout: 0.0, rng: None }
    }
}

pub fn apply_dropout(tape: &mut Tape, x: NodeId, ctx: &mut FwdCtx) -> Result<NodeId> {
    let p = ctx.dropout;
    if p <= 0.0 {
        return Ok(x);
    }
    let Some(rng) = ctx.rng.as_deref_mut() else {
        return Ok(x);
    };
    let keep = 1.0 / (1.0 - p);
    let shape = tape.value(x).shape().to_vec();
    let numel = tape.value(x).numel();
    let mask: Vec<f32> = (0..numel)
        .map(|_| if rng.gen_range(0.0f32..1.0) < p { 0.0 } else { keep })
        .collect();
    let m = tape.leaf(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}
