//! Decoder-only Transformer language model for shallow fusion.
//!
//! Two forward paths share the same weights and the same floating-point
//! conventions, rounding at identical points:
//! - a tape path used for training;
//! - an incremental path with per-layer key/value caches used during beam
//!   search, where full-prefix scoring is literally a fold of single steps,
//!   so cached and from-scratch scoring agree bitwise.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    apply_dropout, apply_ffn, apply_linear, apply_norm, multi_head_attention, positional_encoding,
    Activation, AttnMask, AttnW, Binder, FfnW, FwdCtx, LinearW, NormW, VisitFn, VisitMutFn,
    NORM_EPS,
};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LmConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Share the input embedding as the output projection.
    #[serde(default = "default_true")]
    pub tied_embeddings: bool,
    #[serde(default)]
    pub dropout: f32,
}

fn default_true() -> bool {
    true
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            layers: 24,
            d_model: 512,
            heads: 8,
            ffn_dim: 2048,
            tied_embeddings: true,
            dropout: 0.0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("lm: needs at least one layer".to_string()));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "lm: d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("lm: dropout must be in [0, 1)".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerW {
    norm_self: NormW,
    self_attn: AttnW,
    norm_ffn: NormW,
    ffn: FfnW,
}

#[derive(Clone, Debug)]
pub struct LmWeights {
    embed: Tensor,
    layers: Vec<LayerW>,
    final_norm: NormW,
    out_proj: Option<LinearW>,
}

impl LmWeights {
    pub fn init(cfg: &LmConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let s = (3.0 / d as f32).sqrt();
        Ok(LmWeights {
            embed: Tensor::rand_uniform(&[vocab_size, d], -s, s, rng),
            layers: (0..cfg.layers)
                .map(|_| LayerW {
                    norm_self: NormW::init(d),
                    self_attn: AttnW::init(d, rng),
                    norm_ffn: NormW::init(d),
                    ffn: FfnW::init(d, cfg.ffn_dim, rng),
                })
                .collect(),
            final_norm: NormW::init(d),
            out_proj: if cfg.tied_embeddings {
                None
            } else {
                Some(LinearW::init(vocab_size, d, rng))
            },
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn visit(&self, name: &str, f: VisitFn) {
        f(&format!("{name}.embed"), &self.embed);
        for (i, l) in self.layers.iter().enumerate() {
            l.norm_self.visit(&format!("{name}.layer{i}.norm_self"), f);
            l.self_attn.visit(&format!("{name}.layer{i}.self_attn"), f);
            l.norm_ffn.visit(&format!("{name}.layer{i}.norm_ffn"), f);
            l.ffn.visit(&format!("{name}.layer{i}.ffn"), f);
        }
        self.final_norm.visit(&format!("{name}.final_norm"), f);
        if let Some(p) = &self.out_proj {
            p.visit(&format!("{name}.out_proj"), f);
        }
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMutFn) {
        f(&format!("{name}.embed"), &mut self.embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.norm_self.visit_mut(&format!("{name}.layer{i}.norm_self"), f);
            l.self_attn.visit_mut(&format!("{name}.layer{i}.self_attn"), f);
            l.norm_ffn.visit_mut(&format!("{name}.layer{i}.norm_ffn"), f);
            l.ffn.visit_mut(&format!("{name}.layer{i}.ffn"), f);
        }
        self.final_norm.visit_mut(&format!("{name}.final_norm"), f);
        if let Some(p) = &mut self.out_proj {
            p.visit_mut(&format!("{name}.out_proj"), f);
        }
    }
}

/// Tape path: log-probs `[len, vocab]` for a sos-prefixed sequence.
pub fn lm_forward(
    tape: &mut Tape,
    weights: &LmWeights,
    binder_name: &str,
    tokens: &[usize],
    cfg: &LmConfig,
    sos: usize,
    ctx: &mut FwdCtx,
) -> Result<(NodeId, Vec<(String, NodeId)>)> {
    if tokens.first() != Some(&sos) {
        return Err(Error::Data("lm: token sequence must begin with sos".to_string()));
    }
    let mut binder = Binder::new(tape);
    let embed = binder.bind(format!("{binder_name}.embed"), &weights.embed);
    let layers: Vec<_> = weights
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            (
                l.norm_self.bind(&mut binder, &format!("{binder_name}.layer{i}.norm_self")),
                l.self_attn.bind(&mut binder, &format!("{binder_name}.layer{i}.self_attn")),
                l.norm_ffn.bind(&mut binder, &format!("{binder_name}.layer{i}.norm_ffn")),
                l.ffn.bind(&mut binder, &format!("{binder_name}.layer{i}.ffn")),
            )
        })
        .collect();
    let final_norm = weights.final_norm.bind(&mut binder, &format!("{binder_name}.final_norm"));
    let out_proj = weights
        .out_proj
        .as_ref()
        .map(|p| p.bind(&mut binder, &format!("{binder_name}.out_proj")));
    let names = binder.into_names();

    let l = tokens.len();
    let d = cfg.d_model;
    let emb = tape.embedding(embed, tokens)?;
    let emb = tape.scale(emb, (d as f32).sqrt())?;
    let pe = tape.leaf(positional_encoding(l, d));
    let mut x = tape.add(emb, pe)?;
    let causal = AttnMask::causal(l);
    for (norm_self, self_attn, norm_ffn, ffn) in &layers {
        let s_in = apply_norm(tape, x, norm_self)?;
        let s = multi_head_attention(tape, s_in, s_in, self_attn, cfg.heads, Some(&causal))?;
        let s = apply_dropout(tape, s, ctx)?;
        x = tape.add(x, s)?;
        let f_in = apply_norm(tape, x, norm_ffn)?;
        let f = apply_ffn(tape, f_in, ffn, Activation::Relu)?;
        let f = apply_dropout(tape, f, ctx)?;
        x = tape.add(x, f)?;
    }
    let x = apply_norm(tape, x, &final_norm)?;
    let logits = match &out_proj {
        Some(p) => apply_linear(tape, x, p)?,
        None => {
            let et = tape.transpose(embed)?;
            tape.matmul(x, et)?
        }
    };
    let logp = tape.log_softmax(logits)?;
    Ok((logp, names))
}

// ── Incremental path ────────────────────────────────────────────────────

/// Per-hypothesis LM state: cached keys/values per layer plus the next-token
/// distribution produced by the last fed token. Independent value; safe to
/// clone across hypotheses and threads.
#[derive(Clone, Debug)]
pub struct LmState {
    pos: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    next_logp: Vec<f32>,
}

impl LmState {
    /// Number of tokens consumed so far.
    pub fn pos(&self) -> usize {
        self.pos
    }

    /// Log-probabilities over the next token.
    pub fn next_logp(&self) -> &[f32] {
        &self.next_logp
    }
}

pub struct LmScorer<'w> {
    weights: &'w LmWeights,
    cfg: &'w LmConfig,
    sos: usize,
    max_pos: usize,
    pe: Tensor,
}

impl<'w> LmScorer<'w> {
    pub fn new(weights: &'w LmWeights, cfg: &'w LmConfig, sos: usize, max_len: usize) -> Result<Self> {
        cfg.validate()?;
        if sos >= weights.vocab_size() {
            return Err(Error::Config("lm scorer: sos id out of range".to_string()));
        }
        let max_pos = max_len.max(1);
        Ok(LmScorer {
            weights,
            cfg,
            sos,
            max_pos,
            pe: positional_encoding(max_pos, cfg.d_model),
        })
    }

    /// Fresh state with sos consumed.
    pub fn start(&self) -> Result<LmState> {
        let state = LmState {
            pos: 0,
            keys: vec![Vec::new(); self.cfg.layers],
            values: vec![Vec::new(); self.cfg.layers],
            next_logp: Vec::new(),
        };
        self.step(&state, self.sos)
    }

    /// Feed one token, producing the state whose `next_logp` conditions on it.
    pub fn step(&self, state: &LmState, token: usize) -> Result<LmState> {
        let v = self.weights.vocab_size();
        if token >= v {
            return Err(Error::Data(format!("lm: token id {token} out of range")));
        }
        let pos = state.pos;
        if pos >= self.max_pos {
            return Err(Error::Data(format!(
                "lm: position {pos} exceeds scorer capacity {}",
                self.max_pos
            )));
        }
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let w = self.weights;

        // Embedding + positional encoding, matching the tape path's rounding.
        let mut x = vec![0f32; d];
        let sqrt_d = (d as f32).sqrt();
        for i in 0..d {
            x[i] = w.embed.data()[token * d + i] * sqrt_d + self.pe.data()[pos * d + i];
        }

        let mut new_state = state.clone();
        for (li, layer) in w.layers.iter().enumerate() {
            let h = layer_norm_row(&x, &layer.norm_self);
            let q = linear_row(&h, &layer.self_attn.q);
            let k = linear_row(&h, &layer.self_attn.k);
            let vv = linear_row(&h, &layer.self_attn.v);
            new_state.keys[li].extend_from_slice(&k);
            new_state.values[li].extend_from_slice(&vv);
            let n_keys = pos + 1;
            let keys = &new_state.keys[li];
            let vals = &new_state.values[li];
            let mut ctx = vec![0f32; d];
            for hd in 0..heads {
                let qh = &q[hd * dh..(hd + 1) * dh];
                // Scores rounded to f32 exactly as matmul-then-scale does.
                let mut scores = vec![0f32; n_keys];
                for j in 0..n_keys {
                    let krow = &keys[j * d + hd * dh..j * d + (hd + 1) * dh];
                    let mut acc = 0f64;
                    for c in 0..dh {
                        acc += qh[c] as f64 * krow[c] as f64;
                    }
                    scores[j] = acc as f32 * scale;
                }
                let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut denom = 0f64;
                let mut exps = vec![0f64; n_keys];
                for j in 0..n_keys {
                    let e = ((scores[j] - max) as f64).exp();
                    exps[j] = e;
                    denom += e;
                }
                let attn: Vec<f32> = exps.iter().map(|e| (e / denom) as f32).collect();
                for c in 0..dh {
                    let mut acc = 0f64;
                    for j in 0..n_keys {
                        acc += attn[j] as f64 * vals[j * d + hd * dh + c] as f64;
                    }
                    ctx[hd * dh + c] = acc as f32;
                }
            }
            let attn_out = linear_row(&ctx, &layer.self_attn.o);
            for i in 0..d {
                x[i] += attn_out[i];
            }
            let h = layer_norm_row(&x, &layer.norm_ffn);
            let f1 = linear_row(&h, &layer.ffn.lin1);
            let f1: Vec<f32> = f1.iter().map(|&a| a.max(0.0)).collect();
            let f2 = linear_row(&f1, &layer.ffn.lin2);
            for i in 0..d {
                x[i] += f2[i];
            }
        }
        let xf = layer_norm_row(&x, &w.final_norm);
        let logits: Vec<f32> = match &w.out_proj {
            Some(p) => linear_row(&xf, p),
            None => (0..v)
                .map(|tok| {
                    let mut acc = 0f64;
                    for c in 0..d {
                        acc += xf[c] as f64 * w.embed.data()[tok * d + c] as f64;
                    }
                    acc as f32
                })
                .collect(),
        };
        // log-softmax with the tape's rounding sequence.
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0f64;
        for &l in &logits {
            denom += ((l - max) as f64).exp();
        }
        let log_denom = denom.ln();
        new_state.next_logp = logits
            .iter()
            .map(|&l| ((l - max) as f64 - log_denom) as f32)
            .collect();
        new_state.pos = pos + 1;
        Ok(new_state)
    }

    /// Score the next token after `prefix` using cached `state`; the state
    /// must have consumed exactly `prefix[..len-1]`.
    pub fn score_step(&self, prefix: &[usize], state: &LmState) -> Result<(Vec<f32>, LmState)> {
        if prefix.first() != Some(&self.sos) {
            return Err(Error::Data("lm: prefix must begin with sos".to_string()));
        }
        if state.pos + 1 != prefix.len() {
            return Err(Error::Data(format!(
                "lm: state consumed {} tokens but prefix has {}",
                state.pos,
                prefix.len()
            )));
        }
        let next = self.step(state, *prefix.last().expect("non-empty"))?;
        Ok((next.next_logp.clone(), next))
    }

    /// Full-prefix scoring from scratch: a fold of `step`, so it is bitwise
    /// identical to cached scoring by construction.
    pub fn score_prefix(&self, prefix: &[usize]) -> Result<LmState> {
        if prefix.first() != Some(&self.sos) {
            return Err(Error::Data("lm: prefix must begin with sos".to_string()));
        }
        let mut state = self.start()?;
        for &tok in &prefix[1..] {
            state = self.step(&state, tok)?;
        }
        Ok(state)
    }
}

fn layer_norm_row(x: &[f32], norm: &NormW) -> Vec<f32> {
    let n = x.len();
    let mut mean = 0f64;
    for &v in x {
        mean += v as f64;
    }
    mean /= n as f64;
    let mut var = 0f64;
    for &v in x {
        let dd = v as f64 - mean;
        var += dd * dd;
    }
    var /= n as f64;
    let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
    (0..n)
        .map(|i| {
            ((x[i] as f64 - mean) * inv * norm.gamma.data()[i] as f64 + norm.beta.data()[i] as f64)
                as f32
        })
        .collect()
}

fn linear_row(x: &[f32], lin: &LinearW) -> Vec<f32> {
    let d_in = x.len();
    let d_out = lin.w.shape()[0];
    (0..d_out)
        .map(|o| {
            let mut acc = lin.b.data()[o] as f64;
            let wrow = &lin.w.data()[o * d_in..(o + 1) * d_in];
            for i in 0..d_in {
                acc += x[i] as f64 * wrow[i] as f64;
            }
            acc as f32
        })
        .collect()
}
