//! Autoregressive Transformer decoder with encoder cross-attention.
//! Causal self-attention gives each position visibility of itself and
//! everything before it; cross-attention sees all encoder states.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    apply_dropout, apply_ffn, apply_linear, apply_norm, multi_head_attention, positional_encoding,
    Activation, AttnMask, AttnN, AttnW, Binder, FfnN, FfnW, FwdCtx, LinearN, LinearW, NormN,
    NormW, VisitFn, VisitMutFn,
};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Must match the encoder's d_model.
    pub d_model: usize,
    #[serde(default)]
    pub dropout: f32,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 6,
            heads: 4,
            ffn_dim: 2048,
            d_model: 256,
            dropout: 0.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("decoder: needs at least one layer".to_string()));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder: d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("decoder: dropout must be in [0, 1)".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerW {
    norm_self: NormW,
    self_attn: AttnW,
    norm_cross: NormW,
    cross_attn: AttnW,
    norm_ffn: NormW,
    ffn: FfnW,
}

struct LayerN {
    norm_self: NormN,
    self_attn: AttnN,
    norm_cross: NormN,
    cross_attn: AttnN,
    norm_ffn: NormN,
    ffn: FfnN,
}

#[derive(Clone, Debug)]
pub struct DecoderWeights {
    embed: Tensor,
    layers: Vec<LayerW>,
    final_norm: NormW,
    out_proj: LinearW,
}

pub struct DecoderNodes {
    embed: NodeId,
    layers: Vec<LayerN>,
    final_norm: NormN,
    out_proj: LinearN,
}

impl DecoderWeights {
    pub fn init(cfg: &DecoderConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let s = (3.0 / d as f32).sqrt();
        Ok(DecoderWeights {
            embed: Tensor::rand_uniform(&[vocab_size, d], -s, s, rng),
            layers: (0..cfg.layers)
                .map(|_| LayerW {
                    norm_self: NormW::init(d),
                    self_attn: AttnW::init(d, rng),
                    norm_cross: NormW::init(d),
                    cross_attn: AttnW::init(d, rng),
                    norm_ffn: NormW::init(d),
                    ffn: FfnW::init(d, cfg.ffn_dim, rng),
                })
                .collect(),
            final_norm: NormW::init(d),
            out_proj: LinearW::init(vocab_size, d, rng),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> DecoderNodes {
        DecoderNodes {
            embed: b.bind(format!("{name}.embed"), &self.embed),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerN {
                    norm_self: l.norm_self.bind(b, &format!("{name}.layer{i}.norm_self")),
                    self_attn: l.self_attn.bind(b, &format!("{name}.layer{i}.self_attn")),
                    norm_cross: l.norm_cross.bind(b, &format!("{name}.layer{i}.norm_cross")),
                    cross_attn: l.cross_attn.bind(b, &format!("{name}.layer{i}.cross_attn")),
                    norm_ffn: l.norm_ffn.bind(b, &format!("{name}.layer{i}.norm_ffn")),
                    ffn: l.ffn.bind(b, &format!("{name}.layer{i}.ffn")),
                })
                .collect(),
            final_norm: self.final_norm.bind(b, &format!("{name}.final_norm")),
            out_proj: self.out_proj.bind(b, &format!("{name}.out_proj")),
        }
    }

    pub fn visit(&self, name: &str, f: VisitFn) {
        f(&format!("{name}.embed"), &self.embed);
        for (i, l) in self.layers.iter().enumerate() {
            l.norm_self.visit(&format!("{name}.layer{i}.norm_self"), f);
            l.self_attn.visit(&format!("{name}.layer{i}.self_attn"), f);
            l.norm_cross.visit(&format!("{name}.layer{i}.norm_cross"), f);
            l.cross_attn.visit(&format!("{name}.layer{i}.cross_attn"), f);
            l.norm_ffn.visit(&format!("{name}.layer{i}.norm_ffn"), f);
            l.ffn.visit(&format!("{name}.layer{i}.ffn"), f);
        }
        self.final_norm.visit(&format!("{name}.final_norm"), f);
        self.out_proj.visit(&format!("{name}.out_proj"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMutFn) {
        f(&format!("{name}.embed"), &mut self.embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.norm_self.visit_mut(&format!("{name}.layer{i}.norm_self"), f);
            l.self_attn.visit_mut(&format!("{name}.layer{i}.self_attn"), f);
            l.norm_cross.visit_mut(&format!("{name}.layer{i}.norm_cross"), f);
            l.cross_attn.visit_mut(&format!("{name}.layer{i}.cross_attn"), f);
            l.norm_ffn.visit_mut(&format!("{name}.layer{i}.norm_ffn"), f);
            l.ffn.visit_mut(&format!("{name}.layer{i}.ffn"), f);
        }
        self.final_norm.visit_mut(&format!("{name}.final_norm"), f);
        self.out_proj.visit_mut(&format!("{name}.out_proj"), f);
    }
}

/// Log-probabilities `[len, vocab]` for a sos-prefixed token sequence
/// against encoder states `enc: [t_enc, d_model]`.
pub fn decoder_forward(
    tape: &mut Tape,
    nodes: &DecoderNodes,
    tokens: &[usize],
    enc: NodeId,
    cfg: &DecoderConfig,
    sos: usize,
    ctx: &mut FwdCtx,
) -> Result<NodeId> {
    if tokens.first() != Some(&sos) {
        return Err(Error::Data("decoder: token sequence must begin with sos".to_string()));
    }
    let l = tokens.len();
    let d = cfg.d_model;
    let emb = tape.embedding(nodes.embed, tokens)?;
    let emb = tape.scale(emb, (d as f32).sqrt())?;
    let pe = tape.leaf(positional_encoding(l, d));
    let mut x = tape.add(emb, pe)?;
    let causal = AttnMask::causal(l);
    for layer in &nodes.layers {
        let s_in = apply_norm(tape, x, &layer.norm_self)?;
        let s = multi_head_attention(tape, s_in, s_in, &layer.self_attn, cfg.heads, Some(&causal))?;
        let s = apply_dropout(tape, s, ctx)?;
        x = tape.add(x, s)?;

        let c_in = apply_norm(tape, x, &layer.norm_cross)?;
        let c = cross_attention(tape, c_in, enc, &layer.cross_attn, cfg.heads)?;
        let c = apply_dropout(tape, c, ctx)?;
        x = tape.add(x, c)?;

        let f_in = apply_norm(tape, x, &layer.norm_ffn)?;
        let f = apply_ffn(tape, f_in, &layer.ffn, Activation::Relu)?;
        let f = apply_dropout(tape, f, ctx)?;
        x = tape.add(x, f)?;
    }
    let x = apply_norm(tape, x, &nodes.final_norm)?;
    let logits = apply_linear(tape, x, &nodes.out_proj)?;
    tape.log_softmax(logits)
}

fn cross_attention(
    tape: &mut Tape,
    q_in: NodeId,
    enc: NodeId,
    w: &AttnN,
    heads: usize,
) -> Result<NodeId> {
    multi_head_attention(tape, q_in, enc, w, heads, None)
}

/// One inference call: log-probs for the next token after `tokens`.
pub fn decoder_next_logp(
    weights: &DecoderWeights,
    cfg: &DecoderConfig,
    tokens: &[usize],
    enc_states: &Tensor,
    sos: usize,
) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let nodes = weights.bind(&mut binder, "decoder");
    let enc = binder.tape.leaf(enc_states.clone());
    let out = decoder_forward(
        &mut tape,
        &nodes,
        tokens,
        enc,
        cfg,
        sos,
        &mut FwdCtx::inference(),
    )?;
    let v = tape.value(out);
    let vocab = v.last_dim();
    let last = v.shape()[0] - 1;
    Ok(v.data()[last * vocab..(last + 1) * vocab].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn toy() -> (DecoderConfig, DecoderWeights, Tensor) {
        let cfg = DecoderConfig {
            layers: 2,
            heads: 2,
            ffn_dim: 16,
            d_model: 8,
            dropout: 0.0,
        };
        let w = DecoderWeights::init(&cfg, 6, &mut stream(31, &["dec"])).unwrap();
        let enc = Tensor::rand_uniform(&[7, 8], -1.0, 1.0, &mut stream(32, &["enc"]));
        (cfg, w, enc)
    }

    fn logp(cfg: &DecoderConfig, w: &DecoderWeights, tokens: &[usize], enc: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        let nodes = w.bind(&mut b, "decoder");
        let e = b.tape.leaf(enc.clone());
        let out = decoder_forward(&mut tape, &nodes, tokens, e, cfg, 5, &mut FwdCtx::inference()).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn requires_sos_prefix() {
        let (cfg, w, enc) = toy();
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        let nodes = w.bind(&mut b, "decoder");
        let e = b.tape.leaf(enc);
        assert!(decoder_forward(&mut tape, &nodes, &[2, 3], e, &cfg, 5, &mut FwdCtx::inference()).is_err());
    }

    #[test]
    fn causality_earlier_positions_are_bitwise_stable() {
        let (cfg, w, enc) = toy();
        let a = logp(&cfg, &w, &[5, 2, 3, 4], &enc);
        let b = logp(&cfg, &w, &[5, 2, 3, 2], &enc);
        let v = 6;
        // positions 0..3 depend only on tokens 0..=position
        assert_eq!(&a.data()[..3 * v], &b.data()[..3 * v]);
        assert_ne!(&a.data()[3 * v..], &b.data()[3 * v..]);
    }

    #[test]
    fn rows_are_normalized_log_probs() {
        let (cfg, w, enc) = toy();
        let out = logp(&cfg, &w, &[5, 2, 3], &enc);
        let v = 6;
        for r in 0..3 {
            let row = &out.data()[r * v..(r + 1) * v];
            let lse: f64 = row.iter().map(|&x| (x as f64).exp()).sum::<f64>().ln();
            assert!(lse.abs() < 1e-5, "row {r} lse {lse}");
        }
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let (cfg, w, enc) = toy();
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        let nodes = w.bind(&mut b, "decoder");
        let e = b.tape.leaf(enc);
        assert!(decoder_forward(&mut tape, &nodes, &[5, 9], e, &cfg, 5, &mut FwdCtx::inference()).is_err());
    }

    #[test]
    fn recomputation_is_bitwise_and_next_logp_matches_last_row() {
        let (cfg, w, enc) = toy();
        let a = logp(&cfg, &w, &[5, 2, 3], &enc);
        let b = logp(&cfg, &w, &[5, 2, 3], &enc);
        assert_eq!(a, b);
        let next = decoder_next_logp(&w, &cfg, &[5, 2, 3], &enc, 5).unwrap();
        assert_eq!(&a.data()[2 * 6..3 * 6], &next[..]);
    }
}
