//! Interchangeable sequence encoders behind one block interface. All three
//! variants consume `[t, d_model]` features and produce `[t, d_model]`
//! states, so systems built on different encoders stay drop-in compatible
//! for decoding and fusion.
//!
//! Block internals:
//! - Conformer: half-step FFN, self-attention, conv module
//!   (pointwise/GLU/depthwise/pointwise), half-step FFN, final norm.
//! - Branchformer: parallel attention and cgMLP branches merged by
//!   concat + linear.
//! - E-Branchformer: Branchformer merge augmented with a depthwise conv over
//!   the concatenated branches, wrapped in macaron-style half-step FFNs.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    apply_dropout, apply_ffn, apply_linear, apply_norm, multi_head_attention, positional_encoding,
    Activation, AttnN, AttnW, Binder, DwConvN, DwConvW, FfnN, FfnW, FwdCtx, LinearN, LinearW,
    NormN, NormW, VisitFn, VisitMutFn,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    Conformer,
    Branchformer,
    EBranchformer,
}

/// Which branches a Branchformer-family block runs; `Both` is the model,
/// the single-branch modes exist for ablation probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    #[default]
    Both,
    AttnOnly,
    CgmlpOnly,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub cgmlp_expansion: usize,
    pub depthwise_kernel: usize,
    #[serde(default)]
    pub dropout: f32,
    #[serde(default = "default_true")]
    pub use_posenc: bool,
    #[serde(default)]
    pub branch_mode: BranchMode,
    /// Feature width produced by the frontend; projected to `d_model` first.
    pub input_dim: usize,
}

fn default_true() -> bool {
    true
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            variant: EncoderVariant::EBranchformer,
            layers: 12,
            d_model: 256,
            heads: 4,
            ffn_dim: 1024,
            cgmlp_expansion: 6,
            depthwise_kernel: 31,
            dropout: 0.0,
            use_posenc: true,
            branch_mode: BranchMode::Both,
            input_dim: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder: d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.cgmlp_expansion == 0 || (self.cgmlp_expansion * self.d_model) % 2 != 0 {
            return Err(Error::Config(
                "encoder: cgmlp expansion * d_model must be even for the gate split".to_string(),
            ));
        }
        if self.depthwise_kernel % 2 == 0 || self.depthwise_kernel == 0 {
            return Err(Error::Config("encoder: depthwise kernel must be odd".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("encoder: dropout must be in [0, 1)".to_string()));
        }
        Ok(())
    }

    fn cgmlp_hidden(&self) -> usize {
        self.cgmlp_expansion * self.d_model
    }
}

/// Encoder states plus the valid-frame count of the utterance.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub states: crate::tensor::Tensor,
    pub length: usize,
}

// ── Weights ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct CgmlpW {
    up: LinearW,
    gate_norm: NormW,
    gate_dw: DwConvW,
    down: LinearW,
}

pub struct CgmlpN {
    up: LinearN,
    gate_norm: NormN,
    gate_dw: DwConvN,
    down: LinearN,
}

impl CgmlpW {
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let hidden = cfg.cgmlp_hidden();
        let half = hidden / 2;
        CgmlpW {
            up: LinearW::init(hidden, cfg.d_model, rng),
            gate_norm: NormW::init(half),
            gate_dw: DwConvW::init(half, cfg.depthwise_kernel, rng),
            down: LinearW::init(cfg.d_model, half, rng),
        }
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> CgmlpN {
        CgmlpN {
            up: self.up.bind(b, &format!("{name}.up")),
            gate_norm: self.gate_norm.bind(b, &format!("{name}.gate_norm")),
            gate_dw: self.gate_dw.bind(b, &format!("{name}.gate_dw")),
            down: self.down.bind(b, &format!("{name}.down")),
        }
    }

    pub fn visit(&self, name: &str, f: VisitFn) {
        self.up.visit(&format!("{name}.up"), f);
        self.gate_norm.visit(&format!("{name}.gate_norm"), f);
        self.gate_dw.visit(&format!("{name}.gate_dw"), f);
        self.down.visit(&format!("{name}.down"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMutFn) {
        self.up.visit_mut(&format!("{name}.up"), f);
        self.gate_norm.visit_mut(&format!("{name}.gate_norm"), f);
        self.gate_dw.visit_mut(&format!("{name}.gate_dw"), f);
        self.down.visit_mut(&format!("{name}.down"), f);
    }
}

/// cgMLP: up-projection, GELU, convolutional spatial gating (content half
/// times a depthwise-conv gate of the normalized other half), down-projection.
pub fn cgmlp_forward(tape: &mut Tape, x: NodeId, w: &CgmlpN) -> Result<NodeId> {
    let up = apply_linear(tape, x, &w.up)?;
    let up = tape.gelu(up)?;
    let hidden = tape.value(up).last_dim();
    let half = hidden / 2;
    let content = tape.slice_last(up, 0, half)?;
    let gate_in = tape.slice_last(up, half, half)?;
    let gate = apply_norm(tape, gate_in, &w.gate_norm)?;
    let gate = tape.dwconv1d(gate, w.gate_dw.k, Some(w.gate_dw.b))?;
    let gated = tape.mul(content, gate)?;
    apply_linear(tape, gated, &w.down)
}

#[derive(Clone, Debug)]
enum LayerW {
    Conformer {
        norm_ffn1: NormW,
        ffn1: FfnW,
        norm_attn: NormW,
        attn: AttnW,
        norm_conv: NormW,
        conv_pw1: LinearW,
        conv_dw: DwConvW,
        conv_norm: NormW,
        conv_pw2: LinearW,
        norm_ffn2: NormW,
        ffn2: FfnW,
        norm_final: NormW,
    },
    Branchformer {
        norm_attn: NormW,
        attn: AttnW,
        norm_cgmlp: NormW,
        cgmlp: CgmlpW,
        merge: LinearW,
    },
    EBranchformer {
        norm_ffn1: NormW,
        ffn1: FfnW,
        norm_attn: NormW,
        attn: AttnW,
        norm_cgmlp: NormW,
        cgmlp: CgmlpW,
        merge_dw: DwConvW,
        merge_proj: LinearW,
        norm_ffn2: NormW,
        ffn2: FfnW,
        norm_final: NormW,
    },
}

enum LayerN {
    Conformer {
        norm_ffn1: NormN,
        ffn1: FfnN,
        norm_attn: NormN,
        attn: AttnN,
        norm_conv: NormN,
        conv_pw1: LinearN,
        conv_dw: DwConvN,
        conv_norm: NormN,
        conv_pw2: LinearN,
        norm_ffn2: NormN,
        ffn2: FfnN,
        norm_final: NormN,
    },
    Branchformer {
        norm_attn: NormN,
        attn: AttnN,
        norm_cgmlp: NormN,
        cgmlp: CgmlpN,
        merge: LinearN,
    },
    EBranchformer {
        norm_ffn1: NormN,
        ffn1: FfnN,
        norm_attn: NormN,
        attn: AttnN,
        norm_cgmlp: NormN,
        cgmlp: CgmlpN,
        merge_dw: DwConvN,
        merge_proj: LinearN,
        norm_ffn2: NormN,
        ffn2: FfnN,
        norm_final: NormN,
    },
}

impl LayerW {
    fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        match cfg.variant {
            EncoderVariant::Conformer => LayerW::Conformer {
                norm_ffn1: NormW::init(d),
                ffn1: FfnW::init(d, cfg.ffn_dim, rng),
                norm_attn: NormW::init(d),
                attn: AttnW::init(d, rng),
                norm_conv: NormW::init(d),
                conv_pw1: LinearW::init(2 * d, d, rng),
                conv_dw: DwConvW::init(d, cfg.depthwise_kernel, rng),
                conv_norm: NormW::init(d),
                conv_pw2: LinearW::init(d, d, rng),
                norm_ffn2: NormW::init(d),
                ffn2: FfnW::init(d, cfg.ffn_dim, rng),
                norm_final: NormW::init(d),
            },
            EncoderVariant::Branchformer => LayerW::Branchformer {
                norm_attn: NormW::init(d),
                attn: AttnW::init(d, rng),
                norm_cgmlp: NormW::init(d),
                cgmlp: CgmlpW::init(cfg, rng),
                merge: LinearW::init(d, 2 * d, rng),
            },
            EncoderVariant::EBranchformer => LayerW::EBranchformer {
                norm_ffn1: NormW::init(d),
                ffn1: FfnW::init(d, cfg.ffn_dim, rng),
                norm_attn: NormW::init(d),
                attn: AttnW::init(d, rng),
                norm_cgmlp: NormW::init(d),
                cgmlp: CgmlpW::init(cfg, rng),
                merge_dw: DwConvW::init(2 * d, cfg.depthwise_kernel, rng),
                merge_proj: LinearW::init(d, 2 * d, rng),
                norm_ffn2: NormW::init(d),
                ffn2: FfnW::init(d, cfg.ffn_dim, rng),
                norm_final: NormW::init(d),
            },
        }
    }
}

macro_rules! visit_layer {
    ($self:ident, $name:ident, $f:ident, $visit:ident, $($ref_kind:tt)*) => {
        match $self {
            LayerW::Conformer {
                norm_ffn1, ffn1, norm_attn, attn, norm_conv, conv_pw1, conv_dw, conv_norm,
                conv_pw2, norm_ffn2, ffn2, norm_final,
            } => {
                norm_ffn1.$visit(&format!("{}.norm_ffn1", $name), $f);
                ffn1.$visit(&format!("{}.ffn1", $name), $f);
                norm_attn.$visit(&format!("{}.norm_attn", $name), $f);
                attn.$visit(&format!("{}.attn", $name), $f);
                norm_conv.$visit(&format!("{}.norm_conv", $name), $f);
                conv_pw1.$visit(&format!("{}.conv_pw1", $name), $f);
                conv_dw.$visit(&format!("{}.conv_dw", $name), $f);
                conv_norm.$visit(&format!("{}.conv_norm", $name), $f);
                conv_pw2.$visit(&format!("{}.conv_pw2", $name), $f);
                norm_ffn2.$visit(&format!("{}.norm_ffn2", $name), $f);
                ffn2.$visit(&format!("{}.ffn2", $name), $f);
                norm_final.$visit(&format!("{}.norm_final", $name), $f);
            }
            LayerW::Branchformer { norm_attn, attn, norm_cgmlp, cgmlp, merge } => {
                norm_attn.$visit(&format!("{}.norm_attn", $name), $f);
                attn.$visit(&format!("{}.attn", $name), $f);
                norm_cgmlp.$visit(&format!("{}.norm_cgmlp", $name), $f);
                cgmlp.$visit(&format!("{}.cgmlp", $name), $f);
                merge.$visit(&format!("{}.merge", $name), $f);
            }
            LayerW::EBranchformer {
                norm_ffn1, ffn1, norm_attn, attn, norm_cgmlp, cgmlp, merge_dw, merge_proj,
                norm_ffn2, ffn2, norm_final,
            } => {
                norm_ffn1.$visit(&format!("{}.norm_ffn1", $name), $f);
                ffn1.$visit(&format!("{}.ffn1", $name), $f);
                norm_attn.$visit(&format!("{}.norm_attn", $name), $f);
                attn.$visit(&format!("{}.attn", $name), $f);
                norm_cgmlp.$visit(&format!("{}.norm_cgmlp", $name), $f);
                cgmlp.$visit(&format!("{}.cgmlp", $name), $f);
                merge_dw.$visit(&format!("{}.merge_dw", $name), $f);
                merge_proj.$visit(&format!("{}.merge_proj", $name), $f);
                norm_ffn2.$visit(&format!("{}.norm_ffn2", $name), $f);
                ffn2.$visit(&format!("{}.ffn2", $name), $f);
                norm_final.$visit(&format!("{}.norm_final", $name), $f);
            }
        }
    };
}

#[derive(Clone, Debug)]
pub struct EncoderWeights {
    input_proj: LinearW,
    layers: Vec<LayerW>,
    final_norm: NormW,
}

pub struct EncoderNodes {
    input_proj: LinearN,
    layers: Vec<LayerN>,
    final_norm: NormN,
}

impl EncoderWeights {
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(EncoderWeights {
            input_proj: LinearW::init(cfg.d_model, cfg.input_dim, rng),
            layers: (0..cfg.layers).map(|_| LayerW::init(cfg, rng)).collect(),
            final_norm: NormW::init(cfg.d_model),
        })
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> EncoderNodes {
        EncoderNodes {
            input_proj: self.input_proj.bind(b, &format!("{name}.input_proj")),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| bind_layer(l, b, &format!("{name}.layer{i}")))
                .collect(),
            final_norm: self.final_norm.bind(b, &format!("{name}.final_norm")),
        }
    }

    pub fn visit(&self, name: &str, f: VisitFn) {
        self.input_proj.visit(&format!("{name}.input_proj"), f);
        for (i, l) in self.layers.iter().enumerate() {
            let lname = format!("{name}.layer{i}");
            visit_layer!(l, lname, f, visit,);
        }
        self.final_norm.visit(&format!("{name}.final_norm"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMutFn) {
        self.input_proj.visit_mut(&format!("{name}.input_proj"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let lname = format!("{name}.layer{i}");
            visit_layer!(l, lname, f, visit_mut,);
        }
        self.final_norm.visit_mut(&format!("{name}.final_norm"), f);
    }
}

fn bind_layer(l: &LayerW, b: &mut Binder, name: &str) -> LayerN {
    match l {
        LayerW::Conformer {
            norm_ffn1, ffn1, norm_attn, attn, norm_conv, conv_pw1, conv_dw, conv_norm, conv_pw2,
            norm_ffn2, ffn2, norm_final,
        } => LayerN::Conformer {
            norm_ffn1: norm_ffn1.bind(b, &format!("{name}.norm_ffn1")),
            ffn1: ffn1.bind(b, &format!("{name}.ffn1")),
            norm_attn: norm_attn.bind(b, &format!("{name}.norm_attn")),
            attn: attn.bind(b, &format!("{name}.attn")),
            norm_conv: norm_conv.bind(b, &format!("{name}.norm_conv")),
            conv_pw1: conv_pw1.bind(b, &format!("{name}.conv_pw1")),
            conv_dw: conv_dw.bind(b, &format!("{name}.conv_dw")),
            conv_norm: conv_norm.bind(b, &format!("{name}.conv_norm")),
            conv_pw2: conv_pw2.bind(b, &format!("{name}.conv_pw2")),
            norm_ffn2: norm_ffn2.bind(b, &format!("{name}.norm_ffn2")),
            ffn2: ffn2.bind(b, &format!("{name}.ffn2")),
            norm_final: norm_final.bind(b, &format!("{name}.norm_final")),
        },
        LayerW::Branchformer { norm_attn, attn, norm_cgmlp, cgmlp, merge } => LayerN::Branchformer {
            norm_attn: norm_attn.bind(b, &format!("{name}.norm_attn")),
            attn: attn.bind(b, &format!("{name}.attn")),
            norm_cgmlp: norm_cgmlp.bind(b, &format!("{name}.norm_cgmlp")),
            cgmlp: cgmlp.bind(b, &format!("{name}.cgmlp")),
            merge: merge.bind(b, &format!("{name}.merge")),
        },
        LayerW::EBranchformer {
            norm_ffn1, ffn1, norm_attn, attn, norm_cgmlp, cgmlp, merge_dw, merge_proj, norm_ffn2,
            ffn2, norm_final,
        } => LayerN::EBranchformer {
            norm_ffn1: norm_ffn1.bind(b, &format!("{name}.norm_ffn1")),
            ffn1: ffn1.bind(b, &format!("{name}.ffn1")),
            norm_attn: norm_attn.bind(b, &format!("{name}.norm_attn")),
            attn: attn.bind(b, &format!("{name}.attn")),
            norm_cgmlp: norm_cgmlp.bind(b, &format!("{name}.norm_cgmlp")),
            cgmlp: cgmlp.bind(b, &format!("{name}.cgmlp")),
            merge_dw: merge_dw.bind(b, &format!("{name}.merge_dw")),
            merge_proj: merge_proj.bind(b, &format!("{name}.merge_proj")),
            norm_ffn2: norm_ffn2.bind(b, &format!("{name}.norm_ffn2")),
            ffn2: ffn2.bind(b, &format!("{name}.ffn2")),
            norm_final: norm_final.bind(b, &format!("{name}.norm_final")),
        },
    }
}

/// Run the encoder on frontend features `[t, input_dim]`.
/// Positional encodings, when enabled, are added to attention-branch inputs.
pub fn encoder_forward(
    tape: &mut Tape,
    nodes: &EncoderNodes,
    features: NodeId,
    cfg: &EncoderConfig,
    ctx: &mut FwdCtx,
) -> Result<NodeId> {
    cfg.validate()?;
    let t = tape.value(features).shape()[0];
    if tape.value(features).last_dim() != cfg.input_dim {
        return Err(Error::shape(
            "encoder",
            1,
            format!(
                "feature dim {} != configured input_dim {}",
                tape.value(features).last_dim(),
                cfg.input_dim
            ),
        ));
    }
    let mut x = apply_linear(tape, features, &nodes.input_proj)?;
    let pe = if cfg.use_posenc {
        Some(tape.leaf(positional_encoding(t, cfg.d_model)))
    } else {
        None
    };
    let add_pe = |tape: &mut Tape, h: NodeId| -> Result<NodeId> {
        match pe {
            Some(p) => tape.add(h, p),
            None => Ok(h),
        }
    };
    for layer in &nodes.layers {
        x = match layer {
            LayerN::Conformer {
                norm_ffn1, ffn1, norm_attn, attn, norm_conv, conv_pw1, conv_dw, conv_norm,
                conv_pw2, norm_ffn2, ffn2, norm_final,
            } => {
                let h = apply_norm(tape, x, norm_ffn1)?;
                let h = apply_ffn(tape, h, ffn1, Activation::Swish)?;
                let h = apply_dropout(tape, h, ctx)?;
                let h = tape.scale(h, 0.5)?;
                let x1 = tape.add(x, h)?;

                let a_in = apply_norm(tape, x1, norm_attn)?;
                let a_in = add_pe(tape, a_in)?;
                let a = multi_head_attention(tape, a_in, a_in, attn, cfg.heads, None)?;
                let a = apply_dropout(tape, a, ctx)?;
                let x2 = tape.add(x1, a)?;

                let c = apply_norm(tape, x2, norm_conv)?;
                let c = apply_linear(tape, c, conv_pw1)?;
                let d = cfg.d_model;
                let content = tape.slice_last(c, 0, d)?;
                let gate = tape.slice_last(c, d, d)?;
                let gate = tape.sigmoid(gate)?;
                let c = tape.mul(content, gate)?;
                let c = tape.dwconv1d(c, conv_dw.k, Some(conv_dw.b))?;
                let c = apply_norm(tape, c, conv_norm)?;
                let c = tape.swish(c)?;
                let c = apply_linear(tape, c, conv_pw2)?;
                let c = apply_dropout(tape, c, ctx)?;
                let x3 = tape.add(x2, c)?;

                let h = apply_norm(tape, x3, norm_ffn2)?;
                let h = apply_ffn(tape, h, ffn2, Activation::Swish)?;
                let h = apply_dropout(tape, h, ctx)?;
                let h = tape.scale(h, 0.5)?;
                let x4 = tape.add(x3, h)?;
                apply_norm(tape, x4, norm_final)?
            }
            LayerN::Branchformer { norm_attn, attn, norm_cgmlp, cgmlp, merge } => {
                let merged = match cfg.branch_mode {
                    BranchMode::Both => {
                        let a_in = apply_norm(tape, x, norm_attn)?;
                        let a_in = add_pe(tape, a_in)?;
                        let a = multi_head_attention(tape, a_in, a_in, attn, cfg.heads, None)?;
                        let b_in = apply_norm(tape, x, norm_cgmlp)?;
                        let br = cgmlp_forward(tape, b_in, cgmlp)?;
                        let cat = tape.concat_last(a, br)?;
                        apply_linear(tape, cat, merge)?
                    }
                    BranchMode::AttnOnly => {
                        let a_in = apply_norm(tape, x, norm_attn)?;
                        let a_in = add_pe(tape, a_in)?;
                        multi_head_attention(tape, a_in, a_in, attn, cfg.heads, None)?
                    }
                    BranchMode::CgmlpOnly => {
                        let b_in = apply_norm(tape, x, norm_cgmlp)?;
                        cgmlp_forward(tape, b_in, cgmlp)?
                    }
                };
                let merged = apply_dropout(tape, merged, ctx)?;
                tape.add(x, merged)?
            }
            LayerN::EBranchformer {
                norm_ffn1, ffn1, norm_attn, attn, norm_cgmlp, cgmlp, merge_dw, merge_proj,
                norm_ffn2, ffn2, norm_final,
            } => {
                let h = apply_norm(tape, x, norm_ffn1)?;
                let h = apply_ffn(tape, h, ffn1, Activation::Swish)?;
                let h = apply_dropout(tape, h, ctx)?;
                let h = tape.scale(h, 0.5)?;
                let x1 = tape.add(x, h)?;

                let merged = match cfg.branch_mode {
                    BranchMode::Both => {
                        let a_in = apply_norm(tape, x1, norm_attn)?;
                        let a_in = add_pe(tape, a_in)?;
                        let a = multi_head_attention(tape, a_in, a_in, attn, cfg.heads, None)?;
                        let b_in = apply_norm(tape, x1, norm_cgmlp)?;
                        let br = cgmlp_forward(tape, b_in, cgmlp)?;
                        let cat = tape.concat_last(a, br)?;
                        let conv = tape.dwconv1d(cat, merge_dw.k, Some(merge_dw.b))?;
                        let enhanced = tape.add(cat, conv)?;
                        apply_linear(tape, enhanced, merge_proj)?
                    }
                    BranchMode::AttnOnly => {
                        let a_in = apply_norm(tape, x1, norm_attn)?;
                        let a_in = add_pe(tape, a_in)?;
                        multi_head_attention(tape, a_in, a_in, attn, cfg.heads, None)?
                    }
                    BranchMode::CgmlpOnly => {
                        let b_in = apply_norm(tape, x1, norm_cgmlp)?;
                        cgmlp_forward(tape, b_in, cgmlp)?
                    }
                };
                let merged = apply_dropout(tape, merged, ctx)?;
                let x2 = tape.add(x1, merged)?;

                let h = apply_norm(tape, x2, norm_ffn2)?;
                let h = apply_ffn(tape, h, ffn2, Activation::Swish)?;
                let h = apply_dropout(tape, h, ctx)?;
                let h = tape.scale(h, 0.5)?;
                let x3 = tape.add(x2, h)?;
                apply_norm(tape, x3, norm_final)?
            }
        };
    }
    apply_norm(tape, x, &nodes.final_norm)
}

/// Weights straight to encoder states for one utterance.
pub fn encoder_extract(
    weights: &EncoderWeights,
    cfg: &EncoderConfig,
    features: &crate::tensor::Tensor,
) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let nodes = weights.bind(&mut binder, "encoder");
    let f = binder.tape.leaf(features.clone());
    let out = encoder_forward(&mut tape, &nodes, f, cfg, &mut FwdCtx::inference())?;
    let states = tape.value(out).clone();
    let length = states.shape()[0];
    Ok(EncoderOutput { states, length })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::Tensor;

    fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
        let d = x.last_dim();
        let mut data = vec![0f32; x.numel()];
        for (dst, &src) in perm.iter().enumerate() {
            data[dst * d..(dst + 1) * d].copy_from_slice(&x.data()[src * d..(src + 1) * d]);
        }
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    fn toy_cfg(variant: EncoderVariant) -> EncoderConfig {
        EncoderConfig {
            variant,
            layers: 2,
            d_model: 16,
            heads: 2,
            ffn_dim: 32,
            cgmlp_expansion: 2,
            depthwise_kernel: 3,
            dropout: 0.0,
            use_posenc: true,
            branch_mode: BranchMode::Both,
            input_dim: 8,
        }
    }

    #[test]
    fn all_variants_share_the_shape_contract() {
        for variant in [
            EncoderVariant::Conformer,
            EncoderVariant::Branchformer,
            EncoderVariant::EBranchformer,
        ] {
            let cfg = toy_cfg(variant);
            let w = EncoderWeights::init(&cfg, &mut stream(1, &["enc"])).unwrap();
            let feats = Tensor::rand_uniform(&[12, 8], -1.0, 1.0, &mut stream(2, &["f"]));
            let out = encoder_extract(&w, &cfg, &feats).unwrap();
            assert_eq!(out.states.shape(), &[12, 16], "{variant:?}");
            assert_eq!(out.length, 12);
        }
    }

    #[test]
    fn zero_layers_equal_projection_plus_final_norm() {
        let mut cfg = toy_cfg(EncoderVariant::EBranchformer);
        cfg.layers = 0;
        let w = EncoderWeights::init(&cfg, &mut stream(3, &["enc"])).unwrap();
        let feats = Tensor::rand_uniform(&[5, 8], -1.0, 1.0, &mut stream(4, &["f"]));
        let out = encoder_extract(&w, &cfg, &feats).unwrap();

        // Recompute by hand: linear projection then the final layer norm.
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        let proj = w.input_proj.bind(&mut b, "p");
        let fnorm = w.final_norm.bind(&mut b, "n");
        let f = b.tape.leaf(feats.clone());
        let p = apply_linear(&mut tape, f, &proj).unwrap();
        let expect = apply_norm(&mut tape, p, &fnorm).unwrap();
        assert_eq!(out.states, *tape.value(expect));
    }

    #[test]
    fn determinism_same_weights_same_input() {
        let cfg = toy_cfg(EncoderVariant::EBranchformer);
        let w = EncoderWeights::init(&cfg, &mut stream(5, &["enc"])).unwrap();
        let feats = Tensor::rand_uniform(&[9, 8], -1.0, 1.0, &mut stream(6, &["f"]));
        let a = encoder_extract(&w, &cfg, &feats).unwrap();
        let b = encoder_extract(&w, &cfg, &feats).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn attention_only_ablation_is_permutation_equivariant_but_full_block_is_not() {
        let mut cfg = toy_cfg(EncoderVariant::Branchformer);
        cfg.use_posenc = false;
        cfg.branch_mode = BranchMode::AttnOnly;
        let w = EncoderWeights::init(&cfg, &mut stream(7, &["enc"])).unwrap();
        let t = 6;
        let feats = Tensor::rand_uniform(&[t, 8], -1.0, 1.0, &mut stream(8, &["f"]));
        let perm = [4usize, 2, 0, 5, 1, 3];
        let permuted = permute_rows(&feats, &perm);

        let y = encoder_extract(&w, &cfg, &feats).unwrap().states;
        let py = encoder_extract(&w, &cfg, &permuted).unwrap().states;
        let d = cfg.d_model;
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                &py.data()[dst * d..(dst + 1) * d],
                &y.data()[src * d..(src + 1) * d],
                "attn-only must be equivariant"
            );
        }

        // Same probe with the cgMLP branch enabled must fail: the depthwise
        // temporal conv is order-sensitive.
        cfg.branch_mode = BranchMode::Both;
        let w = EncoderWeights::init(&cfg, &mut stream(7, &["enc"])).unwrap();
        let y = encoder_extract(&w, &cfg, &feats).unwrap().states;
        let py = encoder_extract(&w, &cfg, &permuted).unwrap().states;
        let mut any_diff = false;
        for (dst, &src) in perm.iter().enumerate() {
            if py.data()[dst * d..(dst + 1) * d] != y.data()[src * d..(src + 1) * d] {
                any_diff = true;
            }
        }
        assert!(any_diff, "cgMLP branch must break permutation equivariance");
    }

    #[test]
    fn cgmlp_gate_identity_and_annihilation() {
        let cfg = toy_cfg(EncoderVariant::Branchformer);
        let mut cg = CgmlpW::init(&cfg, &mut stream(9, &["cg"]));
        let half = cfg.cgmlp_expansion * cfg.d_model / 2;
        // Zero depthwise weights, gate bias -> 1: gating passes content through.
        cg.gate_dw.k = Tensor::zeros(&[half, cfg.depthwise_kernel]);
        cg.gate_dw.b = Tensor::full(&[half], 1.0);
        let x = Tensor::rand_uniform(&[4, cfg.d_model], -1.0, 1.0, &mut stream(10, &["x"]));

        let run = |cg: &CgmlpW, x: &Tensor| {
            let mut tape = Tape::new();
            let mut b = Binder::new(&mut tape);
            let n = cg.bind(&mut b, "cg");
            let xid = b.tape.leaf(x.clone());
            let out = cgmlp_forward(&mut tape, xid, &n).unwrap();
            tape.value(out).clone()
        };
        let full = run(&cg, &x);

        // Oracle for gate == 1: down(content half of gelu(up(x))).
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        let up = cg.up.bind(&mut b, "up");
        let down = cg.down.bind(&mut b, "down");
        let xid = b.tape.leaf(x.clone());
        let u = apply_linear(&mut tape, xid, &up).unwrap();
        let u = tape.gelu(u).unwrap();
        let content = tape.slice_last(u, 0, half).unwrap();
        let expect = apply_linear(&mut tape, content, &down).unwrap();
        assert_eq!(full, *tape.value(expect));

        // Gate bias 0 and zero weights: output collapses to the down bias.
        cg.gate_dw.b = Tensor::zeros(&[half]);
        let collapsed = run(&cg, &x);
        let d = cfg.d_model;
        for row in 0..4 {
            for j in 0..d {
                assert!(
                    (collapsed.data()[row * d + j] - cg.down.b.data()[j]).abs() < 1e-7,
                    "gate=0 must collapse to down-projection bias"
                );
            }
        }
    }

    #[test]
    fn cgmlp_matches_scalar_reimplementation() {
        let cfg = toy_cfg(EncoderVariant::Branchformer);
        let cg = CgmlpW::init(&cfg, &mut stream(11, &["cg"]));
        let t = 5;
        let d = cfg.d_model;
        let x = Tensor::rand_uniform(&[t, d], -1.0, 1.0, &mut stream(12, &["x"]));

        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape);
        let n = cg.bind(&mut b, "cg");
        let xid = b.tape.leaf(x.clone());
        let out = cgmlp_forward(&mut tape, xid, &n).unwrap();
        let got = tape.value(out).clone();

        // Straight-line scalar oracle, f64 throughout.
        let hidden = cfg.cgmlp_expansion * d;
        let half = hidden / 2;
        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
        let mut up = vec![0f64; t * hidden];
        for ti in 0..t {
            for o in 0..hidden {
                let mut acc = cg.up.b.data()[o] as f64;
                for i in 0..d {
                    acc += x.data()[ti * d + i] as f64 * cg.up.w.data()[o * d + i] as f64;
                }
                up[ti * hidden + o] = gelu(acc as f32 as f64);
            }
        }
        // layer norm over the gate half, then depthwise conv, then product.
        let ks = cfg.depthwise_kernel;
        let pad = (ks - 1) / 2;
        let mut gated = vec![0f64; t * half];
        let mut normed = vec![0f64; t * half];
        for ti in 0..t {
            let row: Vec<f64> = (0..half).map(|j| up[ti * hidden + half + j] as f32 as f64).collect();
            let mean = row.iter().sum::<f64>() / half as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / half as f64;
            let inv = 1.0 / (var + crate::model::layers::NORM_EPS as f64).sqrt();
            for j in 0..half {
                normed[ti * half + j] = ((row[j] - mean) * inv * cg.gate_norm.gamma.data()[j] as f64
                    + cg.gate_norm.beta.data()[j] as f64) as f32 as f64;
            }
        }
        for ti in 0..t {
            for j in 0..half {
                let mut acc = cg.gate_dw.b.data()[j] as f64;
                for kk in 0..ks {
                    let src = ti as isize + kk as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    acc += normed[src as usize * half + j] * cg.gate_dw.k.data()[j * ks + kk] as f64;
                }
                gated[ti * half + j] = (up[ti * hidden + j] as f32 as f64) * (acc as f32 as f64);
            }
        }
        for ti in 0..t {
            for o in 0..d {
                let mut acc = cg.down.b.data()[o] as f64;
                for j in 0..half {
                    acc += (gated[ti * half + j] as f32 as f64) * cg.down.w.data()[o * half + j] as f64;
                }
                let want = acc as f32;
                let have = got.data()[ti * d + o];
                assert!(
                    (want - have).abs() < 1e-6,
                    "cgMLP scalar oracle mismatch at ({ti},{o}): {want} vs {have}"
                );
            }
        }
    }

    #[test]
    fn odd_expansion_times_odd_d_model_is_rejected() {
        let mut cfg = toy_cfg(EncoderVariant::Branchformer);
        cfg.d_model = 15;
        cfg.heads = 3;
        cfg.cgmlp_expansion = 1;
        assert!(cfg.validate().is_err());
    }
}
