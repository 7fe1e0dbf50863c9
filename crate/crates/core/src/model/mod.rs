//! Model assembly: visual frontend, sequence encoder, CTC head, attention
//! decoder, and an optional language model, all owned by one [`VsrModel`]
//! with named parameters for checkpointing and optimization.

pub mod decoder;
pub mod encoder;
pub mod frontend;
pub mod layers;
pub mod lm;

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::video::VideoTensor;
use crate::vocab::Vocabulary;
use serde::{Deserialize, Serialize};

use decoder::{DecoderConfig, DecoderWeights};
use encoder::{EncoderConfig, EncoderWeights};
use frontend::{FrontendConfig, FrontendWeights};
use layers::{apply_linear, Binder, FwdCtx, LinearW, VisitFn, VisitMutFn};
use lm::{LmConfig, LmWeights};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab: Vec<String>,
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub lm: Option<LmConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        if let Some(lm) = &self.lm {
            lm.validate()?;
        }
        if self.encoder.input_dim != self.frontend.output_dim() {
            return Err(Error::Config(format!(
                "encoder input_dim {} != frontend output dim {}",
                self.encoder.input_dim,
                self.frontend.output_dim()
            )));
        }
        if self.decoder.d_model != self.encoder.d_model {
            return Err(Error::Config(format!(
                "decoder d_model {} must match encoder d_model {}",
                self.decoder.d_model, self.encoder.d_model
            )));
        }
        Vocabulary::from_tokens(self.vocab.clone())?;
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_tokens(self.vocab.clone())
    }
}

#[derive(Debug)]
pub struct VsrModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub frontend: FrontendWeights,
    pub encoder: EncoderWeights,
    pub ctc_head: LinearW,
    pub decoder: DecoderWeights,
    pub lm: Option<LmWeights>,
}

impl VsrModel {
    /// Deterministic initialization: each component draws from its own
    /// seed-derived stream, so adding one never reshuffles another.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = config.vocabulary()?;
        let v = vocab.size();
        let frontend = FrontendWeights::init(&config.frontend, &mut rng::stream(seed, &["init", "frontend"]))?;
        let encoder = EncoderWeights::init(&config.encoder, &mut rng::stream(seed, &["init", "encoder"]))?;
        let ctc_head = LinearW::init(v, config.encoder.d_model, &mut rng::stream(seed, &["init", "ctc_head"]));
        let decoder = DecoderWeights::init(&config.decoder, v, &mut rng::stream(seed, &["init", "decoder"]))?;
        let lm = match &config.lm {
            Some(lm_cfg) => Some(LmWeights::init(lm_cfg, v, &mut rng::stream(seed, &["init", "lm"]))?),
            None => None,
        };
        Ok(VsrModel {
            config,
            vocab,
            frontend,
            encoder,
            ctc_head,
            decoder,
            lm,
        })
    }

    pub fn visit(&self, f: VisitFn) {
        self.frontend.visit("frontend", f);
        self.encoder.visit("encoder", f);
        self.ctc_head.visit("ctc_head", f);
        self.decoder.visit("decoder", f);
        if let Some(lm) = &self.lm {
            lm.visit("lm", f);
        }
    }

    pub fn visit_mut(&mut self, f: VisitMutFn) {
        self.frontend.visit_mut("frontend", f);
        self.encoder.visit_mut("encoder", f);
        self.ctc_head.visit_mut("ctc_head", f);
        self.decoder.visit_mut("decoder", f);
        if let Some(lm) = &mut self.lm {
            lm.visit_mut("lm", f);
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name.to_string()));
        names
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Encoder states and per-frame CTC log-probs for one clip, outside of
    /// any training tape.
    pub fn encode_utterance(&self, video: &VideoTensor) -> Result<EncodedUtterance> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let fe = self.frontend.bind(&mut binder, "frontend");
        let enc = self.encoder.bind(&mut binder, "encoder");
        let ctc = self.ctc_head.bind(&mut binder, "ctc_head");
        let x = binder.tape.leaf(video.to_model_input());
        let feats = frontend::frontend_forward(&mut tape, &fe, x, &self.config.frontend)?;
        let states = encoder::encoder_forward(&mut tape, &enc, feats, &self.config.encoder, &mut FwdCtx::inference())?;
        let ctc_logits = apply_linear(&mut tape, states, &ctc)?;
        let ctc_logp = tape.log_softmax(ctc_logits)?;
        Ok(EncodedUtterance {
            states: tape.value(states).clone(),
            ctc_logp: tape.value(ctc_logp).clone(),
        })
    }
}

/// Inference-side encoder products for one utterance.
#[derive(Clone, Debug)]
pub struct EncodedUtterance {
    pub states: Tensor,
    pub ctc_logp: Tensor,
}

/// Tape handles for the full VSR stack bound into one training step.
pub struct BoundVsrModel {
    pub frontend: frontend::FrontendNodes,
    pub encoder: encoder::EncoderNodes,
    pub ctc_head: layers::LinearN,
    pub decoder: decoder::DecoderNodes,
}

impl VsrModel {
    /// Bind everything except the LM (trained separately) into a tape.
    pub fn bind_for_training<'t>(&self, tape: &'t mut Tape) -> (BoundVsrModel, Vec<(String, NodeId)>) {
        let mut binder = Binder::new(tape);
        let bound = BoundVsrModel {
            frontend: self.frontend.bind(&mut binder, "frontend"),
            encoder: self.encoder.bind(&mut binder, "encoder"),
            ctc_head: self.ctc_head.bind(&mut binder, "ctc_head"),
            decoder: self.decoder.bind(&mut binder, "decoder"),
        };
        (bound, binder.into_names())
    }
}

/// Small configurations shared by tests across the crate.
#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub(crate) fn toy_model_config() -> ModelConfig {
        let vocab = Vocabulary::from_chars("abcdefgh").unwrap();
        ModelConfig {
            vocab: vocab.tokens().to_vec(),
            frontend: FrontendConfig {
                input_channels: 1,
                block_channels: vec![2, 4],
                kernel: 3,
            },
            encoder: EncoderConfig {
                variant: encoder::EncoderVariant::EBranchformer,
                layers: 2,
                d_model: 16,
                heads: 2,
                ffn_dim: 32,
                cgmlp_expansion: 2,
                depthwise_kernel: 3,
                dropout: 0.0,
                use_posenc: true,
                branch_mode: encoder::BranchMode::Both,
                input_dim: 4,
            },
            decoder: DecoderConfig {
                layers: 2,
                heads: 2,
                ffn_dim: 16,
                d_model: 16,
                dropout: 0.0,
            },
            lm: Some(LmConfig {
                layers: 1,
                d_model: 8,
                heads: 2,
                ffn_dim: 16,
                tied_embeddings: true,
                dropout: 0.0,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::toy_model_config;
    use super::*;

    #[test]
    fn init_is_deterministic_and_names_are_unique() {
        let cfg = toy_model_config();
        let a = VsrModel::init(cfg.clone(), 7).unwrap();
        let b = VsrModel::init(cfg, 7).unwrap();
        let mut names = a.param_names();
        assert_eq!(names, b.param_names());
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total, "duplicate parameter names");

        let mut equal = true;
        a.visit(&mut |name, t| {
            let mut found = false;
            b.visit(&mut |n2, t2| {
                if n2 == name {
                    found = true;
                    if t2 != t {
                        equal = false;
                    }
                }
            });
            assert!(found, "missing {name}");
        });
        assert!(equal, "same seed must give identical weights");
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let mut cfg = toy_model_config();
        cfg.encoder.input_dim = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_model_config();
        cfg.decoder.d_model = 8;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_utterance_produces_frames_and_logprobs() {
        let cfg = toy_model_config();
        let model = VsrModel::init(cfg, 3).unwrap();
        let video = VideoTensor::new(
            Tensor::rand_uniform(&[6, 8, 8, 1], 0.0, 1.0, &mut crate::rng::stream(1, &["v"])),
            25.0,
        )
        .unwrap();
        let enc = model.encode_utterance(&video).unwrap();
        assert_eq!(enc.states.shape(), &[6, 16]);
        assert_eq!(enc.ctc_logp.shape(), &[6, model.vocab.size()]);
        for t in 0..6 {
            let v = model.vocab.size();
            let row = &enc.ctc_logp.data()[t * v..(t + 1) * v];
            let total: f64 = row.iter().map(|&l| (l as f64).exp()).sum();
            assert!((total - 1.0).abs() < 1e-5);
        }
    }
}
