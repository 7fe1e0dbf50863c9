//! Toy-scale training: Adam with inverse-sqrt warmup, global-norm gradient
//! clipping, deterministic batching, optional dynamic augmentation, and a
//! separate trainer for the language model. Per-sample gradients within a
//! batch may be computed in parallel; they are reduced in batch order, so
//! results do not depend on thread scheduling.

use crate::error::{Error, Result};
use crate::loss::{joint_loss, JointLossConfig, JointLossOutcome};
use crate::manifest::ManifestEntry;
use crate::model::layers::FwdCtx;
use crate::model::lm::{lm_forward, LmConfig, LmWeights};
use crate::model::{ModelConfig, VsrModel};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::video::{augment, load_vten, AugmentPolicy, VideoTensor};
use crate::vocab::Vocabulary;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct OptimConfig {
    pub lr_peak: f32,
    pub warmup_steps: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub clip_norm: f32,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_peak: 2e-3,
            warmup_steps: 50,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 5.0,
            batch_size: 8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_peak <= 0.0 || self.batch_size == 0 || self.warmup_steps == 0 {
            return Err(Error::Config(
                "optimizer: lr_peak, batch_size, warmup_steps must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Linear warmup to `lr_peak`, then inverse-square-root decay.
    pub fn lr_at(&self, step: usize) -> f32 {
        let s = step.max(1) as f32;
        let w = self.warmup_steps as f32;
        self.lr_peak * (s / w).min((w / s).sqrt())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub joint: JointLossConfig,
    pub optim: OptimConfig,
    /// Dynamic augmentation applied per sample per step; `None` disables.
    pub augment: Option<AugmentPolicy>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            seed: 0,
            joint: JointLossConfig::default(),
            optim: OptimConfig::default(),
            augment: None,
        }
    }
}

/// One loaded utterance ready for training.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub video: VideoTensor,
    pub label: Vec<usize>,
}

/// Load every manifest entry, encoding transcripts at character level.
pub fn load_training_set(entries: &[ManifestEntry], vocab: &Vocabulary) -> Result<Vec<TrainItem>> {
    entries
        .iter()
        .map(|e| {
            let video = load_vten(&e.path)?;
            let label = vocab.encode(&e.transcript);
            Ok(TrainItem {
                id: e.id.clone(),
                video,
                label,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub ctc: f64,
    pub ce: f64,
    pub joint: f64,
}

/// Serialize a loss curve as `step<TAB>ctc<TAB>ce<TAB>joint` lines.
pub fn format_loss_curve(records: &[LossRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.6}\n", r.step, r.ctc, r.ce, r.joint));
    }
    out
}

struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
}

struct Adam {
    slots: BTreeMap<String, AdamState>,
    t: usize,
}

impl Adam {
    fn new() -> Self {
        Adam {
            slots: BTreeMap::new(),
            t: 0,
        }
    }

    fn begin_step(&mut self) {
        self.t += 1;
    }

    fn update(&mut self, cfg: &OptimConfig, lr: f32, name: &str, param: &mut Tensor, grad: &[f32]) {
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamState {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
        });
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, g) in grad.iter().enumerate() {
            slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
            slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
            let mh = slot.m[i] / bc1;
            let vh = slot.v[i] / bc2;
            param.data_mut()[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Per-sample forward/backward result: named gradients plus loss components.
struct SampleGrad {
    grads: BTreeMap<String, Tensor>,
    ctc: f64,
    ce: f64,
    joint: f64,
}

fn sample_gradients(
    model: &VsrModel,
    item: &TrainItem,
    video: &VideoTensor,
    loss_cfg: &JointLossConfig,
    dropout_rng: Option<rand_chacha::ChaCha8Rng>,
) -> Result<Option<SampleGrad>> {
    let mut tape = Tape::new();
    let (bound, names) = model.bind_for_training(&mut tape);
    let input = tape.leaf(video.to_model_input());
    let mut rng_box = dropout_rng;
    let dropout = model.config.encoder.dropout.max(model.config.decoder.dropout);
    let mut ctx = match rng_box.as_mut() {
        Some(r) => FwdCtx {
            dropout,
            rng: Some(r),
        },
        None => FwdCtx::inference(),
    };
    let outcome = joint_loss(&mut tape, &bound, &model.config, input, &item.label, loss_cfg, &mut ctx)?;
    match outcome {
        JointLossOutcome::CtcInfeasible => Ok(None),
        JointLossOutcome::Feasible { loss, ctc, ce, joint } => {
            let grads = tape.backward(loss)?;
            let mut map = BTreeMap::new();
            for (name, node) in names {
                map.insert(name, grads.get(node));
            }
            Ok(Some(SampleGrad {
                grads: map,
                ctc: ctc as f64,
                ce: ce as f64,
                joint: joint as f64,
            }))
        }
    }
}

/// Train the full VSR stack (frontend, encoder, CTC head, decoder) on the
/// given items. Fully deterministic for a fixed config. Returns the trained
/// model together with the per-step loss curve.
pub fn train_toy(
    items: &[TrainItem],
    model_config: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(VsrModel, Vec<LossRecord>)> {
    cfg.optim.validate()?;
    cfg.joint.validate()?;
    if let Some(policy) = &cfg.augment {
        policy.validate()?;
    }
    if items.is_empty() {
        return Err(Error::Data("train_toy: empty training set".to_string()));
    }
    let mut model = VsrModel::init(model_config, cfg.seed)?;
    let mut adam = Adam::new();
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let mut batch_rng = rng::stream(cfg.seed, &["batch", &step.to_string()]);
        let batch: Vec<usize> = (0..cfg.optim.batch_size)
            .map(|_| batch_rng.gen_range(0..items.len()))
            .collect();

        // Per-sample work is independent; reduction below runs in batch order.
        let results: Vec<Result<Option<SampleGrad>>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let item = &items[idx];
                let video = match &cfg.augment {
                    Some(policy) => {
                        let mut aug_rng = rng::stream(
                            cfg.seed,
                            &["augment", &step.to_string(), &slot.to_string(), &item.id],
                        );
                        augment(&item.video, policy, &mut aug_rng)?
                    }
                    None => item.video.clone(),
                };
                let dropout_rng = if model.config.encoder.dropout > 0.0
                    || model.config.decoder.dropout > 0.0
                {
                    Some(rng::stream(
                        cfg.seed,
                        &["dropout", &step.to_string(), &slot.to_string()],
                    ))
                } else {
                    None
                };
                sample_gradients(&model, item, &video, &cfg.joint, dropout_rng)
            })
            .collect();

        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let (mut ctc_sum, mut ce_sum, mut joint_sum) = (0f64, 0f64, 0f64);
        let mut contributing = 0usize;
        for r in results {
            let Some(sample) = r.map_err(|e| wrap_step_err(e, step))? else {
                continue;
            };
            contributing += 1;
            ctc_sum += sample.ctc;
            ce_sum += sample.ce;
            joint_sum += sample.joint;
            for (name, grad) in sample.grads {
                let slot = acc
                    .entry(name)
                    .or_insert_with(|| vec![0f64; grad.numel()]);
                for (a, g) in slot.iter_mut().zip(grad.data()) {
                    *a += *g as f64;
                }
            }
        }
        if contributing == 0 {
            return Err(Error::Data(format!(
                "train_toy: every sample in the batch was CTC-infeasible at step {step}"
            )));
        }
        let inv = 1.0 / contributing as f64;
        let mut sq_norm = 0f64;
        for buf in acc.values_mut() {
            for v in buf.iter_mut() {
                *v *= inv;
                sq_norm += *v * *v;
            }
        }
        let norm = sq_norm.sqrt();
        let clip = cfg.optim.clip_norm as f64;
        let scale = if norm > clip { clip / norm } else { 1.0 };

        adam.begin_step();
        let lr = cfg.optim.lr_at(step);
        let optim = cfg.optim;
        model.visit_mut(&mut |name, param| {
            if let Some(buf) = acc.get(name) {
                let grad: Vec<f32> = buf.iter().map(|&g| (g * scale) as f32).collect();
                adam.update(&optim, lr, name, param, &grad);
            }
        });

        let record = LossRecord {
            step,
            ctc: ctc_sum / contributing as f64,
            ce: ce_sum / contributing as f64,
            joint: joint_sum / contributing as f64,
        };
        if !record.joint.is_finite() {
            return Err(Error::Numeric(format!(
                "train_toy: loss diverged at step {step} (joint {})",
                record.joint
            )));
        }
        curve.push(record);
    }
    Ok((model, curve))
}

/// Train a language model on raw transcripts (one per line semantics).
/// Cross entropy on next-token prediction, same optimizer family.
pub fn train_lm(
    transcripts: &[String],
    lm_cfg: &LmConfig,
    vocab: &Vocabulary,
    steps: usize,
    optim: &OptimConfig,
    seed: u64,
) -> Result<(LmWeights, Vec<f64>)> {
    optim.validate()?;
    if transcripts.is_empty() {
        return Err(Error::Data("train_lm: empty corpus".to_string()));
    }
    let sos = vocab.sos_eos();
    let sequences: Vec<Vec<usize>> = transcripts.iter().map(|t| vocab.encode(t)).collect();
    let mut weights = LmWeights::init(lm_cfg, vocab.size(), &mut rng::stream(seed, &["init", "lm"]))?;
    let mut adam = Adam::new();
    let mut losses = Vec::with_capacity(steps);

    for step in 1..=steps {
        let mut batch_rng = rng::stream(seed, &["lm_batch", &step.to_string()]);
        let batch: Vec<usize> = (0..optim.batch_size)
            .map(|_| batch_rng.gen_range(0..sequences.len()))
            .collect();

        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut loss_sum = 0f64;
        for &idx in &batch {
            let seq = &sequences[idx];
            let mut tokens = Vec::with_capacity(seq.len() + 1);
            tokens.push(sos);
            tokens.extend_from_slice(seq);
            let mut targets = seq.clone();
            targets.push(sos);

            let mut tape = Tape::new();
            let (logp, names) =
                lm_forward(&mut tape, &weights, "lm", &tokens, lm_cfg, sos, &mut FwdCtx::inference())
                    .map_err(|e| wrap_step_err(e, step))?;
            let loss = tape.ce_loss(logp, &targets, 0.0).map_err(|e| wrap_step_err(e, step))?;
            loss_sum += tape.value(loss).data()[0] as f64;
            let grads = tape.backward(loss)?;
            for (name, node) in names {
                let g = grads.get(node);
                let slot = acc.entry(name).or_insert_with(|| vec![0f64; g.numel()]);
                for (a, gv) in slot.iter_mut().zip(g.data()) {
                    *a += *gv as f64;
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        let mut sq_norm = 0f64;
        for buf in acc.values_mut() {
            for v in buf.iter_mut() {
                *v *= inv;
                sq_norm += *v * *v;
            }
        }
        let norm = sq_norm.sqrt();
        let clip = optim.clip_norm as f64;
        let scale = if norm > clip { clip / norm } else { 1.0 };
        adam.begin_step();
        let lr = optim.lr_at(step);
        weights.visit_mut("lm", &mut |name, param| {
            if let Some(buf) = acc.get(name) {
                let grad: Vec<f32> = buf.iter().map(|&g| (g * scale) as f32).collect();
                adam.update(optim, lr, name, param, &grad);
            }
        });
        let mean = loss_sum / batch.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("train_lm: loss diverged at step {step}")));
        }
        losses.push(mean);
    }
    Ok((weights, losses))
}

fn wrap_step_err(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests_support::toy_model_config;
    use crate::video::{synth_generate, SynthParams};

    fn synth_items(n: usize, vocab: &Vocabulary, seed: u64) -> Vec<TrainItem> {
        let params = SynthParams {
            side: 8,
            frames_per_token: 4,
            noise_sigma: 0.05,
            frame_rate: 25.0,
        };
        (0..n)
            .map(|i| {
                let mut r = rng::stream(seed, &["item", &i.to_string()]);
                let len = r.gen_range(2..=3);
                let toks: Vec<String> = (0..len)
                    .map(|_| {
                        let t = r.gen_range(2..vocab.size() - 1);
                        vocab.token(t).unwrap().to_string()
                    })
                    .collect();
                let (video, transcript) =
                    synth_generate(&toks, vocab, &params, &mut rng::stream(seed, &["v", &i.to_string()]))
                        .unwrap();
                TrainItem {
                    id: format!("utt{i:03}"),
                    video,
                    label: vocab.encode(&transcript),
                }
            })
            .collect()
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = toy_model_config();
        let vocab = Vocabulary::from_tokens(cfg.vocab.clone()).unwrap();
        let items = synth_items(4, &vocab, 11);
        let tc = TrainConfig {
            steps: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let (model, curve) = train_toy(&items, cfg.clone(), &tc).unwrap();
        assert!(curve.is_empty());
        let reference = VsrModel::init(cfg, 5).unwrap();
        let mut same = true;
        model.visit(&mut |name, t| {
            reference.visit(&mut |n2, t2| {
                if n2 == name && t != t2 {
                    same = false;
                }
            });
        });
        assert!(same, "0 steps must equal initialization");
    }

    #[test]
    fn same_seed_gives_bitwise_identical_curves() {
        let cfg = toy_model_config();
        let vocab = Vocabulary::from_tokens(cfg.vocab.clone()).unwrap();
        let items = synth_items(6, &vocab, 13);
        let tc = TrainConfig {
            steps: 4,
            seed: 9,
            optim: OptimConfig {
                batch_size: 2,
                ..OptimConfig::default()
            },
            ..TrainConfig::default()
        };
        let (_, c1) = train_toy(&items, cfg.clone(), &tc).unwrap();
        let (_, c2) = train_toy(&items, cfg, &tc).unwrap();
        assert_eq!(c1, c2);
    }

    #[test]
    fn short_run_reduces_loss() {
        let cfg = toy_model_config();
        let vocab = Vocabulary::from_tokens(cfg.vocab.clone()).unwrap();
        let items = synth_items(12, &vocab, 17);
        let tc = TrainConfig {
            steps: 30,
            seed: 3,
            optim: OptimConfig {
                batch_size: 4,
                lr_peak: 3e-3,
                warmup_steps: 10,
                ..OptimConfig::default()
            },
            ..TrainConfig::default()
        };
        let (_, curve) = train_toy(&items, cfg, &tc).unwrap();
        let first = curve.first().unwrap().joint;
        let last = curve.last().unwrap().joint;
        assert!(
            last < first,
            "loss should decrease: {first} -> {last}"
        );
    }

    #[test]
    fn lr_schedule_peaks_at_warmup() {
        let o = OptimConfig {
            lr_peak: 1.0,
            warmup_steps: 10,
            ..OptimConfig::default()
        };
        assert!((o.lr_at(5) - 0.5).abs() < 1e-6);
        assert!((o.lr_at(10) - 1.0).abs() < 1e-6);
        assert!((o.lr_at(40) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn lm_learns_alternation() {
        // "ababab...": after 'a' the model must prefer 'b' over 'a'.
        let vocab = Vocabulary::from_chars("ab").unwrap();
        let corpus: Vec<String> = (0..8).map(|_| "abababab".to_string()).collect();
        let lm_cfg = LmConfig {
            layers: 1,
            d_model: 16,
            heads: 2,
            ffn_dim: 32,
            tied_embeddings: true,
            dropout: 0.0,
        };
        let optim = OptimConfig {
            batch_size: 4,
            lr_peak: 5e-3,
            warmup_steps: 20,
            ..OptimConfig::default()
        };
        let (weights, losses) = train_lm(&corpus, &lm_cfg, &vocab, 200, &optim, 21).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let scorer = crate::model::lm::LmScorer::new(&weights, &lm_cfg, vocab.sos_eos(), 16).unwrap();
        let a = vocab.id("a").unwrap();
        let b = vocab.id("b").unwrap();
        let state = scorer.score_prefix(&[vocab.sos_eos(), a]).unwrap();
        assert!(
            state.next_logp()[b] > state.next_logp()[a],
            "p(b|a) must beat p(a|a): {:?}",
            state.next_logp()
        );
    }
}
