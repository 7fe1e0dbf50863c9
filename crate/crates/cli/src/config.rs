//! Run configuration: one human-readable JSON document covering synthesis,
//! augmentation, model dims, training, and decoding. Every field has a
//! default, so a partial document (or none) works.

use serde::{Deserialize, Serialize};
use std::path::Path;
use vsr_core::decode::DecodeParams;
use vsr_core::error::{Error, Result};
use vsr_core::loss::JointLossConfig;
use vsr_core::model::decoder::DecoderConfig;
use vsr_core::model::encoder::EncoderConfig;
use vsr_core::model::frontend::FrontendConfig;
use vsr_core::model::lm::LmConfig;
use vsr_core::model::ModelConfig;
use vsr_core::train::OptimConfig;
use vsr_core::video::{AugmentPolicy, SynthParams};
use vsr_core::vocab::Vocabulary;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub train_count: usize,
    pub dev_count: usize,
    /// One real token per character.
    pub vocab: String,
    pub side: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f32,
    pub min_len: usize,
    pub max_len: usize,
    pub frame_rate: f32,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            train_count: 200,
            dev_count: 50,
            vocab: "abcdefgh".to_string(),
            side: 32,
            frames_per_token: 4,
            noise_sigma: 0.05,
            min_len: 3,
            max_len: 8,
            frame_rate: 25.0,
        }
    }
}

impl SynthSection {
    pub fn params(&self) -> SynthParams {
        SynthParams {
            side: self.side,
            frames_per_token: self.frames_per_token,
            noise_sigma: self.noise_sigma,
            frame_rate: self.frame_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab.is_empty() {
            return Err(Error::Config("synth: vocab must not be empty".to_string()));
        }
        if self.min_len == 0 || self.max_len < self.min_len {
            return Err(Error::Config("synth: need 1 <= min_len <= max_len".to_string()));
        }
        if self.frames_per_token < 2 {
            return Err(Error::Config("synth: frames_per_token must be >= 2".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub lm: Option<LmConfig>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            frontend: FrontendConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            lm: Some(LmConfig::default()),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub steps: usize,
    pub joint: JointLossConfig,
    pub optim: OptimConfig,
    /// Apply the augment policy on the fly during training.
    pub dynamic_augment: bool,
    /// Language-model training steps on the manifest transcripts; 0 skips
    /// LM training (decoding with lm_weight > 0 then needs another source).
    pub lm_steps: usize,
    pub lm_optim: OptimConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 500,
            joint: JointLossConfig::default(),
            optim: OptimConfig::default(),
            dynamic_augment: false,
            lm_steps: 300,
            lm_optim: OptimConfig {
                lr_peak: 3e-3,
                ..OptimConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Center-crop side applied by `augment`; omitted means no crop.
    pub crop: Option<usize>,
    pub speed_rates: Vec<f64>,
    pub synth: SynthSection,
    pub augment: AugmentPolicy,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            crop: None,
            speed_rates: vec![0.9, 1.0, 1.1],
            synth: SynthSection::default(),
            augment: AugmentPolicy::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            decode: DecodeParams::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let config: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Data(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.augment.validate()?;
        self.decode.validate()?;
        self.train.joint.validate()?;
        self.train.optim.validate()?;
        if self.speed_rates.is_empty() {
            return Err(Error::Config("speed_rates must not be empty".to_string()));
        }
        if self.speed_rates.iter().any(|&r| r <= 0.0) {
            return Err(Error::Config("speed rates must be > 0".to_string()));
        }
        // Model sections are validated against each other when assembled.
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_chars(&self.synth.vocab)
    }

    /// Assemble the full model config with the vocabulary derived from the
    /// synthesis section.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let vocab = self.vocabulary()?;
        let config = ModelConfig {
            vocab: vocab.tokens().to_vec(),
            frontend: self.model.frontend.clone(),
            encoder: self.model.encoder.clone(),
            decoder: self.model.decoder.clone(),
            lm: self.model.lm.clone(),
        };
        config.validate()?;
        Ok(config)
    }
}
