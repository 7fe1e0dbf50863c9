//! Visual speech recognition toolkit.
//!
//! Everything runs on the CPU over a small dense-tensor engine with
//! reverse-mode autodiff, so the full pipeline — synthetic lip-video
//! generation, multi-scale cropping, speed perturbation, dynamic
//! augmentation, a 3D-convolutional visual frontend, interchangeable
//! Conformer/Branchformer-family encoders, a Transformer decoder and
//! language model, joint CTC/attention training, beam search with shallow
//! fusion, ROVER system combination, and CER scoring — is reproducible
//! bit-for-bit from a seed.

pub mod ckpt;
pub mod decode;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod video;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
