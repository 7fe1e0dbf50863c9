//! 3D-convolutional visual frontend: a stem convolution, a stack of residual
//! blocks with spatial-only max pooling, and a final spatial average pool
//! that leaves one feature vector per frame. Time length is preserved
//! end to end; all downsampling is spatial.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::video::VideoTensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Binder, Conv3dN, Conv3dW, VisitFn, VisitMutFn, NORM_EPS};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FrontendConfig {
    pub input_channels: usize,
    pub block_channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            input_channels: 1,
            block_channels: vec![32, 64, 64, 128, 256],
            kernel: 3,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 1 && self.input_channels != 3 {
            return Err(Error::Config("frontend: input_channels must be 1 or 3".to_string()));
        }
        if self.block_channels.is_empty() {
            return Err(Error::Config("frontend: at least one block required".to_string()));
        }
        if self.block_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("frontend: block channels must be >= 1".to_string()));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config("frontend: kernel must be odd".to_string()));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.block_channels.len()
    }

    /// Output feature width per frame.
    pub fn output_dim(&self) -> usize {
        *self.block_channels.last().expect("validated non-empty")
    }

    /// Spatial sizes after the stem and each block's pool, starting from `n`.
    /// Errors name the block whose pool would hit zero.
    pub fn spatial_trajectory(&self, n: usize) -> Result<Vec<usize>> {
        let mut sizes = vec![n];
        let mut s = n;
        for i in 0..self.num_blocks() {
            s /= 2;
            if s == 0 {
                return Err(Error::Config(format!(
                    "frontend: spatial size reaches 0 at block {i} (input {n})"
                )));
            }
            sizes.push(s);
        }
        Ok(sizes)
    }

    /// Zero-padding-affected frames per side: one per temporal conv layer.
    pub fn boundary_width(&self) -> usize {
        1 + 2 * self.num_blocks()
    }
}

#[derive(Clone, Debug)]
struct BlockW {
    conv1: Conv3dW,
    norm1: ChanNormW,
    conv2: Conv3dW,
    norm2: ChanNormW,
    proj: Option<Conv3dW>,
}

/// Per-channel affine for the channel normalization inside blocks.
#[derive(Clone, Debug)]
struct ChanNormW {
    gamma: Tensor,
    beta: Tensor,
}

impl ChanNormW {
    fn init(c: usize) -> Self {
        ChanNormW {
            gamma: Tensor::full(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
        }
    }

    fn bind(&self, b: &mut Binder, name: &str) -> ChanNormN {
        ChanNormN {
            gamma: b.bind(format!("{name}.gamma"), &self.gamma),
            beta: b.bind(format!("{name}.beta"), &self.beta),
        }
    }

    fn visit(&self, name: &str, f: VisitFn) {
        f(&format!("{name}.gamma"), &self.gamma);
        f(&format!("{name}.beta"), &self.beta);
    }

    fn visit_mut(&mut self, name: &str, f: VisitMutFn) {
        f(&format!("{name}.gamma"), &mut self.gamma);
        f(&format!("{name}.beta"), &mut self.beta);
    }
}

#[derive(Clone, Copy)]
struct ChanNormN {
    gamma: NodeId,
    beta: NodeId,
}

#[derive(Clone, Debug)]
pub struct FrontendWeights {
    stem: Conv3dW,
    blocks: Vec<BlockW>,
}

pub struct FrontendNodes {
    stem: Conv3dN,
    blocks: Vec<BlockN>,
}

struct BlockN {
    conv1: Conv3dN,
    norm1: ChanNormN,
    conv2: Conv3dN,
    norm2: ChanNormN,
    proj: Option<Conv3dN>,
}

impl FrontendWeights {
    pub fn init(config: &FrontendConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let stem = Conv3dW::init(config.block_channels[0], config.input_channels, k, rng);
        let mut blocks = Vec::with_capacity(config.num_blocks());
        let mut c_in = config.block_channels[0];
        for &c_out in &config.block_channels {
            let proj = if c_in != c_out {
                Some(Conv3dW::init(c_out, c_in, 1, rng))
            } else {
                None
            };
            blocks.push(BlockW {
                conv1: Conv3dW::init(c_out, c_in, k, rng),
                norm1: ChanNormW::init(c_out),
                conv2: Conv3dW::init(c_out, c_out, k, rng),
                norm2: ChanNormW::init(c_out),
                proj,
            });
            c_in = c_out;
        }
        Ok(FrontendWeights { stem, blocks })
    }

    pub fn bind(&self, b: &mut Binder, name: &str) -> FrontendNodes {
        FrontendNodes {
            stem: self.stem.bind(b, &format!("{name}.stem")),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, blk)| BlockN {
                    conv1: blk.conv1.bind(b, &format!("{name}.block{i}.conv1")),
                    norm1: blk.norm1.bind(b, &format!("{name}.block{i}.norm1")),
                    conv2: blk.conv2.bind(b, &format!("{name}.block{i}.conv2")),
                    norm2: blk.norm2.bind(b, &format!("{name}.block{i}.norm2")),
                    proj: blk.proj.as_ref().map(|p| p.bind(b, &format!("{name}.block{i}.proj"))),
                })
                .collect(),
        }
    }

    pub fn visit(&self, name: &str, f: VisitFn) {
        self.stem.visit(&format!("{name}.stem"), f);
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.conv1.visit(&format!("{name}.block{i}.conv1"), f);
            blk.norm1.visit(&format!("{name}.block{i}.norm1"), f);
            blk.conv2.visit(&format!("{name}.block{i}.conv2"), f);
            blk.norm2.visit(&format!("{name}.block{i}.norm2"), f);
            if let Some(p) = &blk.proj {
                p.visit(&format!("{name}.block{i}.proj"), f);
            }
        }
    }

    pub fn visit_mut(&mut self, name: &str, f: VisitMutFn) {
        self.stem.visit_mut(&format!("{name}.stem"), f);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.conv1.visit_mut(&format!("{name}.block{i}.conv1"), f);
            blk.norm1.visit_mut(&format!("{name}.block{i}.norm1"), f);
            blk.conv2.visit_mut(&format!("{name}.block{i}.conv2"), f);
            blk.norm2.visit_mut(&format!("{name}.block{i}.norm2"), f);
            if let Some(p) = &mut blk.proj {
                p.visit_mut(&format!("{name}.block{i}.proj"), f);
            }
        }
    }
}

/// Run the frontend: `x` is `[c, t, n, n]` on the tape; returns `[t, d_out]`.
pub fn frontend_forward(
    tape: &mut Tape,
    nodes: &FrontendNodes,
    x: NodeId,
    config: &FrontendConfig,
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[0] != config.input_channels {
        return Err(Error::shape(
            "frontend",
            0,
            format!("expected [{}, t, n, n], got {shape:?}", config.input_channels),
        ));
    }
    let pad = (config.kernel - 1) / 2;
    let pads = [pad, pad, pad];
    let ones = [1, 1, 1];
    let mut h = tape.conv3d(x, nodes.stem.k, Some(nodes.stem.b), ones, pads)?;
    for (i, blk) in nodes.blocks.iter().enumerate() {
        let mut a = tape.conv3d(h, blk.conv1.k, Some(blk.conv1.b), ones, pads)?;
        a = tape.channel_norm(a, blk.norm1.gamma, blk.norm1.beta, NORM_EPS)?;
        a = tape.relu(a)?;
        a = tape.conv3d(a, blk.conv2.k, Some(blk.conv2.b), ones, pads)?;
        a = tape.channel_norm(a, blk.norm2.gamma, blk.norm2.beta, NORM_EPS)?;
        let residual = match &blk.proj {
            Some(p) => tape.conv3d(h, p.k, Some(p.b), ones, [0, 0, 0])?,
            None => h,
        };
        let joined = tape.add(a, residual)?;
        let activated = tape.relu(joined)?;
        h = tape.max_pool_hw(activated).map_err(|e| match e {
            Error::Shape { .. } => Error::Config(format!(
                "frontend: spatial size reaches 0 at block {i}"
            )),
            other => other,
        })?;
    }
    let pooled = tape.mean_hw(h)?; // [c_last, t]
    tape.transpose(pooled) // [t, d_out]
}

/// Convenience wrapper: weights straight to features for one clip.
pub fn frontend_extract(
    weights: &FrontendWeights,
    config: &FrontendConfig,
    video: &VideoTensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let nodes = weights.bind(&mut binder, "frontend");
    let x = binder.tape.leaf(video.to_model_input());
    let out = frontend_forward(&mut tape, &nodes, x, config)?;
    Ok(tape.value(out).clone())
}

/// True iff rotating the input forward by `s` frames shifts interior output
/// frames by `s`, up to `tol_rel` times the RMS of the compared features.
///
/// The shift is circular so the input frame multiset is unchanged. Exact
/// equality is still unattainable: the per-channel sample statistics include
/// the conv boundary frames, whose values differ between the two runs, and
/// that couples every frame at O(1/t). A genuinely misaligned time axis
/// shows errors at the full feature scale, an order of magnitude above that
/// coupling, so a relative tolerance of a few percent separates the cases.
/// Boundary width is one frame per temporal conv layer per side; frames
/// near the wrap seam are excluded along with them.
pub fn receptive_shift_check(
    weights: &FrontendWeights,
    config: &FrontendConfig,
    video: &VideoTensor,
    s: usize,
    tol_rel: f32,
) -> Result<bool> {
    let t = video.t();
    let b = config.boundary_width();
    if t < 2 * b + 1 + s {
        return Err(Error::Config(format!(
            "receptive_shift_check: need at least {} frames, got {t}",
            2 * b + 1 + s
        )));
    }
    let base = frontend_extract(weights, config, video)?;
    if s == 0 {
        return Ok(true);
    }
    let (h, w, c) = (video.height(), video.width(), video.channels());
    let frame = h * w * c;
    let src = video.frames().data();
    let mut shifted = vec![0f32; t * frame];
    shifted[s * frame..].copy_from_slice(&src[..(t - s) * frame]);
    shifted[..s * frame].copy_from_slice(&src[(t - s) * frame..]);
    let shifted_video = VideoTensor::new(
        Tensor::new(vec![t, h, w, c], shifted)?,
        video.frame_rate,
    )?;
    let out = frontend_extract(weights, config, &shifted_video)?;
    let d = config.output_dim();
    let mut worst = 0f32;
    let mut sumsq = 0f64;
    let mut count = 0usize;
    for ti in (b + s)..(t - b) {
        for j in 0..d {
            let diff = (out.data()[ti * d + j] - base.data()[(ti - s) * d + j]).abs();
            worst = worst.max(diff);
            sumsq += (base.data()[(ti - s) * d + j] as f64).powi(2);
            count += 1;
        }
    }
    let rms = (sumsq / count.max(1) as f64).sqrt() as f32;
    Ok(worst <= tol_rel * rms.max(f32::EPSILON))
}
