//! Central finite-difference validation of tape gradients.
//!
//! The check perturbs every element of every parameter by `±step`, rebuilds
//! the loss through a caller-supplied closure, and compares the two-sided
//! difference quotient against the analytic gradient. Pass criterion per
//! element: `|analytic - fd| <= rtol * max(|analytic|, |fd|) + atol`. The
//! absolute floor absorbs f32 rounding of the loss, which dominates when the
//! true gradient is near zero.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub struct GradCheckReport {
    pub pass: bool,
    pub checked: usize,
    /// Elements whose perturbed evaluations crossed a relu/max-pool branch
    /// boundary; the quotient is meaningless there and the element is not
    /// counted. Callers bound this fraction.
    pub skipped_kinks: usize,
    pub worst_abs_err: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_fd: f64,
}

impl GradCheckReport {
    pub fn skipped_fraction(&self) -> f64 {
        let total = self.checked + self.skipped_kinks;
        if total == 0 {
            0.0
        } else {
            self.skipped_kinks as f64 / total as f64
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f32,
    pub rtol: f64,
    pub atol: f64,
    /// Combine quotients at `step` and `step/2` as `(4*q(h/2) - q(h))/3`,
    /// cancelling the h^2 truncation term. Used for deep compositions where
    /// no single step satisfies both the noise floor (~1/h) and curvature
    /// (~h^2) at once.
    pub richardson: bool,
}

/// `build` receives a fresh tape and the current parameter values, assembles
/// a scalar loss, and returns it together with one node per parameter from
/// which the analytic gradient is read (usually the `tape.param` leaves the
/// closure created for them; for weight containers, the nodes their binder
/// produced).
pub fn check_gradients<F>(
    build: F,
    params: &[Tensor],
    opts: FdOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<(NodeId, Vec<NodeId>)>,
{
    let FdOptions { step, rtol, atol, richardson } = opts;
    let eval = |tensors: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let (loss, _) = build(&mut tape, tensors)?;
        // f64 readout of the final reduction: the f32-rounded loss would put
        // the quotient's noise floor right at the tolerance.
        Ok((tape.scalar_value(loss), tape.branch_signature()))
    };

    // Analytic gradients once.
    let mut tape = Tape::new();
    let (loss, grad_nodes) = build(&mut tape, params)?;
    if grad_nodes.len() != params.len() {
        return Err(Error::Config(format!(
            "gradcheck: build returned {} gradient nodes for {} parameters",
            grad_nodes.len(),
            params.len()
        )));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = grad_nodes.iter().map(|&n| grads.get(n)).collect();

    let mut report = GradCheckReport {
        pass: true,
        checked: 0,
        skipped_kinks: 0,
        worst_abs_err: 0.0,
        worst_param: 0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_fd: 0.0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst_ratio = 0f64;
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let (up, sig_up) = eval(&work)?;
            work[p].data_mut()[i] = orig - step;
            let (down, sig_down) = eval(&work)?;
            let mut crossed = sig_up != sig_down;
            let mut fd = (up - down) / (2.0 * step as f64);
            if richardson && !crossed {
                let half = step / 2.0;
                work[p].data_mut()[i] = orig + half;
                let (up2, sig_up2) = eval(&work)?;
                work[p].data_mut()[i] = orig - half;
                let (down2, sig_down2) = eval(&work)?;
                crossed = sig_up2 != sig_down2 || sig_up2 != sig_up;
                let fd_half = (up2 - down2) / (2.0 * half as f64);
                fd = (4.0 * fd_half - fd) / 3.0;
            }
            work[p].data_mut()[i] = orig;
            if crossed {
                report.skipped_kinks += 1;
                continue;
            }
            let a = analytic[p].data()[i] as f64;
            let err = (a - fd).abs();
            let tol = rtol * a.abs().max(fd.abs()) + atol;
            report.checked += 1;
            // Track the element closest to (or furthest past) its tolerance.
            if err / tol > worst_ratio {
                worst_ratio = err / tol;
                report.worst_abs_err = err;
                report.worst_param = p;
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_fd = fd;
            }
            if err > tol {
                report.pass = false;
            }
        }
    }
    Ok(report)
}

pub fn assert_report(report: &GradCheckReport, what: &str) {
    assert!(
        report.pass,
        "{what}: gradient check failed at param {} index {}: analytic {} vs fd {} (abs err {:.3e}, {} checked)",
        report.worst_param,
        report.worst_index,
        report.worst_analytic,
        report.worst_fd,
        report.worst_abs_err,
        report.checked
    );
}

/// Named finite-difference suites shared between unit tests and the
/// acceptance gate: every registered op, the composed blocks, and the full
/// joint model at toy size. Step 1e-3, relative 1e-3, absolute floor 1e-4.
pub mod suite {
    use super::{check_gradients, GradCheckReport};
    use crate::error::Result;
    use crate::loss::{joint_loss, JointLossConfig, JointLossOutcome};
    use crate::model::decoder::{decoder_forward, DecoderConfig, DecoderWeights};
    use crate::model::encoder::{
        cgmlp_forward, encoder_forward, CgmlpW, EncoderConfig, EncoderVariant, EncoderWeights,
    };
    use crate::model::frontend::{frontend_forward, FrontendConfig, FrontendWeights};
    use crate::model::layers::{multi_head_attention, AttnMask, AttnW, Binder, FwdCtx};
    use crate::model::lm::{lm_forward, LmConfig, LmWeights};
    use crate::model::{ModelConfig, VsrModel};
    use crate::rng::stream;
    use crate::tape::{CtcOutcome, NodeId, Tape};
    use crate::tensor::Tensor;
    use crate::vocab::Vocabulary;

    pub struct SuiteResult {
        pub name: &'static str,
        pub report: GradCheckReport,
    }

    fn rand(shape: &[usize], seed: u64, tag: &str) -> Tensor {
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut stream(seed, &["gc", tag]))
    }

    /// Uniform values kept away from zero, for ops with kinks at the origin.
    fn rand_off_zero(shape: &[usize], seed: u64, tag: &str) -> Tensor {
        let mut t = rand(shape, seed, tag);
        for v in t.data_mut() {
            *v += 0.3 * v.signum();
        }
        t
    }

    /// Composed-block checks: Richardson-extrapolated quotients at 5e-3.
    /// Intermediate f32 quantization puts a few 1e-6 of noise on each loss
    /// evaluation, which divided by 2h sets the absolute floor; the
    /// extrapolation removes the h^2 curvature term that a step this large
    /// would otherwise leak into sharply curved coordinates.
    const COMPOSED_OPTS: super::FdOptions = super::FdOptions {
        step: 8e-3,
        rtol: 1e-3,
        atol: 5e-4,
        richardson: true,
    };

    /// Check an op built directly from `tape.param` leaves.
    fn run_simple<F>(name: &'static str, build: F, params: &[Tensor]) -> Result<SuiteResult>
    where
        F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    {
        let report = check_gradients(
            |tape, values| {
                let nodes: Vec<NodeId> = values.iter().map(|t| tape.param(t.clone())).collect();
                let loss = build(tape, &nodes)?;
                Ok((loss, nodes))
            },
            params,
            super::FdOptions { step: 1e-3, rtol: 1e-3, atol: 1e-4, richardson: false },
        )?;
        Ok(SuiteResult { name, report })
    }

    /// Finite-difference checks for every elementary tape op, on random
    /// tensors of at most 64 elements.
    pub fn elementary_ops(seed: u64) -> Result<Vec<SuiteResult>> {
        let mut out = Vec::new();

        out.push(run_simple(
            "add_mul_scale",
            |t, p| {
                let a = t.mul(p[0], p[1])?;
                let b = t.scale(a, 1.7)?;
                let c = t.add(b, p[2])?;
                t.sum_all(c)
            },
            &[rand(&[3, 5], seed, "a"), rand(&[3, 5], seed, "b"), rand(&[3, 5], seed, "c")],
        )?);

        out.push(run_simple(
            "linear",
            |t, p| {
                let y = t.linear(p[0], p[1], Some(p[2]))?;
                t.sum_all(y)
            },
            &[rand(&[4, 6], seed, "x"), rand(&[5, 6], seed, "w"), rand(&[5], seed, "b")],
        )?);

        out.push(run_simple(
            "matmul_transpose",
            |t, p| {
                let bt = t.transpose(p[1])?;
                let y = t.matmul(p[0], bt)?;
                t.sum_all(y)
            },
            &[rand(&[3, 4], seed, "ma"), rand(&[5, 4], seed, "mb")],
        )?);

        out.push(run_simple(
            "conv3d",
            |t, p| {
                let y = t.conv3d(p[0], p[1], Some(p[2]), [1, 1, 1], [1, 1, 1])?;
                t.sum_all(y)
            },
            &[
                rand(&[2, 3, 3, 3], seed, "cx"),
                rand(&[2, 2, 3, 3, 3], seed, "ck"),
                rand(&[2], seed, "cb"),
            ],
        )?);

        out.push(run_simple(
            "conv3d_strided",
            |t, p| {
                let y = t.conv3d(p[0], p[1], None, [1, 2, 2], [0, 1, 1])?;
                t.sum_all(y)
            },
            &[rand(&[1, 2, 5, 5], seed, "sx"), rand(&[2, 1, 1, 3, 3], seed, "sk")],
        )?);

        out.push(run_simple(
            "dwconv1d",
            |t, p| {
                let y = t.dwconv1d(p[0], p[1], Some(p[2]))?;
                t.sum_all(y)
            },
            &[rand(&[6, 4], seed, "dx"), rand(&[4, 3], seed, "dk"), rand(&[4], seed, "db")],
        )?);

        out.push(run_simple(
            "max_pool_hw",
            |t, p| {
                let y = t.max_pool_hw(p[0])?;
                t.sum_all(y)
            },
            // Off-zero spread values avoid argmax flips under the fd step.
            &[rand_off_zero(&[2, 2, 4, 4], seed, "px")],
        )?);

        out.push(run_simple(
            "mean_hw",
            |t, p| {
                let y = t.mean_hw(p[0])?;
                t.sum_all(y)
            },
            &[rand(&[2, 3, 3, 2], seed, "mx")],
        )?);

        out.push(run_simple(
            "layer_norm",
            |t, p| {
                let y = t.layer_norm(p[0], p[1], p[2], 1e-5)?;
                let w = t.mul(y, p[3])?;
                t.sum_all(w)
            },
            &[
                rand(&[4, 6], seed, "lx"),
                rand(&[6], seed, "lg"),
                rand(&[6], seed, "lb"),
                rand(&[4, 6], seed, "lw"),
            ],
        )?);

        out.push(run_simple(
            "channel_norm",
            |t, p| {
                let y = t.channel_norm(p[0], p[1], p[2], 1e-5)?;
                let w = t.mul(y, p[3])?;
                t.sum_all(w)
            },
            &[
                rand(&[2, 2, 3, 2], seed, "nx"),
                rand(&[2], seed, "ng"),
                rand(&[2], seed, "nb"),
                rand(&[2, 2, 3, 2], seed, "nw"),
            ],
        )?);

        out.push(run_simple(
            "softmax",
            |t, p| {
                let y = t.softmax(p[0])?;
                let w = t.mul(y, p[1])?;
                t.sum_all(w)
            },
            &[rand(&[3, 6], seed, "sx"), rand(&[3, 6], seed, "sw")],
        )?);

        out.push(run_simple(
            "log_softmax",
            |t, p| {
                let y = t.log_softmax(p[0])?;
                let w = t.mul(y, p[1])?;
                t.sum_all(w)
            },
            &[rand(&[3, 6], seed, "gx"), rand(&[3, 6], seed, "gw")],
        )?);

        out.push(run_simple(
            "relu",
            |t, p| {
                let y = t.relu(p[0])?;
                t.sum_all(y)
            },
            &[rand_off_zero(&[4, 8], seed, "rx")],
        )?);

        out.push(run_simple(
            "gelu",
            |t, p| {
                let y = t.gelu(p[0])?;
                t.sum_all(y)
            },
            &[rand(&[4, 8], seed, "gex")],
        )?);

        out.push(run_simple(
            "swish",
            |t, p| {
                let y = t.swish(p[0])?;
                t.sum_all(y)
            },
            &[rand(&[4, 8], seed, "swx")],
        )?);

        out.push(run_simple(
            "sigmoid",
            |t, p| {
                let y = t.sigmoid(p[0])?;
                t.sum_all(y)
            },
            &[rand(&[4, 8], seed, "six")],
        )?);

        out.push(run_simple(
            "embedding",
            |t, p| {
                let y = t.embedding(p[0], &[0, 2, 1, 2])?;
                t.sum_all(y)
            },
            &[rand(&[3, 5], seed, "em")],
        )?);

        out.push(run_simple(
            "concat_slice",
            |t, p| {
                let cat = t.concat_last(p[0], p[1])?;
                let sl = t.slice_last(cat, 2, 4)?;
                t.sum_all(sl)
            },
            &[rand(&[3, 3], seed, "ca"), rand(&[3, 4], seed, "cb")],
        )?);

        out.push(run_simple(
            "mean_all",
            |t, p| t.mean_all(p[0]),
            &[rand(&[4, 4], seed, "me")],
        )?);

        out.push(run_simple(
            "ctc_loss",
            |t, p| {
                let lp = t.log_softmax(p[0])?;
                match t.ctc_loss(lp, &[1, 2, 1], 0)? {
                    CtcOutcome::Feasible(id) => Ok(id),
                    CtcOutcome::Infeasible => unreachable!("six frames carry three tokens"),
                }
            },
            &[rand(&[6, 4], seed, "ctc")],
        )?);

        out.push(run_simple(
            "ce_loss",
            |t, p| {
                let lp = t.log_softmax(p[0])?;
                t.ce_loss(lp, &[1, 3, 0], 0.1)
            },
            &[rand(&[3, 4], seed, "ce")],
        )?);

        Ok(out)
    }

    /// Flatten a weight container into tensors (visit order).
    fn collect_params<V>(weights: &V, visit: impl Fn(&V, &mut dyn FnMut(&str, &Tensor))) -> Vec<Tensor> {
        let mut out = Vec::new();
        visit(weights, &mut |_, t| out.push(t.clone()));
        out
    }

    /// Composed blocks: attention, cgMLP, each encoder variant, the decoder,
    /// the LM, and the visual frontend, all at toy dimensions.
    pub fn composed_blocks(seed: u64) -> Result<Vec<SuiteResult>> {
        let mut out = Vec::new();

        // Multi-head attention with a causal mask.
        {
            let w = AttnW::init(8, &mut stream(seed, &["gc", "attnw"]));
            let mut params = vec![rand(&[4, 8], seed, "attnx"), rand(&[4, 8], seed, "attnp")];
            params.extend(collect_params(&w, |w, f| w.visit("attn", f)));
            let report = check_gradients(
                |tape, values| {
                    let x = tape.param(values[0].clone());
                    let probe = tape.param(values[1].clone());
                    let mut rebuilt = w.clone();
                    let mut idx = 2;
                    rebuilt.visit_mut("attn", &mut |_, slot| {
                        *slot = values[idx].clone();
                        idx += 1;
                    });
                    let mut binder = Binder::new(tape);
                    let wn = rebuilt.bind(&mut binder, "attn");
                    let mut nodes = vec![x, probe];
                    nodes.extend(binder.into_names().into_iter().map(|(_, n)| n));
                    let mask = AttnMask::causal(4);
                    let y = multi_head_attention(tape, x, x, &wn, 2, Some(&mask))?;
                    let z = tape.mul(y, probe)?;
                    Ok((tape.sum_all(z)?, nodes))
                },
                &params,
                COMPOSED_OPTS,
            )?;
            out.push(SuiteResult { name: "multi_head_attention", report });
        }

        // cgMLP block.
        {
            let cfg = EncoderConfig {
                variant: EncoderVariant::Branchformer,
                layers: 1,
                d_model: 6,
                heads: 2,
                ffn_dim: 12,
                cgmlp_expansion: 2,
                depthwise_kernel: 3,
                dropout: 0.0,
                use_posenc: false,
                branch_mode: Default::default(),
                input_dim: 6,
            };
            let cg = CgmlpW::init(&cfg, &mut stream(seed, &["gc", "cgw"]));
            let mut params = vec![rand(&[5, 6], seed, "cgx")];
            params.extend(collect_params(&cg, |w, f| w.visit("cg", f)));
            let report = check_gradients(
                |tape, values| {
                    let x = tape.param(values[0].clone());
                    let mut rebuilt = cg.clone();
                    let mut idx = 1;
                    rebuilt.visit_mut("cg", &mut |_, slot| {
                        *slot = values[idx].clone();
                        idx += 1;
                    });
                    let mut binder = Binder::new(tape);
                    let n = rebuilt.bind(&mut binder, "cg");
                    let mut nodes = vec![x];
                    nodes.extend(binder.into_names().into_iter().map(|(_, nid)| nid));
                    let y = cgmlp_forward(tape, x, &n)?;
                    Ok((tape.sum_all(y)?, nodes))
                },
                &params,
                COMPOSED_OPTS,
            )?;
            out.push(SuiteResult { name: "cgmlp", report });
        }

        // Encoder variants end to end (input projection through final norm).
        for (name, variant) in [
            ("encoder_conformer", EncoderVariant::Conformer),
            ("encoder_branchformer", EncoderVariant::Branchformer),
            ("encoder_e_branchformer", EncoderVariant::EBranchformer),
        ] {
            let cfg = EncoderConfig {
                variant,
                layers: 2,
                d_model: 8,
                heads: 2,
                ffn_dim: 12,
                cgmlp_expansion: 2,
                depthwise_kernel: 3,
                dropout: 0.0,
                use_posenc: true,
                branch_mode: Default::default(),
                input_dim: 4,
            };
            let weights = EncoderWeights::init(&cfg, &mut stream(seed, &["gc", name]))?;
            let mut params = vec![rand(&[5, 4], seed, "ef"), rand(&[5, 8], seed, "ep")];
            params.extend(collect_params(&weights, |w, f| w.visit("enc", f)));
            let report = check_gradients(
                |tape, values| {
                    let feats = tape.param(values[0].clone());
                    let probe = tape.param(values[1].clone());
                    let mut rebuilt = weights.clone();
                    let mut idx = 2;
                    rebuilt.visit_mut("enc", &mut |_, slot| {
                        *slot = values[idx].clone();
                        idx += 1;
                    });
                    let mut binder = Binder::new(tape);
                    let nodes_enc = rebuilt.bind(&mut binder, "enc");
                    let mut nodes = vec![feats, probe];
                    nodes.extend(binder.into_names().into_iter().map(|(_, nid)| nid));
                    let y = encoder_forward(tape, &nodes_enc, feats, &cfg, &mut FwdCtx::inference())?;
                    let z = tape.mul(y, probe)?;
                    Ok((tape.sum_all(z)?, nodes))
                },
                &params,
                COMPOSED_OPTS,
            )?;
            out.push(SuiteResult { name, report });
        }

        // Decoder with cross attention, CE loss head.
        {
            let cfg = DecoderConfig {
                layers: 2,
                heads: 2,
                ffn_dim: 12,
                d_model: 8,
                dropout: 0.0,
            };
            let weights = DecoderWeights::init(&cfg, 6, &mut stream(seed, &["gc", "dec"]))?;
            let mut params = vec![rand(&[4, 8], seed, "denc")];
            params.extend(collect_params(&weights, |w, f| w.visit("dec", f)));
            let report = check_gradients(
                |tape, values| {
                    let enc = tape.param(values[0].clone());
                    let mut rebuilt = weights.clone();
                    let mut idx = 1;
                    rebuilt.visit_mut("dec", &mut |_, slot| {
                        *slot = values[idx].clone();
                        idx += 1;
                    });
                    let mut binder = Binder::new(tape);
                    let nodes_dec = rebuilt.bind(&mut binder, "dec");
                    let mut nodes = vec![enc];
                    nodes.extend(binder.into_names().into_iter().map(|(_, nid)| nid));
                    let lp = decoder_forward(tape, &nodes_dec, &[5, 2, 3], enc, &cfg, 5, &mut FwdCtx::inference())?;
                    let loss = tape.ce_loss(lp, &[2, 3, 5], 0.1)?;
                    Ok((loss, nodes))
                },
                &params,
                COMPOSED_OPTS,
            )?;
            out.push(SuiteResult { name: "decoder", report });
        }

        // LM with tied embeddings.
        {
            let cfg = LmConfig {
                layers: 2,
                d_model: 8,
                heads: 2,
                ffn_dim: 12,
                tied_embeddings: true,
                dropout: 0.0,
            };
            let weights = LmWeights::init(&cfg, 6, &mut stream(seed, &["gc", "lm"]))?;
            let params = collect_params(&weights, |w, f| w.visit("lm", f));
            let report = check_gradients(
                |tape, values| {
                    let mut rebuilt = weights.clone();
                    let mut idx = 0;
                    rebuilt.visit_mut("lm", &mut |_, slot| {
                        *slot = values[idx].clone();
                        idx += 1;
                    });
                    let (lp, names) =
                        lm_forward(tape, &rebuilt, "lm", &[5, 2, 3, 2], &cfg, 5, &mut FwdCtx::inference())?;
                    let loss = tape.ce_loss(lp, &[2, 3, 2, 5], 0.0)?;
                    Ok((loss, names.into_iter().map(|(_, n)| n).collect()))
                },
                &params,
                COMPOSED_OPTS,
            )?;
            out.push(SuiteResult { name: "lm", report });
        }

        // Visual frontend, two blocks, 1x6x8x8 input.
        {
            let cfg = FrontendConfig {
                input_channels: 1,
                block_channels: vec![2, 4],
                kernel: 3,
            };
            let weights = FrontendWeights::init(&cfg, &mut stream(seed, &["gc", "fe"]))?;
            let mut params = vec![
                Tensor::rand_uniform(&[1, 6, 8, 8], 0.05, 0.95, &mut stream(seed, &["gc", "fev"])),
                rand(&[6, 4], seed, "fep"),
            ];
            params.extend(collect_params(&weights, |w, f| w.visit("fe", f)));
            let report = check_gradients(
                |tape, values| {
                    let video = tape.param(values[0].clone());
                    let probe = tape.param(values[1].clone());
                    let mut rebuilt = weights.clone();
                    let mut idx = 2;
                    rebuilt.visit_mut("fe", &mut |_, slot| {
                        *slot = values[idx].clone();
                        idx += 1;
                    });
                    let mut binder = Binder::new(tape);
                    let nodes_fe = rebuilt.bind(&mut binder, "fe");
                    let mut nodes = vec![video, probe];
                    nodes.extend(binder.into_names().into_iter().map(|(_, nid)| nid));
                    let feats = frontend_forward(tape, &nodes_fe, video, &cfg)?;
                    let z = tape.mul(feats, probe)?;
                    Ok((tape.sum_all(z)?, nodes))
                },
                &params,
                COMPOSED_OPTS,
            )?;
            out.push(SuiteResult { name: "frontend", report });
        }

        Ok(out)
    }

    /// The composed toy model of the acceptance gate: 2-block frontend,
    /// 2-layer encoder, 2-layer decoder, d_model 8, joint loss end to end.
    pub fn full_model(seed: u64) -> Result<SuiteResult> {
        let vocab = Vocabulary::from_chars("abc")?;
        let config = ModelConfig {
            vocab: vocab.tokens().to_vec(),
            frontend: FrontendConfig {
                input_channels: 1,
                block_channels: vec![2, 4],
                kernel: 3,
            },
            encoder: EncoderConfig {
                variant: EncoderVariant::EBranchformer,
                layers: 2,
                d_model: 8,
                heads: 2,
                ffn_dim: 12,
                cgmlp_expansion: 2,
                depthwise_kernel: 3,
                dropout: 0.0,
                use_posenc: true,
                branch_mode: Default::default(),
                input_dim: 4,
            },
            decoder: DecoderConfig {
                layers: 2,
                heads: 2,
                ffn_dim: 12,
                d_model: 8,
                dropout: 0.0,
            },
            lm: None,
        };
        let model = VsrModel::init(config, seed)?;
        let label = vec![vocab.id("a").unwrap(), vocab.id("c").unwrap()];
        let loss_cfg = JointLossConfig::default();

        let mut params = vec![Tensor::rand_uniform(
            &[1, 6, 8, 8],
            0.05,
            0.95,
            &mut stream(seed, &["gc", "vid"]),
        )];
        model.visit(&mut |_, t| params.push(t.clone()));

        let report = check_gradients(
            |tape, values| {
                let mut m = VsrModel::init(model.config.clone(), seed)?;
                let mut idx = 1;
                m.visit_mut(&mut |_, slot| {
                    *slot = values[idx].clone();
                    idx += 1;
                });
                let input = tape.param(values[0].clone());
                let (bound, names) = m.bind_for_training(tape);
                let mut nodes = vec![input];
                nodes.extend(names.into_iter().map(|(_, n)| n));
                match joint_loss(tape, &bound, &m.config, input, &label, &loss_cfg, &mut FwdCtx::inference())? {
                    JointLossOutcome::Feasible { loss, .. } => Ok((loss, nodes)),
                    JointLossOutcome::CtcInfeasible => unreachable!("six frames carry two tokens"),
                }
            },
            &params,
            COMPOSED_OPTS,
        )?;
        Ok(SuiteResult { name: "full_model_joint_loss", report })
    }
}
