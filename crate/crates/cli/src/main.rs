//! Command surface for the VSR toolkit.
//!
//! Exit codes: 0 ok; 2 usage or configuration error; 3 data error
//! (missing/corrupt files, mismatched utterance sets); 4 numeric failure.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use vsr_core::decode::DecodeParams;
use vsr_core::error::Error;

#[derive(Parser)]
#[command(name = "vsr", version, about = "Visual speech recognition toolkit: synthesize lip-video corpora, train toy models, decode with joint CTC/attention beam search and LM shallow fusion, fuse systems with ROVER, and score CER")]
struct Cli {
    /// Worker threads for per-utterance parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic lip-video corpus (train/dev).
    SynthData {
        /// JSON run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Crop and speed-perturb a manifest (one output per rate per utterance).
    Augment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated rates, e.g. 0.9,1.0,1.1 (default from config).
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        /// Center-crop side before perturbation (default from config).
        #[arg(long)]
        crop: Option<usize>,
        /// Additionally apply one random rotation/flip/color draw per clip.
        #[arg(long, default_value_t = false)]
        random_augment: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the full model (and LM) on a manifest; emit checkpoint + loss curve.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_curve: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Joint CTC/attention beam search with LM shallow fusion over a manifest.
    Decode(DecodeCli),
    /// ROVER-fuse two or more hypothesis files (order systems best-first).
    Fuse {
        /// Hypothesis files, first file is the alignment base.
        #[arg(required = true)]
        systems: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Weight of per-entry confidences in voting (0 = frequency only).
        #[arg(long, default_value_t = 0.0)]
        confidence_weight: f32,
    },
    /// Character error rate of a hypothesis file against reference transcripts.
    Score {
        /// Reference manifest (utterance_id<TAB>vten_path<TAB>transcript).
        #[arg(long, name = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        /// Per-utterance report: id, S, D, I, ref_len, cer.
        #[arg(long)]
        report: PathBuf,
    },
    /// Print a checkpoint's config and parameter table.
    InspectCkpt {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Args)]
struct DecodeCli {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Hypothesis output: utterance_id<TAB>text.
    #[arg(long)]
    out: PathBuf,
    /// N-best output: id, rank, combined, att, ctc, lm, text.
    #[arg(long)]
    nbest_out: Option<PathBuf>,
    #[arg(long, default_value_t = 48)]
    beam: usize,
    /// CTC weight lambda; attention weighs 1 - lambda.
    #[arg(long, default_value_t = 0.5)]
    ctc_weight: f64,
    /// LM shallow-fusion weight beta.
    #[arg(long, default_value_t = 0.4)]
    lm_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    max_len_ratio: f64,
    #[arg(long, default_value_t = 1)]
    nbest: usize,
    /// Additive per-token score bonus.
    #[arg(long, default_value_t = 0.0)]
    length_bonus: f64,
    /// Attention-driven search with CTC rescoring instead of one-pass scoring.
    #[arg(long, default_value_t = false)]
    rescore: bool,
}

fn main() {
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
            eprintln!("warning: could not size worker pool: {e}");
        }
    }
    match run(cli.command) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Shape { .. } => 2,
        Error::Data(_) | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::SynthData { config, out_dir, seed } => {
            let mut cfg = config::RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            commands::cmd_synth_data(&cfg, &out_dir)
        }
        Command::Augment {
            config,
            manifest,
            out_dir,
            rates,
            crop,
            random_augment,
            seed,
        } => {
            let mut cfg = config::RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let rates = rates.unwrap_or_else(|| cfg.speed_rates.clone());
            let crop = crop.or(cfg.crop);
            commands::cmd_augment(&cfg, &manifest, &out_dir, &rates, crop, random_augment)
        }
        Command::TrainToy {
            config,
            manifest,
            out,
            loss_curve,
            steps,
            seed,
        } => {
            let mut cfg = config::RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            commands::cmd_train_toy(&cfg, &manifest, &out, loss_curve.as_deref(), steps)
        }
        Command::Decode(args) => {
            let params = DecodeParams {
                beam_size: args.beam,
                ctc_weight: args.ctc_weight,
                lm_weight: args.lm_weight,
                max_len_ratio: args.max_len_ratio,
                nbest: args.nbest,
                length_bonus: args.length_bonus,
                one_pass: !args.rescore,
            };
            params.validate()?;
            commands::cmd_decode(&commands::DecodeArgs {
                ckpt: args.ckpt,
                manifest: args.manifest,
                out: args.out,
                nbest_out: args.nbest_out,
                params,
            })
        }
        Command::Fuse {
            systems,
            out,
            confidence_weight,
        } => commands::cmd_fuse(&systems, &out, confidence_weight),
        Command::Score {
            reference,
            hyp,
            report,
        } => commands::cmd_score(&reference, &hyp, &report),
        Command::InspectCkpt { ckpt } => commands::cmd_inspect_ckpt(&ckpt),
    }
}
