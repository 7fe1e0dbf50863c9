//! Command implementations. Data goes to files, diagnostics to stderr;
//! outputs are written through a temp file and renamed so failed commands
//! leave nothing partial behind.

use crate::config::RunConfig;
use rand::Rng;
use std::path::{Path, PathBuf};
use vsr_core::ckpt::ModelCheckpoint;
use vsr_core::decode::{batch_decode, format_hyp_file, format_nbest_file, DecodeParams};
use vsr_core::error::{Error, Result};
use vsr_core::fusion::rover_fuse;
use vsr_core::manifest::read_manifest;
use vsr_core::metrics::{corpus_score, format_score_report};
use vsr_core::model::VsrModel;
use vsr_core::rng::stream;
use vsr_core::train::{format_loss_curve, load_training_set, train_lm, train_toy, TrainConfig};
use vsr_core::video::{augment, center_crop, load_vten, save_vten, speed_perturb};

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))
}

/// Generate a deterministic synthetic corpus: train/dev manifests plus one
/// `.vten` clip per utterance.
pub fn cmd_synth_data(config: &RunConfig, out_dir: &Path) -> Result<()> {
    let vocab = config.vocabulary()?;
    let params = config.synth.params();
    ensure_dir(out_dir)?;
    let vten_dir = out_dir.join("vten");
    ensure_dir(&vten_dir)?;

    for (split, count) in [("train", config.synth.train_count), ("dev", config.synth.dev_count)] {
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let id = format!("{split}_{i:04}");
            let mut len_rng = stream(config.seed, &["synth", split, &i.to_string(), "len"]);
            let len = len_rng.gen_range(config.synth.min_len..=config.synth.max_len);
            let tokens: Vec<String> = (0..len)
                .map(|_| {
                    let t = len_rng.gen_range(2..vocab.size() - 1);
                    vocab.token(t).expect("sampled in range").to_string()
                })
                .collect();
            let mut vid_rng = stream(config.seed, &["synth", split, &i.to_string(), "video"]);
            let (video, transcript) =
                vsr_core::video::synth_generate(&tokens, &vocab, &params, &mut vid_rng)?;
            let rel = format!("vten/{id}.vten");
            save_vten(&vten_dir.join(format!("{id}.vten")), &video)?;
            entries.push((id, rel, transcript));
        }
        entries.sort();
        let mut buf = Vec::new();
        for (id, p, tr) in &entries {
            buf.extend_from_slice(format!("{id}\t{p}\t{tr}\n").as_bytes());
        }
        write_atomic(&out_dir.join(format!("{split}.tsv")), &buf)?;
        eprintln!("synth-data: wrote {count} {split} utterances");
    }
    Ok(())
}

/// Data processing: optional center crop, then speed perturbation at every
/// configured rate — `|rates|` output utterances per input, ids suffixed
/// `_sp<rate>`, transcripts unchanged. Random augmentation is off unless
/// requested (dynamic augmentation normally happens during training).
#[allow(clippy::too_many_arguments)]
pub fn cmd_augment(
    config: &RunConfig,
    manifest: &Path,
    out_dir: &Path,
    rates: &[f64],
    crop: Option<usize>,
    random_augment: bool,
) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::Config("augment: need at least one rate".to_string()));
    }
    let entries = read_manifest(manifest)?;
    ensure_dir(out_dir)?;
    let vten_dir = out_dir.join("vten");
    ensure_dir(&vten_dir)?;
    let mut out_entries = Vec::with_capacity(entries.len() * rates.len());
    for entry in &entries {
        let video = load_vten(&entry.path)?;
        let video = match crop {
            Some(n) => center_crop(&video, n)?,
            None => video,
        };
        let video = if random_augment {
            let mut rng = stream(config.seed, &["offline-augment", &entry.id]);
            augment(&video, &config.augment, &mut rng)?
        } else {
            video
        };
        for &rate in rates {
            let perturbed = speed_perturb(&video, rate)?;
            let id = format!("{}_sp{rate}", entry.id);
            let rel = format!("vten/{id}.vten");
            save_vten(&vten_dir.join(format!("{id}.vten")), &perturbed)?;
            out_entries.push((id, rel, entry.transcript.clone()));
        }
    }
    out_entries.sort();
    let mut buf = Vec::new();
    for (id, p, tr) in &out_entries {
        buf.extend_from_slice(format!("{id}\t{p}\t{tr}\n").as_bytes());
    }
    write_atomic(&out_dir.join("manifest.tsv"), &buf)?;
    eprintln!(
        "augment: {} inputs x {} rates -> {} utterances",
        entries.len(),
        rates.len(),
        out_entries.len()
    );
    Ok(())
}

/// Train the VSR model (and, when configured, the LM on the same
/// transcripts), then write a single self-describing checkpoint plus the
/// per-step loss curve.
pub fn cmd_train_toy(
    config: &RunConfig,
    manifest: &Path,
    out_ckpt: &Path,
    loss_curve: Option<&Path>,
    steps_override: Option<usize>,
) -> Result<()> {
    let model_config = config.model_config()?;
    let vocab = model_config.vocabulary()?;
    let entries = read_manifest(manifest)?;
    let items = load_training_set(&entries, &vocab)?;
    let tc = TrainConfig {
        steps: steps_override.unwrap_or(config.train.steps),
        seed: config.seed,
        joint: config.train.joint,
        optim: config.train.optim,
        augment: if config.train.dynamic_augment {
            Some(config.augment.clone())
        } else {
            None
        },
    };
    let (mut model, curve) = train_toy(&items, model_config, &tc)?;
    eprintln!(
        "train-toy: {} steps on {} utterances, joint loss {:.4} -> {:.4}",
        curve.len(),
        items.len(),
        curve.first().map_or(f64::NAN, |r| r.joint),
        curve.last().map_or(f64::NAN, |r| r.joint),
    );

    if let Some(lm_cfg) = model.config.lm.clone() {
        if config.train.lm_steps > 0 {
            let transcripts: Vec<String> = entries.iter().map(|e| e.transcript.clone()).collect();
            let (lm, lm_losses) = train_lm(
                &transcripts,
                &lm_cfg,
                &vocab,
                config.train.lm_steps,
                &config.train.lm_optim,
                config.seed,
            )?;
            eprintln!(
                "train-toy: lm {} steps, loss {:.4} -> {:.4}",
                lm_losses.len(),
                lm_losses.first().copied().unwrap_or(f64::NAN),
                lm_losses.last().copied().unwrap_or(f64::NAN),
            );
            model.lm = Some(lm);
        }
    }

    let mut bytes = Vec::new();
    ModelCheckpoint::from_model(&model).write_to(&mut bytes)?;
    write_atomic(out_ckpt, &bytes)?;
    if let Some(curve_path) = loss_curve {
        write_atomic(curve_path, format_loss_curve(&curve).as_bytes())?;
    }
    Ok(())
}

pub struct DecodeArgs {
    pub ckpt: PathBuf,
    pub manifest: PathBuf,
    pub out: PathBuf,
    pub nbest_out: Option<PathBuf>,
    pub params: DecodeParams,
}

pub fn cmd_decode(args: &DecodeArgs) -> Result<()> {
    let model: VsrModel = ModelCheckpoint::load(&args.ckpt)?.into_model(0)?;
    let entries = read_manifest(&args.manifest)?;
    let outputs = batch_decode(&model, &entries, &args.params)?;
    write_atomic(&args.out, format_hyp_file(&outputs).as_bytes())?;
    if let Some(nbest_path) = &args.nbest_out {
        write_atomic(nbest_path, format_nbest_file(&outputs).as_bytes())?;
    }
    eprintln!("decode: {} utterances", outputs.len());
    Ok(())
}

/// ROVER fusion over two or more hypothesis files; the first file is the
/// alignment base and earlier systems win ties, so order systems best-first.
pub fn cmd_fuse(system_files: &[PathBuf], out: &Path, confidence_weight: f32) -> Result<()> {
    if system_files.len() < 2 {
        return Err(Error::Config("fuse: need at least 2 hypothesis files".to_string()));
    }
    let mut systems = Vec::with_capacity(system_files.len());
    for path in system_files {
        systems.push(read_hyp_file(path)?);
    }
    let fused = rover_fuse(&systems, confidence_weight)?;
    let mut buf = String::new();
    for (id, text) in &fused {
        buf.push_str(&format!("{id}\t{text}\n"));
    }
    write_atomic(out, buf.as_bytes())?;
    eprintln!("fuse: {} systems, {} utterances", systems.len(), fused.len());
    Ok(())
}

pub fn cmd_score(ref_manifest: &Path, hyp_file: &Path, report: &Path) -> Result<()> {
    let refs: Vec<(String, String)> = read_manifest(ref_manifest)?
        .into_iter()
        .map(|e| (e.id, e.transcript))
        .collect();
    let hyps = read_hyp_file(hyp_file)?;
    let score = corpus_score(&refs, &hyps)?;
    for id in &score.missing {
        eprintln!("score: no hypothesis for {id}, counted as full deletion");
    }
    write_atomic(report, format_score_report(&score).as_bytes())?;
    println!("corpus_cer\t{:.6}", score.cer);
    Ok(())
}

pub fn cmd_inspect_ckpt(path: &Path) -> Result<()> {
    let ckpt = ModelCheckpoint::load(path)?;
    println!("version\t{}", ckpt.version);
    println!(
        "config\t{}",
        serde_json::to_string(&ckpt.config).map_err(|e| Error::Data(e.to_string()))?
    );
    println!("params\t{}", ckpt.params.len());
    println!("total_values\t{}", ckpt.total_values());
    for (name, tensor) in &ckpt.params {
        println!("param\t{name}\t{:?}\t{}", tensor.shape(), tensor.numel());
    }
    Ok(())
}

/// Hypothesis files: `utterance_id<TAB>text`, empty text allowed.
pub fn read_hyp_file(path: &Path) -> Result<Vec<(String, String)>> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((id, text)) => out.push((id.to_string(), text.to_string())),
            None => {
                return Err(Error::Data(format!(
                    "{}:{}: expected utterance_id<TAB>text",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(out)
}
