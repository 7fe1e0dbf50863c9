//! Miniature end-to-end run: synthesize a corpus, train a small model for a
//! few hundred steps, decode held-out clips with the joint beam search, and
//! score. Guards the full wiring without the cost of the acceptance run.

use vsr_core::decode::{beam_search_joint, DecodeParams, DecoderScorer};
use vsr_core::metrics::corpus_score;
use vsr_core::model::decoder::DecoderConfig;
use vsr_core::model::encoder::{BranchMode, EncoderConfig, EncoderVariant};
use vsr_core::model::frontend::FrontendConfig;
use vsr_core::model::ModelConfig;
use vsr_core::rng::stream;
use vsr_core::train::{train_toy, OptimConfig, TrainConfig, TrainItem};
use vsr_core::video::{synth_generate, SynthParams};
use vsr_core::vocab::Vocabulary;
use rand::Rng;

fn synth_corpus(
    vocab: &Vocabulary,
    params: &SynthParams,
    count: usize,
    tag: &str,
    seed: u64,
) -> Vec<TrainItem> {
    (0..count)
        .map(|i| {
            let id = format!("{tag}{i:03}");
            let mut r = stream(seed, &[tag, &i.to_string(), "len"]);
            let len = r.gen_range(2..=4);
            let toks: Vec<String> = (0..len)
                .map(|_| {
                    let t = r.gen_range(2..vocab.size() - 1);
                    vocab.token(t).unwrap().to_string()
                })
                .collect();
            let (video, transcript) =
                synth_generate(&toks, vocab, params, &mut stream(seed, &[tag, &i.to_string(), "v"]))
                    .unwrap();
            TrainItem {
                id,
                video,
                label: vocab.encode(&transcript),
            }
        })
        .collect()
}

#[test]
fn train_then_decode_beats_chance_comfortably() {
    let vocab = Vocabulary::from_chars("abcd").unwrap();
    let synth = SynthParams {
        side: 16,
        frames_per_token: 4,
        noise_sigma: 0.05,
        frame_rate: 25.0,
    };
    let train_items = synth_corpus(&vocab, &synth, 24, "tr", 501);
    let dev_items = synth_corpus(&vocab, &synth, 8, "dev", 777);

    let config = ModelConfig {
        vocab: vocab.tokens().to_vec(),
        frontend: FrontendConfig {
            input_channels: 1,
            block_channels: vec![4, 8],
            kernel: 3,
        },
        encoder: EncoderConfig {
            variant: EncoderVariant::EBranchformer,
            layers: 1,
            d_model: 24,
            heads: 2,
            ffn_dim: 48,
            cgmlp_expansion: 2,
            depthwise_kernel: 5,
            dropout: 0.0,
            use_posenc: true,
            branch_mode: BranchMode::Both,
            input_dim: 8,
        },
        decoder: DecoderConfig {
            layers: 1,
            heads: 2,
            ffn_dim: 48,
            d_model: 24,
            dropout: 0.0,
        },
        lm: None,
    };
    let tc = TrainConfig {
        steps: 220,
        seed: 11,
        optim: OptimConfig {
            batch_size: 4,
            lr_peak: 3e-3,
            warmup_steps: 40,
            ..OptimConfig::default()
        },
        ..TrainConfig::default()
    };
    let (model, curve) = train_toy(&train_items, config, &tc).unwrap();
    let first = curve.first().unwrap().joint;
    let last = curve.last().unwrap().joint;
    assert!(last < 0.6 * first, "loss must drop: {first} -> {last}");

    let params = DecodeParams {
        beam_size: 8,
        ctc_weight: 0.5,
        lm_weight: 0.0,
        ..DecodeParams::default()
    };
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    for item in &dev_items {
        let enc = model.encode_utterance(&item.video).unwrap();
        let att = DecoderScorer {
            model: &model,
            enc_states: &enc.states,
        };
        let out = beam_search_joint(&enc.ctc_logp, &att, None, &model.vocab, &params).unwrap();
        refs.push((item.id.clone(), model.vocab.decode(&item.label)));
        hyps.push((item.id.clone(), out[0].text.clone()));
    }
    let score = corpus_score(&refs, &hyps).unwrap();
    // Desk-scale bar: random output over four tokens would land near CER 1.
    assert!(
        score.cer < 0.5,
        "mini run should beat chance: CER {:.3}",
        score.cer
    );
}
