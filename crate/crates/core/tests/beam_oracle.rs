//! Beam search against exhaustive search. With a beam at least as wide as
//! the number of live sequences, the search must return exactly the sequence
//! an exhaustive enumeration (same scorers, brute-force enumeration instead
//! of beam pruning) ranks first.

use vsr_core::decode::{beam_search_joint, CtcPrefixScorer, DecodeParams, NextTokenScorer};
use vsr_core::model::decoder::{decoder_next_logp, DecoderConfig, DecoderWeights};
use vsr_core::model::lm::{LmConfig, LmScorer, LmWeights};
use vsr_core::rng::stream;
use vsr_core::tape::Tape;
use vsr_core::tensor::Tensor;
use vsr_core::vocab::Vocabulary;
use vsr_reference::for_each_sequence;

struct Setup {
    vocab: Vocabulary,
    ctc_logp: Tensor,
    dec_cfg: DecoderConfig,
    dec: DecoderWeights,
    lm_cfg: LmConfig,
    lm: LmWeights,
    enc: Tensor,
}

fn setup(seed: u64) -> Setup {
    let vocab = Vocabulary::from_chars("ab").unwrap(); // blank, unk, a, b, sos: 3 live tokens
    let v = vocab.size();
    let t = 3;
    let logits = Tensor::rand_uniform(&[t, v], -2.0, 2.0, &mut stream(seed, &["post"]));
    let mut tape = Tape::new();
    let n = tape.leaf(logits);
    let lp = tape.log_softmax(n).unwrap();
    let ctc_logp = tape.value(lp).clone();

    let dec_cfg = DecoderConfig {
        layers: 1,
        heads: 2,
        ffn_dim: 8,
        d_model: 8,
        dropout: 0.0,
    };
    let dec = DecoderWeights::init(&dec_cfg, v, &mut stream(seed, &["dec"])).unwrap();
    let lm_cfg = LmConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        ffn_dim: 8,
        tied_embeddings: true,
        dropout: 0.0,
    };
    let lm = LmWeights::init(&lm_cfg, v, &mut stream(seed, &["lm"])).unwrap();
    let enc = Tensor::rand_uniform(&[t, 8], -1.0, 1.0, &mut stream(seed, &["enc"]));
    Setup {
        vocab,
        ctc_logp,
        dec_cfg,
        dec,
        lm_cfg,
        lm,
        enc,
    }
}

/// Exhaustively score every complete sequence of live tokens up to `max_len`
/// through the same scorers the beam uses, and return the best (combined
/// score, tokens) under the beam's tie-break (higher score, then smaller
/// token sequence).
#[allow(clippy::too_many_arguments)]
fn exhaustive_best(
    s: &Setup,
    params: &DecodeParams,
    max_len: usize,
) -> (f64, Vec<usize>, f64, f64, f64) {
    let vocab = &s.vocab;
    let live: Vec<usize> = (0..vocab.size())
        .filter(|&tok| tok != vocab.blank() && tok != vocab.sos_eos())
        .collect();
    let scorer = CtcPrefixScorer::new(&s.ctc_logp, vocab.blank()).unwrap();
    let lm_scorer = LmScorer::new(&s.lm, &s.lm_cfg, vocab.sos_eos(), max_len + 2).unwrap();
    let sos = vocab.sos_eos();
    let att_weight = 1.0 - params.ctc_weight;

    let mut best: Option<(f64, Vec<usize>, f64, f64, f64)> = None;
    for_each_sequence(live.len(), max_len, &mut |seq| {
        let tokens: Vec<usize> = seq.iter().map(|&i| live[i]).collect();
        // attention score: sum of per-step log-probs plus the eos step
        let mut att = 0f64;
        let mut prefix = vec![sos];
        for &tok in &tokens {
            let lp = decoder_next_logp(&s.dec, &s.dec_cfg, &prefix, &s.enc, sos).unwrap();
            att += lp[tok] as f64;
            prefix.push(tok);
        }
        let lp = decoder_next_logp(&s.dec, &s.dec_cfg, &prefix, &s.enc, sos).unwrap();
        att += lp[sos] as f64;

        // ctc exact-sequence score via the incremental scorer
        let mut state = scorer.initial_state();
        let mut ctc = 0f64;
        for &tok in &tokens {
            let (inc, next) = scorer.score_extension(&state, tok).unwrap();
            ctc += inc;
            state = next;
        }
        ctc += scorer.eos_score(&state);

        // lm score incl. eos
        let mut lm_state = lm_scorer.start().unwrap();
        let mut lm = 0f64;
        for &tok in &tokens {
            lm += lm_state.next_logp()[tok] as f64;
            lm_state = lm_scorer.step(&lm_state, tok).unwrap();
        }
        lm += lm_state.next_logp()[sos] as f64;

        let combined = att_weight * att + params.ctc_weight * ctc + params.lm_weight * lm;
        let better = match &best {
            None => true,
            Some((bc, btoks, ..)) => {
                combined > *bc || (combined == *bc && tokens < *btoks)
            }
        };
        if better {
            best = Some((combined, tokens, att, ctc, lm));
        }
    });
    best.expect("at least the empty sequence")
}

#[test]
fn beam_matches_exhaustive_search_on_tiny_instances() {
    for seed in 0..10u64 {
        let s = setup(seed);
        let params = DecodeParams {
            beam_size: 32, // > 3^3 live sequences: nothing is ever pruned
            ctc_weight: 0.5,
            lm_weight: 0.4,
            max_len_ratio: 1.0, // 3 frames -> max_len 3
            nbest: 1,
            length_bonus: 0.0,
            one_pass: true,
        };
        let att = |prefix: &[usize]| {
            decoder_next_logp(&s.dec, &s.dec_cfg, prefix, &s.enc, s.vocab.sos_eos())
        };
        let lm_scorer = LmScorer::new(&s.lm, &s.lm_cfg, s.vocab.sos_eos(), 8).unwrap();
        let result = beam_search_joint(
            &s.ctc_logp,
            &att as &dyn NextTokenScorer,
            Some(&lm_scorer),
            &s.vocab,
            &params,
        )
        .unwrap();
        let (best_combined, best_tokens, att_s, ctc_s, lm_s) = exhaustive_best(&s, &params, 3);

        assert_eq!(result[0].tokens, best_tokens, "seed {seed}");
        assert!(
            (result[0].combined - best_combined).abs() < 1e-9,
            "seed {seed}: {} vs {best_combined}",
            result[0].combined
        );
        assert!((result[0].att_score - att_s).abs() < 1e-9, "seed {seed}");
        assert!((result[0].ctc_score - ctc_s).abs() < 1e-9, "seed {seed}");
        assert!((result[0].lm_score - lm_s).abs() < 1e-9, "seed {seed}");
    }
}

#[test]
fn rescoring_mode_agrees_with_one_pass_at_full_beam() {
    // With nothing pruned, attention-driven search with CTC rescoring must
    // rank finished hypotheses identically to one-pass joint scoring.
    let s = setup(42);
    let base = DecodeParams {
        beam_size: 32,
        ctc_weight: 0.5,
        lm_weight: 0.0,
        max_len_ratio: 1.0,
        nbest: 3,
        length_bonus: 0.0,
        one_pass: true,
    };
    let att = |prefix: &[usize]| {
        decoder_next_logp(&s.dec, &s.dec_cfg, prefix, &s.enc, s.vocab.sos_eos())
    };
    let one_pass = beam_search_joint(&s.ctc_logp, &att as &dyn NextTokenScorer, None, &s.vocab, &base).unwrap();
    let rescored = beam_search_joint(
        &s.ctc_logp,
        &att as &dyn NextTokenScorer,
        None,
        &s.vocab,
        &DecodeParams {
            one_pass: false,
            ..base
        },
    )
    .unwrap();
    assert_eq!(one_pass[0].tokens, rescored[0].tokens);
    assert!((one_pass[0].combined - rescored[0].combined).abs() < 1e-9);
}
