//! Joint CTC/attention one-pass beam search with LM shallow fusion.
//!
//! Every live hypothesis carries three log-domain scores (attention, CTC
//! prefix, LM) combined as `(1-lambda)*att + lambda*ctc + beta*lm`. All
//! per-token increments are <= 0, so a finished hypothesis no live one can
//! reach justifies stopping early. Ties rank by lexicographically smaller
//! token sequence, which keeps selection deterministic.

use crate::error::{Error, Result};
use crate::manifest::ManifestEntry;
use crate::model::decoder::decoder_next_logp;
use crate::model::lm::{LmScorer, LmState};
use crate::model::{EncodedUtterance, VsrModel};
use crate::tensor::Tensor;
use crate::video::load_vten;
use crate::vocab::Vocabulary;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DecodeParams {
    pub beam_size: usize,
    /// CTC weight lambda; the attention weight is `1 - lambda`.
    pub ctc_weight: f64,
    /// LM shallow-fusion weight beta.
    pub lm_weight: f64,
    /// Hard length cap as a ratio of the encoder frame count.
    pub max_len_ratio: f64,
    pub nbest: usize,
    /// Additive per-token bonus; positive values disable early stopping.
    pub length_bonus: f64,
    /// One-pass joint scoring (default) vs attention-driven search with CTC
    /// rescoring of the finished pool.
    pub one_pass: bool,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            beam_size: 48,
            ctc_weight: 0.5,
            lm_weight: 0.4,
            max_len_ratio: 1.0,
            nbest: 1,
            length_bonus: 0.0,
            one_pass: true,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.nbest == 0 {
            return Err(Error::Config("decode: beam_size and nbest must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::Config("decode: ctc_weight must be in [0, 1]".to_string()));
        }
        if self.lm_weight < 0.0 {
            return Err(Error::Config("decode: lm_weight must be >= 0".to_string()));
        }
        if self.max_len_ratio <= 0.0 {
            return Err(Error::Config("decode: max_len_ratio must be > 0".to_string()));
        }
        Ok(())
    }
}

// ── CTC prefix scoring ──────────────────────────────────────────────────

/// Per-frame blank/non-blank prefix probabilities for one hypothesis.
/// Cloneable value state; reuse is bitwise identical to recomputation.
#[derive(Clone, Debug)]
pub struct CtcPrefixState {
    /// log prob of paths whose collapse is exactly the prefix, last frame
    /// emitting the prefix's final token.
    r_nonblank: Vec<f64>,
    /// ... last frame emitting blank.
    r_blank: Vec<f64>,
    /// log prefix probability accumulated so far.
    prefix_logp: f64,
    last: Option<usize>,
}

impl CtcPrefixState {
    pub fn prefix_logp(&self) -> f64 {
        self.prefix_logp
    }
}

/// Incrementally scores prefix extensions against a fixed `[t, v]` matrix of
/// per-frame CTC log-probabilities.
pub struct CtcPrefixScorer<'a> {
    logp: &'a Tensor,
    blank: usize,
    t: usize,
    v: usize,
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(logp: &'a Tensor, blank: usize) -> Result<Self> {
        if logp.rank() != 2 {
            return Err(Error::shape("ctc_prefix", 0, "log-probs must be [t, v]".to_string()));
        }
        let (t, v) = (logp.shape()[0], logp.shape()[1]);
        if blank >= v {
            return Err(Error::Config("ctc_prefix: blank id out of range".to_string()));
        }
        Ok(CtcPrefixScorer { logp, blank, t, v })
    }

    fn lp(&self, t: usize, tok: usize) -> f64 {
        self.logp.data()[t * self.v + tok] as f64
    }

    /// State for the empty prefix: all-blank paths.
    pub fn initial_state(&self) -> CtcPrefixState {
        let mut r_blank = vec![0f64; self.t];
        let mut acc = 0f64;
        for ti in 0..self.t {
            acc += self.lp(ti, self.blank);
            r_blank[ti] = acc;
        }
        CtcPrefixState {
            r_nonblank: vec![f64::NEG_INFINITY; self.t],
            r_blank,
            prefix_logp: 0.0,
            last: None,
        }
    }

    /// Extend the prefix with non-blank token `c`. Returns the incremental
    /// score `log p(prefix·c ...) - log p(prefix ...)` and the new state.
    pub fn score_extension(&self, state: &CtcPrefixState, c: usize) -> Result<(f64, CtcPrefixState)> {
        if c >= self.v || c == self.blank {
            return Err(Error::Data(format!("ctc_prefix: invalid extension token {c}")));
        }
        if state.r_nonblank.len() != self.t {
            return Err(Error::Data(format!(
                "ctc_prefix: state covers {} frames, posteriors have {}",
                state.r_nonblank.len(),
                self.t
            )));
        }
        let mut r_n = vec![f64::NEG_INFINITY; self.t];
        let mut r_b = vec![f64::NEG_INFINITY; self.t];
        // Phi at "frame -1": only the empty prefix can start a token at 0.
        let mut psi = if state.last.is_none() {
            r_n[0] = self.lp(0, c);
            r_n[0]
        } else {
            f64::NEG_INFINITY
        };
        for ti in 1..self.t {
            let phi = if state.last == Some(c) {
                state.r_blank[ti - 1]
            } else {
                lse(state.r_blank[ti - 1], state.r_nonblank[ti - 1])
            };
            r_n[ti] = lse(r_n[ti - 1], phi) + self.lp(ti, c);
            r_b[ti] = lse(r_b[ti - 1], r_n[ti - 1]) + self.lp(ti, self.blank);
            psi = lse(psi, phi + self.lp(ti, c));
        }
        // An impossible extension stays at -inf even from an already
        // impossible prefix (-inf minus -inf is not a number).
        let incremental = if psi == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            psi - state.prefix_logp
        };
        Ok((
            incremental,
            CtcPrefixState {
                r_nonblank: r_n,
                r_blank: r_b,
                prefix_logp: psi,
                last: Some(c),
            },
        ))
    }

    /// Score of ending the hypothesis here: `log p(prefix exactly)` minus the
    /// accumulated prefix score.
    pub fn eos_score(&self, state: &CtcPrefixState) -> f64 {
        let exact = lse(state.r_nonblank[self.t - 1], state.r_blank[self.t - 1]);
        if exact == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        exact - state.prefix_logp
    }
}

fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `w * x` with the convention that a zero weight annihilates even `-inf`.
fn weighted(w: f64, x: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else {
        w * x
    }
}

// ── Beam search ─────────────────────────────────────────────────────────

/// Source of next-token log-probabilities given a sos-prefixed token prefix.
pub trait NextTokenScorer {
    fn next_logp(&self, prefix: &[usize]) -> Result<Vec<f32>>;
}

impl<F> NextTokenScorer for F
where
    F: Fn(&[usize]) -> Result<Vec<f32>>,
{
    fn next_logp(&self, prefix: &[usize]) -> Result<Vec<f32>> {
        self(prefix)
    }
}

/// Attention decoder as a stateless prefix scorer.
pub struct DecoderScorer<'m> {
    pub model: &'m VsrModel,
    pub enc_states: &'m Tensor,
}

impl NextTokenScorer for DecoderScorer<'_> {
    fn next_logp(&self, prefix: &[usize]) -> Result<Vec<f32>> {
        decoder_next_logp(
            &self.model.decoder,
            &self.model.config.decoder,
            prefix,
            self.enc_states,
            self.model.vocab.sos_eos(),
        )
    }
}

/// One finished (or force-finished) hypothesis with all component scores.
#[derive(Clone, Debug)]
pub struct ScoredHypothesis {
    /// Real tokens only: no sos, no eos.
    pub tokens: Vec<usize>,
    pub text: String,
    pub att_score: f64,
    pub ctc_score: f64,
    pub lm_score: f64,
    pub combined: f64,
    /// True when no hypothesis finished within the length cap and the best
    /// live one was returned instead.
    pub forced: bool,
}

pub type NBestList = Vec<ScoredHypothesis>;

struct Hypothesis {
    tokens: Vec<usize>,
    att: f64,
    ctc: f64,
    lm: f64,
    combined: f64,
    ctc_state: CtcPrefixState,
    lm_state: Option<LmState>,
}

struct Candidate {
    parent: usize,
    token: usize,
    att: f64,
    ctc: f64,
    lm: f64,
    combined: f64,
    ctc_state: Option<CtcPrefixState>,
}

/// Joint CTC/attention beam search over one utterance's encoder products.
pub fn beam_search_joint(
    ctc_logp: &Tensor,
    att: &dyn NextTokenScorer,
    lm: Option<&LmScorer>,
    vocab: &Vocabulary,
    params: &DecodeParams,
) -> Result<NBestList> {
    params.validate()?;
    if ctc_logp.numel() == 0 {
        return Err(Error::Data("beam search: empty encoder output".to_string()));
    }
    if ctc_logp.shape()[1] != vocab.size() {
        return Err(Error::shape(
            "beam_search",
            1,
            format!("posteriors have {} tokens, vocab {}", ctc_logp.shape()[1], vocab.size()),
        ));
    }
    if params.lm_weight > 0.0 && lm.is_none() {
        return Err(Error::Config("beam search: lm_weight > 0 but no LM given".to_string()));
    }
    let frames = ctc_logp.shape()[0];
    let max_len = ((params.max_len_ratio * frames as f64).ceil() as usize).max(1);
    let lambda = if params.one_pass { params.ctc_weight } else { 0.0 };

    let scorer = CtcPrefixScorer::new(ctc_logp, vocab.blank())?;
    let sos_eos = vocab.sos_eos();
    let att_weight = 1.0 - params.ctc_weight;
    let use_att = att_weight != 0.0;
    let use_lm = params.lm_weight > 0.0;

    let mut live = vec![Hypothesis {
        tokens: vec![sos_eos],
        att: 0.0,
        ctc: 0.0,
        lm: 0.0,
        combined: 0.0,
        ctc_state: scorer.initial_state(),
        lm_state: match (use_lm, lm) {
            (true, Some(l)) => Some(l.start()?),
            _ => None,
        },
    }];
    let mut finished: Vec<ScoredHypothesis> = Vec::new();

    for _step in 0..max_len {
        let mut finished_cands: Vec<Candidate> = Vec::new();
        let mut live_cands: Vec<Candidate> = Vec::new();
        for (hid, hyp) in live.iter().enumerate() {
            let att_logp: Option<Vec<f32>> = if use_att {
                Some(att.next_logp(&hyp.tokens)?)
            } else {
                None
            };
            let lm_logp: Option<&[f32]> = hyp.lm_state.as_ref().map(|s| s.next_logp());
            for tok in 0..vocab.size() {
                if tok == vocab.blank() {
                    continue;
                }
                let att_inc = att_logp.as_ref().map_or(0.0, |l| l[tok] as f64);
                let lm_inc = lm_logp.map_or(0.0, |l| l[tok] as f64);
                if tok == sos_eos {
                    let ctc_inc = scorer.eos_score(&hyp.ctc_state);
                    let att_s = hyp.att + att_inc;
                    let ctc_s = hyp.ctc + ctc_inc;
                    let lm_s = hyp.lm + lm_inc;
                    let combined = weighted(att_weight, att_s)
                        + weighted(lambda, ctc_s)
                        + weighted(params.lm_weight, lm_s)
                        + params.length_bonus * (hyp.tokens.len() - 1) as f64;
                    finished_cands.push(Candidate {
                        parent: hid,
                        token: tok,
                        att: att_s,
                        ctc: ctc_s,
                        lm: lm_s,
                        combined,
                        ctc_state: None,
                    });
                } else {
                    let (ctc_inc, new_state) = scorer.score_extension(&hyp.ctc_state, tok)?;
                    let att_s = hyp.att + att_inc;
                    let ctc_s = hyp.ctc + ctc_inc;
                    let lm_s = hyp.lm + lm_inc;
                    let combined = weighted(att_weight, att_s)
                        + weighted(lambda, ctc_s)
                        + weighted(params.lm_weight, lm_s)
                        + params.length_bonus * hyp.tokens.len() as f64;
                    live_cands.push(Candidate {
                        parent: hid,
                        token: tok,
                        att: att_s,
                        ctc: ctc_s,
                        lm: lm_s,
                        combined,
                        ctc_state: Some(new_state),
                    });
                }
            }
        }

        for cand in finished_cands {
            let tokens: Vec<usize> = live[cand.parent].tokens[1..].to_vec();
            finished.push(ScoredHypothesis {
                text: vocab.decode(&tokens),
                tokens,
                att_score: cand.att,
                ctc_score: cand.ctc,
                lm_score: cand.lm,
                combined: cand.combined,
                forced: false,
            });
        }
        sort_hypotheses(&mut finished);
        finished.truncate(params.nbest.max(params.beam_size));

        // Deterministic pruning: score desc, then lexicographically smaller
        // token sequence.
        live_cands.sort_by(|a, b| {
            b.combined
                .partial_cmp(&a.combined)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    let ta = (&live[a.parent].tokens, a.token);
                    let tb = (&live[b.parent].tokens, b.token);
                    ta.cmp(&tb)
                })
        });
        live_cands.truncate(params.beam_size);

        let mut next_live = Vec::with_capacity(live_cands.len());
        for cand in live_cands {
            let parent = &live[cand.parent];
            let mut tokens = parent.tokens.clone();
            tokens.push(cand.token);
            let lm_state = match (&parent.lm_state, lm) {
                (Some(state), Some(l)) => Some(l.step(state, cand.token)?),
                _ => None,
            };
            next_live.push(Hypothesis {
                tokens,
                att: cand.att,
                ctc: cand.ctc,
                lm: cand.lm,
                combined: cand.combined,
                ctc_state: cand.ctc_state.expect("live candidate carries a state"),
                lm_state,
            });
        }
        live = next_live;

        if live.is_empty() {
            break;
        }
        // All extension increments are <= 0 (absent a positive length bonus),
        // so once the nbest-th finished score dominates every live one the
        // pool can only confirm itself.
        if params.length_bonus <= 0.0 && finished.len() >= params.nbest {
            let kth = finished[params.nbest - 1].combined;
            let best_live = live
                .iter()
                .map(|h| h.combined)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_live <= kth {
                break;
            }
        }
    }

    if finished.is_empty() {
        // Nothing finished within the cap: surface the best live hypothesis.
        sort_live(&mut live);
        let hyp = live.into_iter().next().ok_or_else(|| {
            Error::Data("beam search: no hypotheses at all".to_string())
        })?;
        let tokens: Vec<usize> = hyp.tokens[1..].to_vec();
        return Ok(vec![ScoredHypothesis {
            text: vocab.decode(&tokens),
            tokens,
            att_score: hyp.att,
            ctc_score: hyp.ctc,
            lm_score: hyp.lm,
            combined: hyp.combined,
            forced: true,
        }]);
    }

    if !params.one_pass && params.ctc_weight > 0.0 {
        rescore_with_ctc(&mut finished, &scorer, params)?;
    }
    finished.truncate(params.nbest);
    Ok(finished)
}

/// Rescoring mode: recompute the full CTC score of each finished hypothesis
/// and fold it into the combined score at weight lambda.
fn rescore_with_ctc(
    finished: &mut Vec<ScoredHypothesis>,
    scorer: &CtcPrefixScorer,
    params: &DecodeParams,
) -> Result<()> {
    let att_weight = 1.0 - params.ctc_weight;
    for hyp in finished.iter_mut() {
        let mut state = scorer.initial_state();
        let mut ctc = 0f64;
        for &tok in &hyp.tokens {
            let (inc, next) = scorer.score_extension(&state, tok)?;
            ctc += inc;
            state = next;
        }
        ctc += scorer.eos_score(&state);
        hyp.ctc_score = ctc;
        hyp.combined = weighted(att_weight, hyp.att_score)
            + weighted(params.ctc_weight, ctc)
            + weighted(params.lm_weight, hyp.lm_score)
            + params.length_bonus * hyp.tokens.len() as f64;
    }
    sort_hypotheses(finished);
    Ok(())
}

fn sort_hypotheses(list: &mut [ScoredHypothesis]) {
    list.sort_by(|a, b| {
        b.combined
            .partial_cmp(&a.combined)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

fn sort_live(list: &mut [Hypothesis]) {
    list.sort_by(|a, b| {
        b.combined
            .partial_cmp(&a.combined)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

// ── Batch decoding ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub id: String,
    pub text: String,
    pub nbest: NBestList,
}

/// Decode a whole manifest. Utterances run independently (in parallel when
/// threads are available) and the output is ordered by utterance id. A
/// per-utterance failure is reported on stderr and yields an empty line
/// rather than aborting the batch.
pub fn batch_decode(
    model: &VsrModel,
    entries: &[ManifestEntry],
    params: &DecodeParams,
) -> Result<Vec<DecodeOutput>> {
    params.validate()?;
    if params.lm_weight > 0.0 && model.lm.is_none() {
        return Err(Error::Config(
            "decode: lm_weight > 0 but the checkpoint has no LM section".to_string(),
        ));
    }
    let mut sorted: Vec<&ManifestEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let outputs: Vec<DecodeOutput> = sorted
        .par_iter()
        .map(|entry| match decode_one(model, entry, params) {
            Ok(nbest) => {
                let text = nbest.first().map(|h| h.text.clone()).unwrap_or_default();
                DecodeOutput {
                    id: entry.id.clone(),
                    text,
                    nbest,
                }
            }
            Err(e) => {
                eprintln!("decode: utterance {} failed: {e}", entry.id);
                DecodeOutput {
                    id: entry.id.clone(),
                    text: String::new(),
                    nbest: Vec::new(),
                }
            }
        })
        .collect();
    Ok(outputs)
}

fn decode_one(model: &VsrModel, entry: &ManifestEntry, params: &DecodeParams) -> Result<NBestList> {
    let video = load_vten(&entry.path)?;
    let enc: EncodedUtterance = model.encode_utterance(&video)?;
    let att = DecoderScorer {
        model,
        enc_states: &enc.states,
    };
    let max_len = ((params.max_len_ratio * enc.states.shape()[0] as f64).ceil() as usize).max(1) + 1;
    let lm_scorer = match (&model.lm, params.lm_weight > 0.0) {
        (Some(weights), true) => {
            let cfg = model
                .config
                .lm
                .as_ref()
                .expect("weights imply config");
            Some(LmScorer::new(weights, cfg, model.vocab.sos_eos(), max_len + 1)?)
        }
        _ => None,
    };
    beam_search_joint(&enc.ctc_logp, &att, lm_scorer.as_ref(), &model.vocab, params)
}

/// Plain hypothesis file: `utterance_id<TAB>text`.
pub fn format_hyp_file(outputs: &[DecodeOutput]) -> String {
    let mut out = String::new();
    for o in outputs {
        out.push_str(&o.id);
        out.push('\t');
        out.push_str(&o.text);
        out.push('\n');
    }
    out
}

/// N-best file: `utterance_id<TAB>rank<TAB>combined<TAB>att<TAB>ctc<TAB>lm<TAB>text`.
pub fn format_nbest_file(outputs: &[DecodeOutput]) -> String {
    let mut out = String::new();
    for o in outputs {
        for (rank, h) in o.nbest.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
                o.id,
                rank + 1,
                h.combined,
                h.att_score,
                h.ctc_score,
                h.lm_score,
                h.text
            ));
        }
    }
    out
}
