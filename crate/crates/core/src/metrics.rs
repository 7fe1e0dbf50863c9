//! Character error rate: minimal edit distance with substitution, deletion,
//! and insertion counts, aggregated over a corpus by summed counts over
//! summed reference lengths (so empty references never divide by zero).

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditOps {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditOps {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

fn strip(text: &str) -> Vec<char> {
    text.chars().filter(|c| !c.is_whitespace()).collect()
}

/// Minimal character edit distance between reference and hypothesis, both
/// compared as Unicode scalar sequences after whitespace stripping. The rate
/// is `(S+D+I) / len(reference)`; an empty reference with a nonempty
/// hypothesis yields `+inf` (flagged, never aggregated as-is).
pub fn cer(reference: &str, hypothesis: &str) -> (EditOps, f64) {
    let r = strip(reference);
    let h = strip(hypothesis);
    let ops = edit_ops(&r, &h);
    let rate = if r.is_empty() {
        if h.is_empty() {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        ops.distance() as f64 / r.len() as f64
    };
    (ops, rate)
}

/// Wagner-Fischer with backtrace. Minimal alignments are not unique in their
/// (S, D, I) split, so substitutions are minimized as a secondary objective;
/// that split is canonical and swaps D and I exactly under argument reversal.
/// Remaining ties prefer match > substitution > deletion > insertion.
fn edit_ops(r: &[char], h: &[char]) -> EditOps {
    let (n, m) = (r.len(), h.len());
    // (cost, subs) compared lexicographically.
    let mut cost = vec![vec![(0usize, 0usize); m + 1]; n + 1];
    // 0 = match, 1 = sub, 2 = del, 3 = ins
    let mut back = vec![vec![0u8; m + 1]; n + 1];
    for i in 1..=n {
        cost[i][0] = (i, 0);
        back[i][0] = 2;
    }
    for j in 1..=m {
        cost[0][j] = (j, 0);
        back[0][j] = 3;
    }
    for i in 1..=n {
        for j in 1..=m {
            let is_match = r[i - 1] == h[j - 1];
            let (dc, ds) = cost[i - 1][j - 1];
            let diag = (dc + usize::from(!is_match), ds + usize::from(!is_match));
            let mut best = diag;
            let mut mv = if is_match { 0u8 } else { 1 };
            let del = (cost[i - 1][j].0 + 1, cost[i - 1][j].1);
            if del < best {
                best = del;
                mv = 2;
            }
            let ins = (cost[i][j - 1].0 + 1, cost[i][j - 1].1);
            if ins < best {
                best = ins;
                mv = 3;
            }
            cost[i][j] = best;
            back[i][j] = mv;
        }
    }
    let mut ops = EditOps::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        match back[i][j] {
            0 => {
                i -= 1;
                j -= 1;
            }
            1 => {
                ops.substitutions += 1;
                i -= 1;
                j -= 1;
            }
            2 => {
                ops.deletions += 1;
                i -= 1;
            }
            _ => {
                ops.insertions += 1;
                j -= 1;
            }
        }
    }
    ops
}

/// One utterance's scoring line.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceScore {
    pub id: String,
    pub ops: EditOps,
    pub ref_len: usize,
    pub rate: f64,
}

#[derive(Clone, Debug)]
pub struct CorpusScore {
    pub cer: f64,
    pub per_utterance: Vec<UtteranceScore>,
    /// Utterance ids that had no hypothesis and were scored as full deletions.
    pub missing: Vec<String>,
}

/// Score a hypothesis set against references. A missing hypothesis counts as
/// a full deletion of its reference (reported in `missing`); hypotheses
/// without a reference are an error. Corpus CER is summed edits over summed
/// reference lengths; the report is ordered by utterance id.
pub fn corpus_score(
    references: &[(String, String)],
    hypotheses: &[(String, String)],
) -> Result<CorpusScore> {
    let mut refs: Vec<(&String, &String)> = references.iter().map(|(i, t)| (i, t)).collect();
    refs.sort_by(|a, b| a.0.cmp(b.0));
    for pair in refs.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::Data(format!("corpus_score: duplicate reference id {}", pair[0].0)));
        }
    }
    for (id, _) in hypotheses {
        if !references.iter().any(|(rid, _)| rid == id) {
            return Err(Error::Data(format!(
                "corpus_score: hypothesis for unknown utterance {id:?}"
            )));
        }
    }
    let mut per_utterance = Vec::with_capacity(refs.len());
    let mut missing = Vec::new();
    let (mut edit_sum, mut len_sum) = (0usize, 0usize);
    for (id, ref_text) in refs {
        let hyp = hypotheses.iter().find(|(hid, _)| hid == id);
        let hyp_text = match hyp {
            Some((_, text)) => text.as_str(),
            None => {
                missing.push(id.clone());
                ""
            }
        };
        let (ops, rate) = cer(ref_text, hyp_text);
        let ref_len = strip(ref_text).len();
        edit_sum += ops.distance();
        len_sum += ref_len;
        per_utterance.push(UtteranceScore {
            id: id.clone(),
            ops,
            ref_len,
            rate,
        });
    }
    let cer = if len_sum == 0 {
        if edit_sum == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        edit_sum as f64 / len_sum as f64
    };
    Ok(CorpusScore {
        cer,
        per_utterance,
        missing,
    })
}

/// Report lines: `utterance_id<TAB>S<TAB>D<TAB>I<TAB>ref_len<TAB>cer`.
pub fn format_score_report(score: &CorpusScore) -> String {
    let mut out = String::new();
    for u in &score.per_utterance {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\n",
            u.id, u.ops.substitutions, u.ops.deletions, u.ops.insertions, u.ref_len, u.rate
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use vsr_reference::edit_distance_naive;

    #[test]
    fn identical_strings_score_zero() {
        let (ops, rate) = cer("同じ文", "同じ文");
        assert_eq!(ops, EditOps::default());
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let (ops, rate) = cer("abcd", "");
        assert_eq!(ops.deletions, 4);
        assert_eq!(ops.distance(), 4);
        assert!((rate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kitten_to_sitting_is_three() {
        let (ops, _) = cer("kitten", "sitting");
        assert_eq!(ops.distance(), 3);
        assert_eq!(ops.substitutions, 2);
        assert_eq!(ops.insertions, 1);
    }

    #[test]
    fn whitespace_is_stripped_before_comparison() {
        let (ops, rate) = cer("a b c", "abc");
        assert_eq!(ops.distance(), 0);
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn empty_reference_flags_infinity() {
        let (_, rate) = cer("", "abc");
        assert!(rate.is_infinite());
        let (_, rate) = cer("", "");
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn distance_matches_naive_dp_and_swaps_counts_under_reversal() {
        let alphabet: Vec<char> = "abcd".chars().collect();
        let mut rng = crate::rng::stream(23, &["cer"]);
        for _ in 0..1000 {
            let la = rng.gen_range(0..=12);
            let lb = rng.gen_range(0..=12);
            let a: String = (0..la).map(|_| alphabet[rng.gen_range(0..4)]).collect();
            let b: String = (0..lb).map(|_| alphabet[rng.gen_range(0..4)]).collect();
            let (fwd, _) = cer(&a, &b);
            let (rev, _) = cer(&b, &a);
            let oracle = edit_distance_naive(
                &a.chars().collect::<Vec<_>>(),
                &b.chars().collect::<Vec<_>>(),
            );
            assert_eq!(fwd.distance(), oracle, "{a} vs {b}");
            assert_eq!(rev.distance(), oracle, "distance must be symmetric");
            assert_eq!(fwd.substitutions, rev.substitutions, "{a} vs {b}");
            assert_eq!(fwd.deletions, rev.insertions, "{a} vs {b}");
            assert_eq!(fwd.insertions, rev.deletions, "{a} vs {b}");
        }
    }

    #[test]
    fn triangle_inequality_on_random_triples() {
        let alphabet: Vec<char> = "abc".chars().collect();
        let mut rng = crate::rng::stream(29, &["tri"]);
        for _ in 0..300 {
            let mut s = Vec::new();
            for _ in 0..3 {
                let l = rng.gen_range(0..=10);
                s.push((0..l).map(|_| alphabet[rng.gen_range(0..3)]).collect::<String>());
            }
            let d = |x: &str, y: &str| cer(x, y).0.distance();
            assert!(
                d(&s[0], &s[2]) <= d(&s[0], &s[1]) + d(&s[1], &s[2]),
                "triple {s:?}"
            );
        }
    }

    #[test]
    fn corpus_sums_counts_over_lengths() {
        let refs = vec![
            ("u1".to_string(), "abcd".to_string()),
            ("u2".to_string(), "abcdef".to_string()),
        ];
        let hyps = vec![
            ("u1".to_string(), "abxd".to_string()),
            ("u2".to_string(), "abc".to_string()),
        ];
        let score = corpus_score(&refs, &hyps).unwrap();
        // distances 1 and 3 over lengths 4 and 6
        assert!((score.cer - 0.4).abs() < 1e-12);
        assert_eq!(score.per_utterance.len(), 2);
        assert_eq!(score.per_utterance[0].id, "u1");
    }

    #[test]
    fn perfect_hypotheses_score_zero() {
        let refs = vec![("u1".to_string(), "xyz".to_string())];
        let hyps = refs.clone();
        let score = corpus_score(&refs, &hyps).unwrap();
        assert_eq!(score.cer, 0.0);
    }

    #[test]
    fn single_utterance_matches_per_utterance_cer() {
        let refs = vec![("u".to_string(), "kitten".to_string())];
        let hyps = vec![("u".to_string(), "sitting".to_string())];
        let score = corpus_score(&refs, &hyps).unwrap();
        let (_, direct) = cer("kitten", "sitting");
        assert_eq!(score.cer, direct);
    }

    #[test]
    fn missing_hypothesis_counts_as_deletion_and_is_reported() {
        let refs = vec![
            ("u1".to_string(), "ab".to_string()),
            ("u2".to_string(), "cd".to_string()),
        ];
        let hyps = vec![("u1".to_string(), "ab".to_string())];
        let score = corpus_score(&refs, &hyps).unwrap();
        assert_eq!(score.missing, vec!["u2".to_string()]);
        assert!((score.cer - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unknown_hypothesis_id_is_an_error() {
        let refs = vec![("u1".to_string(), "ab".to_string())];
        let hyps = vec![("zz".to_string(), "ab".to_string())];
        assert!(corpus_score(&refs, &hyps).is_err());
    }
}
