//! ROVER-style multi-system fusion: hypotheses are aligned one after another
//! into a word transition network (character-level here, matching the CER
//! metric), then each slot is decided by voting.

use crate::error::{Error, Result};
use std::collections::BTreeSet;

/// One system's contribution to a slot: a token or NULL (no token), plus an
/// optional confidence for weighted voting.
#[derive(Clone, Debug, PartialEq)]
pub struct WtnEntry {
    pub token: Option<char>,
    pub system: usize,
    pub confidence: Option<f32>,
}

/// Ordered correspondence slots; every aligned system contributes exactly one
/// entry per slot, and slot order respects every system's token order.
#[derive(Clone, Debug, Default)]
pub struct WordTransitionNetwork {
    slots: Vec<Vec<WtnEntry>>,
    num_systems: usize,
}

impl WordTransitionNetwork {
    /// Seed the network from the base (first) system.
    pub fn from_base(tokens: &[char], confidence: Option<f32>) -> Self {
        WordTransitionNetwork {
            slots: tokens
                .iter()
                .map(|&c| {
                    vec![WtnEntry {
                        token: Some(c),
                        system: 0,
                        confidence,
                    }]
                })
                .collect(),
            num_systems: 1,
        }
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn num_systems(&self) -> usize {
        self.num_systems
    }

    pub fn slots(&self) -> &[Vec<WtnEntry>] {
        &self.slots
    }
}

/// Alignment move, in tie-break preference order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Move {
    Match,
    Substitute,
    Delete,
    Insert,
}

/// Cost of placing hypothesis token `tok` (or NULL) into an existing slot:
/// 0 on a match with any entry (tokens match, or NULL meets NULL), else 1.
fn slot_cost(slot: &[WtnEntry], tok: Option<char>) -> usize {
    if slot.iter().any(|e| e.token == tok) {
        0
    } else {
        1
    }
}

/// Align a hypothesis into the network by dynamic programming. Matches cost
/// 0; substitutions, deletions, and token-vs-NULL each cost 1; insertions
/// open a new slot (cost 1) back-filled with NULL for all earlier systems.
/// Ties prefer match > substitution > deletion > insertion. Returns the
/// alignment cost.
pub fn align_into_wtn(
    wtn: &mut WordTransitionNetwork,
    hypothesis: &[char],
    confidence: Option<f32>,
) -> usize {
    let system = wtn.num_systems;
    let s = wtn.slots.len();
    let l = hypothesis.len();
    // cost[i][j]: first i slots aligned against first j hypothesis tokens.
    let mut cost = vec![vec![0usize; l + 1]; s + 1];
    let mut back = vec![vec![Move::Match; l + 1]; s + 1];
    for i in 1..=s {
        cost[i][0] = cost[i - 1][0] + slot_cost(&wtn.slots[i - 1], None);
        back[i][0] = Move::Delete;
    }
    for j in 1..=l {
        cost[0][j] = j;
        back[0][j] = Move::Insert;
    }
    for i in 1..=s {
        for j in 1..=l {
            let diag_cost = slot_cost(&wtn.slots[i - 1], Some(hypothesis[j - 1]));
            let diag_move = if diag_cost == 0 { Move::Match } else { Move::Substitute };
            let mut best = cost[i - 1][j - 1] + diag_cost;
            let mut mv = diag_move;
            let del = cost[i - 1][j] + slot_cost(&wtn.slots[i - 1], None);
            if del < best {
                best = del;
                mv = Move::Delete;
            }
            let ins = cost[i][j - 1] + 1;
            if ins < best {
                best = ins;
                mv = Move::Insert;
            }
            cost[i][j] = best;
            back[i][j] = mv;
        }
    }

    // Backtrace, collecting edits back-to-front.
    let mut edits: Vec<(Move, usize, Option<char>)> = Vec::new();
    let (mut i, mut j) = (s, l);
    while i > 0 || j > 0 {
        match back[i][j] {
            Move::Match | Move::Substitute if i > 0 && j > 0 => {
                edits.push((Move::Match, i - 1, Some(hypothesis[j - 1])));
                i -= 1;
                j -= 1;
            }
            Move::Delete if i > 0 => {
                edits.push((Move::Delete, i - 1, None));
                i -= 1;
            }
            _ => {
                edits.push((Move::Insert, i, Some(hypothesis[j - 1])));
                j -= 1;
            }
        }
    }
    edits.reverse();

    // Apply front-to-back; insertions create new slots. Indices shift as
    // slots are inserted, tracked by `offset`.
    let total = cost[s][l];
    let mut offset = 0usize;
    for (mv, slot_idx, tok) in edits {
        match mv {
            Move::Match | Move::Substitute | Move::Delete => {
                wtn.slots[slot_idx + offset].push(WtnEntry {
                    token: tok,
                    system,
                    confidence,
                });
            }
            Move::Insert => {
                let mut slot: Vec<WtnEntry> = (0..system)
                    .map(|sys| WtnEntry {
                        token: None,
                        system: sys,
                        confidence: None,
                    })
                    .collect();
                slot.push(WtnEntry {
                    token: tok,
                    system,
                    confidence,
                });
                wtn.slots.insert(slot_idx + offset, slot);
                offset += 1;
            }
        }
    }
    wtn.num_systems += 1;
    total
}

/// Vote one slot: `score(t) = (1-w) * freq(t)/num_systems + w * avg_conf(t)`.
/// Ties prefer a non-NULL token, then the token contributed by the earliest
/// system in input order. Returns the winning token (None = NULL wins).
fn vote_slot(slot: &[WtnEntry], num_systems: usize, w: f32) -> Option<char> {
    struct Tally {
        count: usize,
        conf_sum: f64,
        earliest: usize,
    }
    let mut tallies: Vec<(Option<char>, Tally)> = Vec::new();
    for e in slot {
        match tallies.iter_mut().find(|(tok, _)| *tok == e.token) {
            Some((_, t)) => {
                t.count += 1;
                t.conf_sum += e.confidence.unwrap_or(0.0) as f64;
                t.earliest = t.earliest.min(e.system);
            }
            None => tallies.push((
                e.token,
                Tally {
                    count: 1,
                    conf_sum: e.confidence.unwrap_or(0.0) as f64,
                    earliest: e.system,
                },
            )),
        }
    }
    let score = |t: &Tally| {
        (1.0 - w as f64) * t.count as f64 / num_systems as f64
            + w as f64 * t.conf_sum / t.count as f64
    };
    let mut best: Option<(&Option<char>, &Tally)> = None;
    for (tok, tally) in &tallies {
        let replace = match best {
            None => true,
            Some((btok, btally)) => {
                let (s, bs) = (score(tally), score(btally));
                if s != bs {
                    s > bs
                } else if tok.is_some() != btok.is_some() {
                    tok.is_some()
                } else {
                    tally.earliest < btally.earliest
                }
            }
        };
        if replace {
            best = Some((tok, tally));
        }
    }
    best.and_then(|(tok, _)| *tok)
}

/// Fuse one utterance: build the network by aligning systems in order, then
/// vote slot by slot, dropping NULL winners.
pub fn fuse_utterance(hypotheses: &[(&str, Option<f32>)], confidence_weight: f32) -> Result<String> {
    if hypotheses.len() < 2 {
        return Err(Error::Config("rover: need at least 2 systems".to_string()));
    }
    let tokenized: Vec<Vec<char>> = hypotheses
        .iter()
        .map(|(text, _)| text.chars().filter(|c| !c.is_whitespace()).collect())
        .collect();
    let mut wtn = WordTransitionNetwork::from_base(&tokenized[0], hypotheses[0].1);
    for (sys, toks) in tokenized.iter().enumerate().skip(1) {
        align_into_wtn(&mut wtn, toks, hypotheses[sys].1);
    }
    let n = wtn.num_systems();
    Ok(wtn
        .slots()
        .iter()
        .filter_map(|slot| vote_slot(slot, n, confidence_weight))
        .collect())
}

/// Fuse whole hypothesis files (id -> text). The utterance id sets must
/// match exactly; order of systems decides alignment base and tie-breaks.
pub fn rover_fuse(
    systems: &[Vec<(String, String)>],
    confidence_weight: f32,
) -> Result<Vec<(String, String)>> {
    if systems.len() < 2 {
        return Err(Error::Config("rover: need at least 2 systems".to_string()));
    }
    if !(0.0..=1.0).contains(&confidence_weight) {
        return Err(Error::Config("rover: confidence weight must be in [0, 1]".to_string()));
    }
    let id_sets: Vec<BTreeSet<&str>> = systems
        .iter()
        .map(|s| s.iter().map(|(id, _)| id.as_str()).collect())
        .collect();
    for (i, set) in id_sets.iter().enumerate().skip(1) {
        if set != &id_sets[0] {
            let missing: Vec<&&str> = id_sets[0].difference(set).collect();
            let extra: Vec<&&str> = set.difference(&id_sets[0]).collect();
            return Err(Error::Data(format!(
                "rover: utterance ids of system {i} differ from system 0: missing {missing:?}, extra {extra:?}"
            )));
        }
    }
    let mut out = Vec::with_capacity(id_sets[0].len());
    for id in &id_sets[0] {
        let per_system: Vec<(&str, Option<f32>)> = systems
            .iter()
            .map(|s| {
                let (_, text) = s
                    .iter()
                    .find(|(sid, _)| sid == id)
                    .expect("id set verified");
                (text.as_str(), None)
            })
            .collect();
        let fused = fuse_utterance(&per_system, confidence_weight)?;
        out.push((id.to_string(), fused));
    }
    Ok(out)
}
