//! Turning slot distributions into a query: greedy and beam search over the
//! WHERE clauses.
//!
//! The select aggregate, select column and where-number are fixed by argmax.
//! Each where clause is then filled slot by slot (column, operator, value
//! start, value end). A hypothesis scores the sum of the log-probabilities of
//! its choices: `ln p_wc[col] + ln p_wo[col][op] + start[s] + end[e]` per
//! clause. The beam keeps the `B` best partial hypotheses after every slot;
//! ties are broken by the lexicographic order of the choice sequence.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::heads::{argmax, SlotDistributions, N_OP};
use crate::sketch::{Aggregate, Condition, Operator, SqlQuery, MAX_CONDITIONS};
use crate::tokenize::{extract_span, Token};

pub const DEFAULT_BEAM_WIDTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Clause {
    pub col: usize,
    pub op: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub conds: Vec<Clause>,
    /// Sum of log-probabilities of every choice, never positive.
    pub score: f64,
}

/// Candidate caps per slot; `None` means unlimited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pruning {
    pub columns: Option<usize>,
    pub ops: Option<usize>,
    pub starts: Option<usize>,
    pub ends: Option<usize>,
}

impl Default for Pruning {
    fn default() -> Self {
        Self {
            columns: Some(16),
            ops: Some(3),
            starts: Some(16),
            ends: Some(16),
        }
    }
}

impl Pruning {
    pub fn none() -> Self {
        Self {
            columns: None,
            ops: None,
            starts: None,
            ends: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub pruning: Pruning,
}

impl BeamConfig {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            pruning: Pruning::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decoder {
    Greedy,
    Beam(BeamConfig),
}

fn ln(p: f64) -> f64 {
    p.ln()
}

/// Number of where clauses to produce: argmax of `p_wn`, capped by the
/// number of distinct columns and by the presence of tokens to point at.
pub fn where_count(dists: &SlotDistributions) -> usize {
    if dists.n_tokens() == 0 {
        return 0;
    }
    argmax(&dists.p_wn).min(dists.n_headers())
}

pub fn clause_score(dists: &SlotDistributions, c: &Clause) -> f64 {
    ln(dists.p_wc[c.col])
        + ln(dists.p_wo[c.col][c.op])
        + dists.wv_start[c.col][c.op][c.start]
        + dists.wv_end[c.col][c.op][c.end]
}

/// Recomputes a hypothesis score from scratch, adding slot by slot in the
/// same order as the search.
pub fn hypothesis_score(dists: &SlotDistributions, conds: &[Clause]) -> f64 {
    let mut s = 0.0;
    for c in conds {
        s += ln(dists.p_wc[c.col]);
        s += ln(dists.p_wo[c.col][c.op]);
        s += dists.wv_start[c.col][c.op][c.start];
        s += dists.wv_end[c.col][c.op][c.end];
    }
    s
}

/// Indices sorted by descending value, ties to the lower index.
fn ranked(values: impl Iterator<Item = f64>) -> Vec<usize> {
    let v: Vec<f64> = values.collect();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

pub fn greedy_hypothesis(dists: &SlotDistributions) -> Hypothesis {
    let wn = where_count(dists);
    let cols = ranked(dists.p_wc.iter().copied());
    let conds: Vec<Clause> = cols[..wn]
        .iter()
        .map(|&col| {
            let op = argmax(&dists.p_wo[col]);
            let starts = &dists.wv_start[col][op];
            let start = argmax(starts);
            let end = start + argmax(&dists.wv_end[col][op][start..]);
            Clause { col, op, start, end }
        })
        .collect();
    Hypothesis {
        score: hypothesis_score(dists, &conds),
        conds,
    }
}

/// Pre-ranked candidate lists shared by every beam pass.
struct Ranking {
    cols: Vec<usize>,
    ops: Vec<Vec<usize>>,
    starts: Vec<Vec<Vec<usize>>>,
    /// `ends[col][op][start]`: positions `>= start`, best first.
    ends: Vec<Vec<Vec<Vec<usize>>>>,
}

impl Ranking {
    fn new(d: &SlotDistributions) -> Self {
        let n_h = d.n_headers();
        Self {
            cols: ranked(d.p_wc.iter().copied()),
            ops: (0..n_h).map(|c| ranked(d.p_wo[c].iter().copied())).collect(),
            starts: (0..n_h)
                .map(|c| (0..N_OP).map(|o| ranked(d.wv_start[c][o].iter().copied())).collect())
                .collect(),
            ends: (0..n_h)
                .map(|c| {
                    (0..N_OP)
                        .map(|o| {
                            let e = &d.wv_end[c][o];
                            (0..e.len())
                                .map(|s| ranked(e[s..].iter().copied()).into_iter().map(|i| s + i).collect())
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

const MAX_SLOTS: usize = 4 * MAX_CONDITIONS;

/// A partial hypothesis: its choice sequence `col, op, start, end, col, ...`.
#[derive(Clone, Copy)]
struct Partial {
    seq: [u32; MAX_SLOTS],
    len: usize,
    score: f64,
}

impl Partial {
    const EMPTY: Partial = Partial {
        seq: [0; MAX_SLOTS],
        len: 0,
        score: 0.0,
    };

    fn choices(&self) -> &[u32] {
        &self.seq[..self.len]
    }

    fn slot(&self, i: usize) -> usize {
        self.seq[i] as usize
    }
}

/// Better first: higher score, then lexicographically smaller sequence.
fn better(a: &Partial, b: &Partial) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.choices().cmp(b.choices()))
}

fn cap(limit: Option<usize>) -> usize {
    limit.unwrap_or(usize::MAX)
}

fn expand(d: &SlotDistributions, r: &Ranking, p: &Pruning, h: &Partial, out: &mut Vec<Partial>) {
    let slot = h.len % 4;
    let base = h.len - slot;
    let mut push = |choice: usize, lp: f64| {
        let mut next = *h;
        next.seq[h.len] = u32::try_from(choice).expect("index fits in u32");
        next.len += 1;
        next.score += lp;
        out.push(next);
    };
    match slot {
        0 => {
            let used = |c: usize| (0..h.len).step_by(4).any(|i| h.slot(i) == c);
            for &c in r.cols.iter().filter(|&&c| !used(c)).take(cap(p.columns)) {
                push(c, ln(d.p_wc[c]));
            }
        }
        1 => {
            let c = h.slot(base);
            for &o in r.ops[c].iter().take(cap(p.ops)) {
                push(o, ln(d.p_wo[c][o]));
            }
        }
        2 => {
            let (c, o) = (h.slot(base), h.slot(base + 1));
            for &s in r.starts[c][o].iter().take(cap(p.starts)) {
                push(s, d.wv_start[c][o][s]);
            }
        }
        _ => {
            let (c, o, s) = (h.slot(base), h.slot(base + 1), h.slot(base + 2));
            for &e in r.ends[c][o][s].iter().take(cap(p.ends)) {
                push(e, d.wv_end[c][o][e]);
            }
        }
    }
}

fn to_hypothesis(p: Partial) -> Hypothesis {
    Hypothesis {
        conds: p
            .choices()
            .chunks(4)
            .map(|c| Clause {
                col: c[0] as usize,
                op: c[1] as usize,
                start: c[2] as usize,
                end: c[3] as usize,
            })
            .collect(),
        score: p.score,
    }
}

/// One plain beam pass. Also reports whether any non-final slot had to drop
/// hypotheses (if not, every wider pass returns the same result).
fn pass(d: &SlotDistributions, r: &Ranking, wn: usize, width: usize, pruning: &Pruning) -> (Partial, bool) {
    let steps = 4 * wn;
    let mut frontier = vec![Partial::EMPTY];
    let mut truncated = false;
    for step in 0..steps {
        let mut next = Vec::new();
        for h in &frontier {
            expand(d, r, pruning, h, &mut next);
        }
        if step + 1 == steps {
            frontier = next;
            break;
        }
        if next.len() > width {
            truncated = true;
            next.select_nth_unstable_by(width - 1, better);
            next.truncate(width);
        }
        frontier = next;
    }
    let best = frontier
        .into_iter()
        .min_by(better)
        .expect("distinct columns are available for every clause");
    (best, truncated)
}

/// Best complete hypothesis over plain beam passes of widths `1..=width`.
/// The score is therefore non-decreasing in `width`, width 1 reproduces
/// [`greedy_hypothesis`], and a width that never forces a drop equals
/// [`exhaustive`] when unpruned.
pub fn beam_hypothesis(dists: &SlotDistributions, config: &BeamConfig) -> Hypothesis {
    assert!(config.width >= 1, "beam width must be at least 1");
    let wn = where_count(dists);
    let ranking = Ranking::new(dists);
    let mut best: Option<Partial> = None;
    for w in 1..=config.width {
        let (p, truncated) = pass(dists, &ranking, wn, w, &config.pruning);
        best = match best {
            Some(b) if better(&b, &p) != Ordering::Greater => Some(b),
            _ => Some(p),
        };
        if !truncated {
            break;
        }
    }
    to_hypothesis(best.expect("at least one pass"))
}

/// Every sequence of `where_count` clauses with distinct columns, no pruning.
pub fn exhaustive(dists: &SlotDistributions) -> Hypothesis {
    let wn = where_count(dists);
    let ranking = Ranking::new(dists);
    let mut frontier = vec![Partial::EMPTY];
    for _ in 0..4 * wn {
        let mut next = Vec::new();
        for h in &frontier {
            expand(dists, &ranking, &Pruning::none(), h, &mut next);
        }
        frontier = next;
    }
    to_hypothesis(frontier.into_iter().min_by(better).expect("non-empty"))
}

pub fn render(dists: &SlotDistributions, hyp: &Hypothesis, question: &str, tokens: &[Token]) -> SqlQuery {
    SqlQuery {
        agg: Aggregate::ALL[argmax(&dists.p_sa)],
        sel: argmax(&dists.p_sc),
        conds: hyp
            .conds
            .iter()
            .map(|c| Condition {
                col: c.col,
                op: Operator::ALL[c.op],
                value: extract_span(question, tokens, c.start, c.end),
            })
            .collect(),
    }
}

pub fn greedy(dists: &SlotDistributions, question: &str, tokens: &[Token]) -> SqlQuery {
    render(dists, &greedy_hypothesis(dists), question, tokens)
}

pub fn beam(dists: &SlotDistributions, question: &str, tokens: &[Token], width: usize) -> SqlQuery {
    beam_with(dists, question, tokens, &BeamConfig::new(width))
}

pub fn beam_with(dists: &SlotDistributions, question: &str, tokens: &[Token], config: &BeamConfig) -> SqlQuery {
    render(dists, &beam_hypothesis(dists, config), question, tokens)
}

pub fn decode(decoder: &Decoder, dists: &SlotDistributions, question: &str, tokens: &[Token]) -> SqlQuery {
    match decoder {
        Decoder::Greedy => greedy(dists, question, tokens),
        Decoder::Beam(cfg) => beam_with(dists, question, tokens, cfg),
    }
}
