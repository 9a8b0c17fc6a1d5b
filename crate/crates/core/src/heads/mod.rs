//! The six slot predictors and their losses.
//!
//! Each head runs its own bidirectional LSTM over the question rows of the
//! encoder output, pools with attention, adds a bias and maps to logits:
//!
//! * `sa`, `wn`: self-attention pooled question plus mean header vector.
//! * `sc`: per-header question summary (column attention), softmax over headers.
//! * `wc`: as `sc`, additionally conditioned on the where-number, with an
//!   independent sigmoid per header.
//! * `wo`: per-header three-way operator distribution, conditioned on the
//!   column (its row) and the where-number.
//! * `wv`: start/end pointers over question tokens, conditioned on column,
//!   operator and where-number.
//!
//! Conditioning is on hard values: gold during training, decoded at inference.

mod gradcheck;
mod train;

pub use gradcheck::{
    grad_check, max_relative_error, relative_error, tiny_grad_check_case, GradCheckReport, RELATIVE_FLOOR,
};
pub use train::{example_loss, train, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderOutput;
use crate::nn::{
    AttentionPool, BiLstm, ColumnAttention, Graph, Linear, ParamBuilder, ParamId, ParamStore, Tensor, Var,
};
use crate::sketch::{Operator, SqlQuery, MAX_CONDITIONS};
use crate::tokenize::{find_value_span, Token};

pub const N_AGG: usize = 6;
pub const N_WN: usize = MAX_CONDITIONS + 1;
pub const N_OP: usize = 3;

pub const HEAD_NAMES: [&str; 6] = ["sa", "sc", "wn", "wc", "wo", "wv"];

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct PooledHead {
    rnn: BiLstm,
    pool: AttentionPool,
    q: Linear,
    h: Linear,
    out: Linear,
}

impl PooledHead {
    fn new(pb: &mut ParamBuilder, name: &str, d: usize, k: usize, classes: usize) -> Self {
        Self {
            rnn: BiLstm::new(pb, &format!("{name}.rnn"), d, k),
            pool: AttentionPool::new(pb, &format!("{name}.pool"), 2 * k, k),
            q: Linear::new(pb, &format!("{name}.q"), 2 * k, k, true),
            h: Linear::new(pb, &format!("{name}.h"), d, k, false),
            out: Linear::new(pb, &format!("{name}.out"), k, classes, true),
        }
    }

    /// `1 x classes` logits.
    fn forward(&self, g: &mut Graph, q: Var, h: Var) -> Var {
        let qs = self.rnn.forward(g, q);
        let pooled = self.pool.forward(g, qs);
        let hm = g.mean_rows(h);
        let a = self.q.forward(g, pooled);
        let b = self.h.forward(g, hm);
        let pre = g.add(a, b);
        let hidden = g.tanh(pre);
        self.out.forward(g, hidden)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ColumnHead {
    rnn: BiLstm,
    att: ColumnAttention,
    q: Linear,
    h: Linear,
    wn_embed: Option<ParamId>,
    out: Linear,
}

impl ColumnHead {
    fn new(pb: &mut ParamBuilder, name: &str, d: usize, k: usize, outputs: usize, uses_wn: bool) -> Self {
        Self {
            rnn: BiLstm::new(pb, &format!("{name}.rnn"), d, k),
            att: ColumnAttention::new(pb, &format!("{name}.att"), d, 2 * k),
            q: Linear::new(pb, &format!("{name}.q"), 2 * k, k, true),
            h: Linear::new(pb, &format!("{name}.h"), d, k, false),
            wn_embed: uses_wn.then(|| pb.uniform(format!("{name}.wn_embed"), N_WN, k)),
            out: Linear::new(pb, &format!("{name}.out"), k, outputs, true),
        }
    }

    /// `n_h x outputs` scores.
    fn forward(&self, g: &mut Graph, q: Var, h: Var, wn: usize) -> Var {
        let qs = self.rnn.forward(g, q);
        let ctx = self.att.forward(g, qs, h);
        let a = self.q.forward(g, ctx);
        let b = self.h.forward(g, h);
        let mut pre = g.add(a, b);
        if let Some(e) = self.wn_embed {
            let table = g.param(e);
            let row = g.gather_rows(table, vec![wn]);
            pre = g.add_row(pre, row);
        }
        let hidden = g.tanh(pre);
        self.out.forward(g, hidden)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct Pointer {
    q: Linear,
    v: Linear,
    bilinear: ParamId,
}

impl Pointer {
    fn new(pb: &mut ParamBuilder, name: &str, d: usize, k: usize) -> Self {
        Self {
            q: Linear::new(pb, &format!("{name}.q"), 2 * k, k, false),
            v: Linear::new(pb, &format!("{name}.v"), k, 1, true),
            bilinear: pb.uniform(format!("{name}.bilinear"), d, 2 * k),
        }
    }

    /// `1 x n_q` log-probabilities over token positions.
    fn forward(&self, g: &mut Graph, qv: Var, qproj: Var, header: Var, cond: Var) -> Var {
        let pre = g.add_row(qproj, cond);
        let hidden = g.tanh(pre);
        let additive = self.v.forward(g, hidden);
        let w = g.param(self.bilinear);
        let hb = g.matmul(header, w);
        let hbt = g.transpose(hb);
        let bil = g.matmul(qv, hbt);
        let logits = g.add(additive, bil);
        let row = g.transpose(logits);
        g.log_softmax_rows(row)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ValueHead {
    rnn: BiLstm,
    cond_h: Linear,
    op_embed: ParamId,
    wn_embed: ParamId,
    start: Pointer,
    end: Pointer,
}

impl ValueHead {
    fn new(pb: &mut ParamBuilder, name: &str, d: usize, k: usize) -> Self {
        Self {
            rnn: BiLstm::new(pb, &format!("{name}.rnn"), d, k),
            cond_h: Linear::new(pb, &format!("{name}.cond_h"), d, k, true),
            op_embed: pb.uniform(format!("{name}.op_embed"), N_OP, k),
            wn_embed: pb.uniform(format!("{name}.wn_embed"), N_WN, k),
            start: Pointer::new(pb, &format!("{name}.start"), d, k),
            end: Pointer::new(pb, &format!("{name}.end"), d, k),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        q: Var,
        h: Var,
        wn: usize,
        pairs: &[(usize, usize)],
    ) -> Vec<((usize, usize), Var, Var)> {
        if pairs.is_empty() {
            return Vec::new();
        }
        let qv = self.rnn.forward(g, q);
        let qs = self.start.q.forward(g, qv);
        let qe = self.end.q.forward(g, qv);
        let hc = self.cond_h.forward(g, h);
        let ops = g.param(self.op_embed);
        let wns = g.param(self.wn_embed);
        let wn_row = g.gather_rows(wns, vec![wn]);
        pairs
            .iter()
            .map(|&(col, op)| {
                let header = g.row(h, col);
                let hrow = g.row(hc, col);
                let op_row = g.gather_rows(ops, vec![op]);
                let cond = g.add(hrow, op_row);
                let cond = g.add(cond, wn_row);
                let s = self.start.forward(g, qv, qs, header, cond);
                let e = self.end.forward(g, qv, qe, header, cond);
                ((col, op), s, e)
            })
            .collect()
    }
}

/// Parameter handles of all six heads.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HeadLayers {
    sa: PooledHead,
    sc: ColumnHead,
    wn: PooledHead,
    wc: ColumnHead,
    wo: ColumnHead,
    wv: ValueHead,
}

impl HeadLayers {
    /// `input_dim` is the encoder row width, `hidden` the per-direction LSTM size.
    pub fn declare(pb: &mut ParamBuilder, input_dim: usize, hidden: usize) -> Self {
        let (d, k) = (input_dim, hidden);
        Self {
            sa: PooledHead::new(pb, "sa", d, k, N_AGG),
            sc: ColumnHead::new(pb, "sc", d, k, 1, false),
            wn: PooledHead::new(pb, "wn", d, k, N_WN),
            wc: ColumnHead::new(pb, "wc", d, k, 1, true),
            wo: ColumnHead::new(pb, "wo", d, k, N_OP, true),
            wv: ValueHead::new(pb, "wv", d, k),
        }
    }
}

/// Where-number fed to the downstream heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Teacher forcing.
    Gold(usize),
    /// Argmax of the model's own where-number distribution.
    Predicted,
}

/// Head outputs on the tape.
pub(crate) struct HeadVars {
    pub sa: Var,
    pub sc: Var,
    pub wn: Var,
    pub wc: Var,
    pub wo: Var,
    pub wv: Vec<((usize, usize), Var, Var)>,
    pub wn_used: usize,
}

/// Which (column, operator) pairs get value pointers.
pub(crate) enum ValuePairs<'a> {
    All,
    Only(&'a [(usize, usize)]),
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn heads_graph(
    g: &mut Graph,
    heads: &HeadLayers,
    q: Var,
    h: Var,
    cond: Conditioning,
    pairs: ValuePairs,
) -> HeadVars {
    let n_h = g.shape(h).0;
    let sa_logits = heads.sa.forward(g, q, h);
    let sa = g.log_softmax_rows(sa_logits);
    let sc_scores = heads.sc.forward(g, q, h, 0);
    let sc_row = g.transpose(sc_scores);
    let sc = g.log_softmax_rows(sc_row);
    let wn_logits = heads.wn.forward(g, q, h);
    let wn = g.log_softmax_rows(wn_logits);
    let wn_used = match cond {
        Conditioning::Gold(k) => k,
        Conditioning::Predicted => argmax(&g.value(wn).data),
    };
    let wc = heads.wc.forward(g, q, h, wn_used);
    let wo_logits = heads.wo.forward(g, q, h, wn_used);
    let wo = g.log_softmax_rows(wo_logits);
    let all: Vec<(usize, usize)>;
    let pairs = match pairs {
        ValuePairs::All => {
            all = (0..n_h).flat_map(|c| (0..N_OP).map(move |o| (c, o))).collect();
            &all[..]
        }
        ValuePairs::Only(p) => p,
    };
    let wv = heads.wv.forward(g, q, h, wn_used, pairs);
    HeadVars {
        sa,
        sc,
        wn,
        wc,
        wo,
        wv,
        wn_used,
    }
}

/// The six predicted distributions for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDistributions {
    pub p_sa: Vec<f64>,
    pub p_sc: Vec<f64>,
    pub p_wn: Vec<f64>,
    /// Independent per-header probabilities.
    pub p_wc: Vec<f64>,
    pub p_wo: Vec<[f64; N_OP]>,
    /// `wv_start[col][op][token]`, log-probabilities.
    pub wv_start: Vec<[Vec<f64>; N_OP]>,
    pub wv_end: Vec<[Vec<f64>; N_OP]>,
    /// Where-number the `wc`/`wo`/`wv` heads were conditioned on.
    pub wn_used: usize,
}

impl SlotDistributions {
    pub fn n_headers(&self) -> usize {
        self.p_sc.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.wv_start.first().map_or(0, |v| v[0].len())
    }
}

pub(crate) fn distributions_from(g: &Graph, vars: &HeadVars) -> SlotDistributions {
    let exp = |v: Var| g.value(v).data.iter().map(|x| x.exp()).collect::<Vec<_>>();
    let n_h = g.shape(vars.sc).1;
    let wo = g.value(vars.wo);
    let p_wo = (0..n_h)
        .map(|c| [wo.get(c, 0).exp(), wo.get(c, 1).exp(), wo.get(c, 2).exp()])
        .collect();
    let empty = || [Vec::new(), Vec::new(), Vec::new()];
    let mut wv_start: Vec<[Vec<f64>; N_OP]> = (0..n_h).map(|_| empty()).collect();
    let mut wv_end: Vec<[Vec<f64>; N_OP]> = (0..n_h).map(|_| empty()).collect();
    for &((c, o), s, e) in &vars.wv {
        wv_start[c][o] = g.value(s).data.clone();
        wv_end[c][o] = g.value(e).data.clone();
    }
    SlotDistributions {
        p_sa: exp(vars.sa),
        p_sc: exp(vars.sc),
        p_wn: exp(vars.wn),
        p_wc: g
            .value(vars.wc)
            .data
            .iter()
            .map(|&z| 1.0 / (1.0 + (-z).exp()))
            .collect(),
        p_wo,
        wv_start,
        wv_end,
        wn_used: vars.wn_used,
    }
}

/// Runs the heads on a fixed encoder output. Panics on an empty question or schema.
pub fn forward(heads: &HeadLayers, params: &ParamStore, enc: &EncoderOutput, cond: Conditioning) -> SlotDistributions {
    assert!(enc.q_vectors.rows > 0 && enc.h_vectors.rows > 0, "empty encoder output");
    let mut g = Graph::new(params);
    let q = g.input(enc.q_vectors.clone());
    let h = g.input(enc.h_vectors.clone());
    let vars = heads_graph(&mut g, heads, q, h, cond, ValuePairs::All);
    distributions_from(&g, &vars)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldCondition {
    pub col: usize,
    pub op: usize,
    /// Inclusive token span of the value, if it occurs in the question.
    pub span: Option<(usize, usize)>,
}

/// Supervision targets for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldTargets {
    pub sa: usize,
    pub sc: usize,
    pub wn: usize,
    /// One entry per distinct where column, first occurrence wins.
    pub conds: Vec<GoldCondition>,
}

impl GoldTargets {
    pub fn from_query(gold: &SqlQuery, tokens: &[Token]) -> Self {
        let mut conds: Vec<GoldCondition> = Vec::new();
        for c in &gold.conds {
            if conds.iter().any(|g| g.col == c.col) {
                continue;
            }
            conds.push(GoldCondition {
                col: c.col,
                op: c.op.id(),
                span: find_value_span(tokens, &c.value),
            });
        }
        Self {
            sa: gold.agg.id(),
            sc: gold.sel,
            wn: gold.conds.len(),
            conds,
        }
    }

    pub fn where_columns(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.conds.iter().map(|c| c.col).collect();
        v.sort_unstable();
        v
    }

    /// Conditions whose value has no token span and so no value supervision.
    pub fn missing_spans(&self) -> usize {
        self.conds.iter().filter(|c| c.span.is_none()).count()
    }

    pub(crate) fn value_pairs(&self) -> Vec<(usize, usize)> {
        self.conds
            .iter()
            .filter(|c| c.span.is_some())
            .map(|c| (c.col, c.op))
            .collect()
    }

    pub fn operator(op: usize) -> Operator {
        Operator::ALL[op]
    }
}

/// Total and per-head loss values in [`HEAD_NAMES`] order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_head: [f64; 6],
}

impl LossBreakdown {
    pub fn first_non_finite(&self) -> Option<(&'static str, f64)> {
        HEAD_NAMES
            .iter()
            .zip(self.per_head)
            .find(|(_, v)| !v.is_finite())
            .map(|(n, v)| (*n, v))
    }
}

pub(crate) struct LossVars {
    pub total: Var,
    pub per_head: [Var; 6],
}

pub(crate) fn loss_graph(g: &mut Graph, vars: &HeadVars, gold: &GoldTargets) -> LossVars {
    let nll = |g: &mut Graph, v: Var, r: usize, c: usize| {
        let p = g.pick(v, r, c);
        g.scale(p, -1.0)
    };
    let sa = nll(g, vars.sa, 0, gold.sa);
    let sc = nll(g, vars.sc, 0, gold.sc);
    let wn = nll(g, vars.wn, 0, gold.wn.min(N_WN - 1));

    let n_h = g.shape(vars.wc).0;
    let pos = g.log_sigmoid(vars.wc);
    let neg_logits = g.scale(vars.wc, -1.0);
    let neg = g.log_sigmoid(neg_logits);
    let cols = gold.where_columns();
    let terms: Vec<Var> = (0..n_h)
        .map(|j| {
            let src = if cols.contains(&j) { pos } else { neg };
            nll(g, src, j, 0)
        })
        .collect();
    let wc = g.add_scalars(&terms);

    let terms: Vec<Var> = gold.conds.iter().map(|c| nll(g, vars.wo, c.col, c.op)).collect();
    let wo = g.add_scalars(&terms);

    let mut terms = Vec::new();
    for c in &gold.conds {
        let Some((s, e)) = c.span else { continue };
        let &(_, sv, ev) = vars
            .wv
            .iter()
            .find(|(pair, _, _)| *pair == (c.col, c.op))
            .expect("value pointer computed for every supervised pair");
        terms.push(nll(g, sv, 0, s));
        terms.push(nll(g, ev, 0, e));
    }
    let wv = g.add_scalars(&terms);

    let per_head = [sa, sc, wn, wc, wo, wv];
    let total = g.add_scalars(&per_head);
    LossVars { total, per_head }
}

pub(crate) fn breakdown(g: &Graph, lv: &LossVars) -> LossBreakdown {
    let mut per_head = [0.0; 6];
    for (o, v) in per_head.iter_mut().zip(lv.per_head) {
        *o = g.value(v).data[0];
    }
    LossBreakdown {
        total: g.value(lv.total).data[0],
        per_head,
    }
}

/// Loss of already-computed distributions: cross-entropy for `sa`, `sc`,
/// `wn`, `wo` and the value pointers, binary cross-entropy per header for
/// `wc`, summed without weights.
pub fn loss(dists: &SlotDistributions, gold: &GoldTargets) -> LossBreakdown {
    let nll = |p: f64| -p.ln();
    let sa = nll(dists.p_sa[gold.sa]);
    let sc = nll(dists.p_sc[gold.sc]);
    let wn = nll(dists.p_wn[gold.wn.min(N_WN - 1)]);
    let cols = gold.where_columns();
    let wc = dists
        .p_wc
        .iter()
        .enumerate()
        .map(|(j, &p)| if cols.contains(&j) { nll(p) } else { nll(1.0 - p) })
        .sum::<f64>();
    let wo = gold.conds.iter().map(|c| nll(dists.p_wo[c.col][c.op])).sum::<f64>();
    let wv = gold
        .conds
        .iter()
        .filter_map(|c| {
            c.span
                .map(|(s, e)| -(dists.wv_start[c.col][c.op][s] + dists.wv_end[c.col][c.op][e]))
        })
        .sum::<f64>();
    let per_head = [sa, sc, wn, wc, wo, wv];
    LossBreakdown {
        total: per_head.iter().sum(),
        per_head,
    }
}

/// One-hot distributions that put all mass on `gold` (for tests and tooling).
pub fn one_hot(gold: &GoldTargets, n_headers: usize, n_tokens: usize) -> SlotDistributions {
    let hot = |n: usize, i: usize| (0..n).map(|k| f64::from(u8::from(k == i))).collect::<Vec<_>>();
    let log_hot = |n: usize, i: usize| {
        (0..n)
            .map(|k| if k == i { 0.0 } else { f64::NEG_INFINITY })
            .collect::<Vec<_>>()
    };
    let cols = gold.where_columns();
    let mut p_wo = vec![[1.0, 0.0, 0.0]; n_headers];
    let uniform = || vec![-(n_tokens as f64).ln(); n_tokens];
    let mut wv_start: Vec<[Vec<f64>; N_OP]> = (0..n_headers).map(|_| [uniform(), uniform(), uniform()]).collect();
    let mut wv_end = wv_start.clone();
    for c in &gold.conds {
        p_wo[c.col] = [0.0; N_OP];
        p_wo[c.col][c.op] = 1.0;
        if let Some((s, e)) = c.span {
            wv_start[c.col][c.op] = log_hot(n_tokens, s);
            wv_end[c.col][c.op] = log_hot(n_tokens, e);
        }
    }
    SlotDistributions {
        p_sa: hot(N_AGG, gold.sa),
        p_sc: hot(n_headers, gold.sc),
        p_wn: hot(N_WN, gold.wn),
        p_wc: (0..n_headers).map(|j| f64::from(u8::from(cols.contains(&j)))).collect(),
        p_wo,
        wv_start,
        wv_end,
        wn_used: gold.wn,
    }
}

/// Shapes used when a tensor is passed across the public boundary.
pub fn tensor_shape(t: &Tensor) -> (usize, usize) {
    t.shape()
}
