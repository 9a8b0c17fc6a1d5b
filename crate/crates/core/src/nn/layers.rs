use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamBuilder, ParamId};

/// `x W + b`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let w = pb.uniform(format!("{name}.w"), input, output);
        let b = bias.then(|| pb.uniform(format!("{name}.b"), 1, output));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// One LSTM direction with gate order input, forget, cell, output.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            wx: pb.uniform(format!("{name}.wx"), input, 4 * hidden),
            wh: pb.uniform(format!("{name}.wh"), hidden, 4 * hidden),
            b: pb.uniform(format!("{name}.b"), 1, 4 * hidden),
            hidden,
        }
    }

    pub fn num_scalars(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden) + 4 * hidden
    }

    /// Hidden states for each row of `x` (n x input), in row order. With
    /// `reverse` the recurrence runs from the last row to the first.
    pub fn forward(&self, g: &mut Graph, x: Var, reverse: bool) -> Var {
        let n = g.shape(x).0;
        let k = self.hidden;
        let wx = g.param(self.wx);
        let wh = g.param(self.wh);
        let b = g.param(self.b);
        let xw = g.matmul(x, wx);
        let xw = g.add_row(xw, b);

        let mut outputs: Vec<Option<Var>> = vec![None; n];
        let mut state: Option<(Var, Var)> = None;
        let order: Vec<usize> = if reverse {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        for t in order {
            let mut gates = g.row(xw, t);
            if let Some((h, _)) = state {
                let hw = g.matmul(h, wh);
                gates = g.add(gates, hw);
            }
            let i = g.slice_cols(gates, 0, k);
            let i = g.sigmoid(i);
            let f = g.slice_cols(gates, k, k);
            let f = g.sigmoid(f);
            let c_in = g.slice_cols(gates, 2 * k, k);
            let c_in = g.tanh(c_in);
            let o = g.slice_cols(gates, 3 * k, k);
            let o = g.sigmoid(o);
            let mut c = g.mul(i, c_in);
            if let Some((_, c_prev)) = state {
                let keep = g.mul(f, c_prev);
                c = g.add(c, keep);
            }
            let ct = g.tanh(c);
            let h = g.mul(o, ct);
            outputs[t] = Some(h);
            state = Some((h, c));
        }
        let rows: Vec<Var> = outputs.into_iter().map(|v| v.expect("every step ran")).collect();
        g.concat_rows(rows)
    }
}

/// Forward and backward LSTMs with concatenated outputs (`n x 2*hidden`).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            fwd: Lstm::new(pb, &format!("{name}.fwd"), input, hidden),
            bwd: Lstm::new(pb, &format!("{name}.bwd"), input, hidden),
        }
    }

    pub fn num_scalars(input: usize, hidden: usize) -> usize {
        2 * Lstm::num_scalars(input, hidden)
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let f = self.fwd.forward(g, x, false);
        let b = self.bwd.forward(g, x, true);
        g.concat_cols(vec![f, b])
    }
}

/// Additive self-attention pooling: `softmax(tanh(x W + b) v)` weighted sum of rows.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttentionPool {
    pub proj: Linear,
    pub v: Linear,
}

impl AttentionPool {
    pub fn new(pb: &mut ParamBuilder, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            proj: Linear::new(pb, &format!("{name}.proj"), input, hidden, true),
            v: Linear::new(pb, &format!("{name}.v"), hidden, 1, false),
        }
    }

    /// `x` is `n x d`; returns `1 x d`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.proj.forward(g, x);
        let h = g.tanh(h);
        let scores = self.v.forward(g, h);
        let weights = g.softmax_cols(scores);
        let wt = g.transpose(weights);
        g.matmul(wt, x)
    }
}

/// For every header row, a question summary weighted by bilinear
/// header-token affinity: `softmax_cols(Q (H W)^T)^T Q`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ColumnAttention {
    pub w: ParamId,
}

impl ColumnAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, header_dim: usize, question_dim: usize) -> Self {
        Self {
            w: pb.uniform(format!("{name}.w"), header_dim, question_dim),
        }
    }

    /// `q` is `n_q x dq`, `h` is `n_h x dh`; returns `n_h x dq`.
    pub fn forward(&self, g: &mut Graph, q: Var, h: Var) -> Var {
        let w = g.param(self.w);
        let hw = g.matmul(h, w);
        let hwt = g.transpose(hw);
        let scores = g.matmul(q, hwt);
        let att = g.softmax_cols(scores);
        let att_t = g.transpose(att);
        g.matmul(att_t, q)
    }
}
