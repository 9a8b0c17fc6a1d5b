//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse and accumulates parameter gradients.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a (n x c) + b (1 x c)` broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Transpose(Var),
    SoftmaxCols(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    Pick(Var, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(row));
        assert_eq!((1, ta.cols), tb.shape(), "broadcast row shape mismatch");
        let mut value = ta.clone();
        for r in 0..value.rows {
            for c in 0..value.cols {
                value.data[r * value.cols + c] += tb.data[c];
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = map(self.value(a), |x| x * k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = map(self.value(a), f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = map(self.value(a), sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = map(self.value(a), |x| -softplus(-x));
        self.push(value, Op::LogSigmoid(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols);
        let mut value = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            value.data[r * len..(r + 1) * len].copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows);
        let value = Tensor::from_vec(len, t.cols, t.data[start * t.cols..(start + len) * t.cols].to_vec());
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, 1)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in &idx {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_vec(idx.len(), t.cols, data);
        self.push(value, Op::GatherRows(a, idx))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in &parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.data[r * cols + offset..r * cols + offset + t.cols].copy_from_slice(t.row(r));
            }
            offset += t.cols;
        }
        self.push(value, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in &parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut value = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for (o, v) in value.data.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let n = t.rows as f64;
        value.data.iter_mut().for_each(|v| *v /= n);
        self.push(value, Op::MeanRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Softmax down each column.
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut value = t.clone();
        for c in 0..t.cols {
            let max = (0..t.rows).map(|r| t.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for r in 0..t.rows {
                let e = (t.get(r, c) - max).exp();
                value.data[r * t.cols + c] = e;
                z += e;
            }
            for r in 0..t.rows {
                value.data[r * t.cols + c] /= z;
            }
        }
        self.push(value, Op::SoftmaxCols(a))
    }

    /// Log-softmax along each row.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut value = t.clone();
        for r in 0..t.rows {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (out, v) in value.data[r * t.cols..(r + 1) * t.cols].iter_mut().zip(row) {
                *out = v - lse;
            }
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(value, Op::Sum(a))
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Var {
        let value = Tensor::scalar(self.value(a).get(r, c));
        self.push(value, Op::Pick(a, r, c))
    }

    /// Sum of scalars; zero for an empty list.
    pub fn add_scalars(&mut self, parts: &[Var]) -> Var {
        match parts {
            [] => self.input(Tensor::scalar(0.0)),
            [first, rest @ ..] => {
                let mut acc = *first;
                for &p in rest {
                    acc = self.add(acc, p);
                }
                acc
            }
        }
    }

    /// Gradients of the scalar `loss` with respect to every parameter used.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be a scalar");
        let mut out = self.params.zeros_like();
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.tensors[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul_t(tb));
                    acc(&mut grads, *b, ta.t_matmul(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = zip(&g, self.value(*b), |x, y| x * y);
                    let gb = zip(&g, self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, map(&g, |x| x * k)),
                Op::Tanh(a) => acc(&mut grads, *a, zip(&g, y, |g, y| g * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip(&g, y, |g, y| g * y * (1.0 - y))),
                Op::LogSigmoid(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, zip(&g, x, |g, x| g * sigmoid(-x)))
                }
                Op::SliceCols(a, start) => {
                    let t = self.value(*a);
                    let mut ga = Tensor::zeros(t.rows, t.cols);
                    for r in 0..g.rows {
                        ga.data[r * t.cols + start..r * t.cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let t = self.value(*a);
                    let mut ga = Tensor::zeros(t.rows, t.cols);
                    ga.data[start * t.cols..(start + g.rows) * t.cols].copy_from_slice(&g.data);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let t = self.value(*a);
                    let mut ga = Tensor::zeros(t.rows, t.cols);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, v) in ga.data[i * t.cols..(i + 1) * t.cols].iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut gp = Tensor::zeros(g.rows, w);
                        for r in 0..g.rows {
                            gp.data[r * w..(r + 1) * w].copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let (r, c) = self.shape(p);
                        acc(
                            &mut grads,
                            p,
                            Tensor::from_vec(r, c, g.data[offset..offset + n].to_vec()),
                        );
                        offset += n;
                    }
                }
                Op::MeanRows(a) => {
                    let t = self.value(*a);
                    let n = t.rows as f64;
                    let mut ga = Tensor::zeros(t.rows, t.cols);
                    for r in 0..t.rows {
                        for (o, v) in ga.data[r * t.cols..(r + 1) * t.cols].iter_mut().zip(&g.data) {
                            *o = v / n;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::SoftmaxCols(a) => {
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for c in 0..y.cols {
                        let dot: f64 = (0..y.rows).map(|r| y.get(r, c) * g.get(r, c)).sum();
                        for r in 0..y.rows {
                            ga.data[r * y.cols + c] = y.get(r, c) * (g.get(r, c) - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let total: f64 = g.row(r).iter().sum();
                        for c in 0..y.cols {
                            ga.data[r * y.cols + c] = g.get(r, c) - y.get(r, c).exp() * total;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Tensor::from_vec(r, c, vec![g.data[0]; r * c]));
                }
                Op::Pick(a, r, c) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    ga.data[r * cols + c] = g.data[0];
                    acc(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamBuilder;

    /// Central-difference check of every op against the tape.
    fn check(build: impl Fn(&mut Graph, &[Var]) -> Var, shapes: &[(usize, usize)]) {
        let mut pb = ParamBuilder::new(7, 1.0);
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| pb.uniform(format!("p{i}"), r, c))
            .collect();
        let mut store = pb.finish();
        let eval = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let vars: Vec<_> = ids.iter().map(|&id| g.param(id)).collect();
            let out = build(&mut g, &vars);
            (g.value(out).data[0], g.backward(out))
        };
        let (_, analytic) = eval(&store);
        let h = 1e-5;
        for &id in &ids {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).data[k];
                store.get_mut(id).data[k] = orig + h;
                let (plus, _) = eval(&store);
                store.get_mut(id).data[k] = orig - h;
                let (minus, _) = eval(&store);
                store.get_mut(id).data[k] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.get(id).data[k];
                assert!(
                    (a - numeric).abs() < 1e-7 * (1.0 + a.abs()),
                    "param {id:?}[{k}]: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_add_row_tanh() {
        check(
            |g, v| {
                let m = g.matmul(v[0], v[1]);
                let m = g.add_row(m, v[2]);
                let t = g.tanh(m);
                g.sum(t)
            },
            &[(3, 4), (4, 2), (1, 2)],
        );
    }

    #[test]
    fn softmaxes_and_picks() {
        check(
            |g, v| {
                let s = g.softmax_cols(v[0]);
                let t = g.transpose(s);
                let prod = g.matmul(t, v[1]);
                let l = g.log_softmax_rows(prod);
                let a = g.pick(l, 1, 2);
                let b = g.pick(l, 0, 0);
                g.add_scalars(&[a, b])
            },
            &[(4, 2), (4, 3)],
        );
    }

    #[test]
    fn slicing_gather_concat_mean() {
        check(
            |g, v| {
                let a = g.slice_cols(v[0], 1, 2);
                let b = g.slice_rows(v[0], 2, 2);
                let c = g.gather_rows(v[1], vec![0, 2, 0]);
                let cc = g.concat_cols(vec![a, v[0]]);
                let m = g.mean_rows(cc);
                let r = g.concat_rows(vec![b, c]);
                let s = g.sigmoid(r);
                let prod = g.mul(s, r);
                let ls = g.log_sigmoid(prod);
                let x = g.sum(ls);
                let y = g.sum(m);
                let y = g.scale(y, -0.5);
                g.add(x, y)
            },
            &[(4, 3), (3, 3)],
        );
    }

    #[test]
    fn unused_params_get_zero_gradient() {
        let mut pb = ParamBuilder::new(1, 0.1);
        let a = pb.uniform("a", 2, 2);
        let b = pb.uniform("b", 2, 2);
        let store = pb.finish();
        let mut g = Graph::new(&store);
        let va = g.param(a);
        let s = g.sum(va);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).data, vec![1.0; 4]);
        assert_eq!(grads.get(b).data, vec![0.0; 4]);
    }
}
