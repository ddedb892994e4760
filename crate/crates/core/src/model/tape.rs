//! Reverse-mode automatic differentiation over matrix operations.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] and never copied; gradients come back as
//! one matrix per parameter from [`Tape::backward`].

use std::collections::HashMap;

use super::tensor::{dot, matmul, matmul_at_acc, matmul_bt, Matrix};

/// Named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: usize) -> &Matrix {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Matrix {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.values
            .iter()
            .map(|m| Matrix::zeros(m.rows, m.cols))
            .collect()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Param(usize),
    Const,
    /// Rows `ids` of a parameter table.
    Gather(usize, Vec<u32>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// Matrix plus a broadcast `1 x cols` row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    /// Row-wise log-softmax; with `strict_upper` only entries `j > i` are
    /// kept and the rest become `-inf`.
    LogSoftmax { x: Var, strict_upper: bool },
    /// Multi-head scaled dot-product attention; `probs` holds one
    /// `(rows_q x rows_k)` matrix per head.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Matrix>,
    },
    MeanRows(Var),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    fn push(&mut self, value: Option<Matrix>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node.value.as_ref().expect("non-parameter nodes carry values"),
        }
    }

    pub fn param(&mut self, id: usize) -> Var {
        self.push(None, Op::Param(id))
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Some(m), Op::Const)
    }

    pub fn gather(&mut self, table: usize, ids: &[u32]) -> Var {
        let t = self.params.get(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id as usize));
        }
        self.push(Some(out), Op::Gather(table, ids.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(Some(out), Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_bt(self.value(a), self.value(b));
        self.push(Some(out), Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Some(out), Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let r = self.value(row);
        assert_eq!(r.rows, 1);
        for i in 0..out.rows {
            out.row_mut(i).iter_mut().zip(&r.data).for_each(|(x, b)| *x += b);
        }
        self.push(Some(out), Op::AddRow(a, row))
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: usize, b: usize) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        self.push(Some(out), Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| {
            let t = (SQRT_2_OVER_PI * (*x + GELU_C * *x * *x * *x)).tanh();
            *x = 0.5 * *x * (1.0 + t);
        });
        self.push(Some(out), Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: usize, bias: usize) -> Var {
        const EPS: f64 = 1e-5;
        let gain = self.param(gain);
        let bias = self.param(bias);
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + EPS).sqrt();
            rstd[r] = s;
            for (h, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * s;
            }
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, &gg), &bb) in out.row_mut(r).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gg + bb;
            }
        }
        self.push(
            Some(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn log_softmax(&mut self, x: Var, strict_upper: bool) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::filled(xv.rows, xv.cols, f64::NEG_INFINITY);
        for r in 0..xv.rows {
            let lo = if strict_upper { r + 1 } else { 0 };
            if lo >= xv.cols {
                continue;
            }
            let row = &xv.row(r)[lo..];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in out.row_mut(r)[lo..].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push(Some(out), Op::LogSoftmax { x, strict_upper })
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Matrix::zeros(qv.rows, qv.cols);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            let mut p = Matrix::zeros(qv.rows, kv.rows);
            for i in 0..qv.rows {
                let qi = &qv.row(i)[cols.clone()];
                let prow = p.row_mut(i);
                for (j, s) in prow.iter_mut().enumerate() {
                    *s = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                }
                let max = prow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in prow.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                prow.iter_mut().for_each(|s| *s /= sum);
                let orow = &mut out.data[i * qv.cols..(i + 1) * qv.cols][cols.clone()];
                for (j, &pij) in p.row(i).iter().enumerate() {
                    for (o, &x) in orow.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *o += pij * x;
                    }
                }
            }
            probs.push(p);
        }
        self.push(
            Some(out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(1, xv.cols);
        for r in 0..xv.rows {
            out.data.iter_mut().zip(xv.row(r)).for_each(|(o, v)| *o += v);
        }
        out.scale(1.0 / xv.rows as f64);
        self.push(Some(out), Op::MeanRows(x))
    }

    /// Propagates the seeded output gradients back to every parameter.
    pub fn backward(&self, seeds: Vec<(Var, Matrix)>) -> Vec<Matrix> {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            accumulate(&mut grads[v.0], g);
        }
        let mut param_grads = self.params.zeros_like();
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param(id) => param_grads[*id].add_assign(&g),
                Op::Gather(table, ids) => {
                    let pg = &mut param_grads[*table];
                    for (r, &id) in ids.iter().enumerate() {
                        pg.row_mut(id as usize)
                            .iter_mut()
                            .zip(g.row(r))
                            .for_each(|(a, b)| *a += b);
                    }
                }
                Op::MatMul(a, b) => {
                    // d(ab)/da = g bᵀ, d(ab)/db = aᵀ g
                    let ga = matmul_bt(&g, self.value(*b));
                    let bv = self.value(*b);
                    let mut gb = Matrix::zeros(bv.rows, bv.cols);
                    matmul_at_acc(self.value(*a), &g, &mut gb);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulBt(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    let ga = matmul(&g, self.value(*b));
                    let bv = self.value(*b);
                    let mut gb = Matrix::zeros(bv.rows, bv.cols);
                    matmul_at_acc(&g, self.value(*a), &mut gb);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        gr.data.iter_mut().zip(g.row(r)).for_each(|(o, v)| *o += v);
                    }
                    accumulate(&mut grads[a.0], g);
                    accumulate(&mut grads[row.0], gr);
                }
                Op::Scale(a, s) => {
                    let mut g = g;
                    g.scale(*s);
                    accumulate(&mut grads[a.0], g);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut g = g;
                    g.data.iter_mut().zip(&x.data).for_each(|(gi, &x)| {
                        let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                        *gi *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    });
                    accumulate(&mut grads[a.0], g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain);
                    let cols = g.cols;
                    let mut gx = Matrix::zeros(g.rows, cols);
                    let mut ggain = Matrix::zeros(1, cols);
                    let mut gbias = Matrix::zeros(1, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        for c in 0..cols {
                            ggain.data[c] += gr[c] * xr[c];
                            gbias.data[c] += gr[c];
                            dxhat[c] = gr[c] * gv.data[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dot(&dxhat, xr) / cols as f64;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[gain.0], ggain);
                    accumulate(&mut grads[bias.0], gbias);
                }
                Op::LogSoftmax { x, strict_upper } => {
                    let out = self.nodes[idx].value.as_ref().expect("value");
                    let mut gx = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let lo = if *strict_upper { r + 1 } else { 0 };
                        if lo >= g.cols {
                            continue;
                        }
                        let gr = &g.row(r)[lo..];
                        let total: f64 = gr.iter().sum();
                        let orow = &out.row(r)[lo..];
                        for ((o, &gi), &lp) in gx.row_mut(r)[lo..].iter_mut().zip(gr).zip(orow) {
                            *o = gi - lp.exp() * total;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.cols / heads;
                    let scale = 1.0 / (d as f64).sqrt();
                    let mut gq = Matrix::zeros(qv.rows, qv.cols);
                    let mut gk = Matrix::zeros(kv.rows, kv.cols);
                    let mut gv = Matrix::zeros(vv.rows, vv.cols);
                    let mut dp = vec![0.0; kv.rows];
                    for (h, p) in probs.iter().enumerate() {
                        let cols = h * d..(h + 1) * d;
                        for i in 0..qv.rows {
                            let go = &g.row(i)[cols.clone()];
                            let prow = p.row(i);
                            for j in 0..kv.rows {
                                dp[j] = dot(go, &vv.row(j)[cols.clone()]);
                                let gvr = &mut gv.data[j * vv.cols..(j + 1) * vv.cols][cols.clone()];
                                gvr.iter_mut().zip(go).for_each(|(a, b)| *a += prow[j] * b);
                            }
                            let inner = dot(&dp, prow);
                            let qi = &qv.row(i)[cols.clone()];
                            for j in 0..kv.rows {
                                let ds = prow[j] * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row(j)[cols.clone()];
                                let gqr = &mut gq.data[i * qv.cols..(i + 1) * qv.cols][cols.clone()];
                                gqr.iter_mut().zip(kj).for_each(|(a, b)| *a += ds * b);
                                let gkr = &mut gk.data[j * kv.cols..(j + 1) * kv.cols][cols.clone()];
                                gkr.iter_mut().zip(qi).for_each(|(a, b)| *a += ds * b);
                            }
                        }
                    }
                    accumulate(&mut grads[q.0], gq);
                    accumulate(&mut grads[k.0], gk);
                    accumulate(&mut grads[v.0], gv);
                }
                Op::MeanRows(x) => {
                    let rows = self.value(*x).rows;
                    let mut gx = Matrix::zeros(rows, g.cols);
                    for r in 0..rows {
                        gx.row_mut(r)
                            .iter_mut()
                            .zip(&g.data)
                            .for_each(|(o, v)| *o = v / rows as f64);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
        param_grads
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}
