//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node and every parameter
//! that was read through [`Graph::param`].
//!
//! Row vectors are `1 x n`; column vectors are `n x 1`. Batched computations
//! stack examples along rows.

use std::collections::HashMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::params::{ParamId, ParamStore};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Contiguous block of rows that attends only within itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
struct GruSaved {
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    hn: Array2<f64>,
}

#[derive(Debug)]
struct AttentionSaved {
    segments: Vec<Segment>,
    heads: usize,
    scale: f64,
    /// One `len x len` probability matrix per (segment, head), segment-major.
    probs: Vec<Array2<f64>>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Array2<f64>),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    LeakyRelu(Var, f64),
    SoftmaxRows(Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
        skip: Option<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    BroadcastRows(Var),
    GruCell {
        x: Var,
        h: Var,
        wx: Var,
        wh: Var,
        bx: Var,
        bh: Var,
        saved: Box<GruSaved>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        saved: Box<AttentionSaved>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Array2<f64>,
        valid: usize,
    },
    RowDot(Var, Var),
    /// Rows scaled to unit length; keeps `1 / sqrt(|x|^2 + eps)` per row.
    NormalizeRows(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Tape of recorded operations bound to a parameter store.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Array2<f64>>>,
    params: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Array2<f64>> {
        self.nodes[var.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter of the store, zeros where unused.
    pub fn dense(&self, store: &ParamStore) -> Vec<Array2<f64>> {
        store
            .ids()
            .map(|id| match self.param(id) {
                Some(g) => g.clone(),
                None => Array2::zeros(store.get(id).dim()),
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn col_sum(x: &Array2<f64>) -> Array2<f64> {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Array2<f64> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.dim()
    }

    pub fn scalar(&self, var: Var) -> f64 {
        let v = &self.nodes[var.0].value;
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    /// Constant leaf. Gradients flow into it but nowhere further.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf reading a parameter; repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// `a + row` with `row` (`1 x n`) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a row vector");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    /// Elementwise product with a constant matrix of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        assert_eq!(self.shape(a), c.dim());
        let value = self.value(a) * &c;
        self.push(value, Op::MulConst(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self
            .value(a)
            .mapv(|v| if v >= 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a).view());
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Rows of `table` selected by `indices`. Row `skip` receives no gradient.
    pub fn gather(&mut self, table: Var, indices: &[usize], skip: Option<usize>) -> Var {
        let t = self.value(table);
        let cols = t.ncols();
        let mut value = Array2::zeros((indices.len(), cols));
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).assign(&t.row(i));
        }
        self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
                skip,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols(a, start, len))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        self.push(value, Op::SelectRows(a, rows.to_vec()))
    }

    /// Repeat a `1 x n` row `count` times.
    pub fn broadcast_rows(&mut self, row: Var, count: usize) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "broadcast_rows expects a row vector");
        let value = r
            .broadcast((count, r.ncols()))
            .expect("broadcast")
            .to_owned();
        self.push(value, Op::BroadcastRows(row))
    }

    /// One GRU step: gates ordered `[reset, update, candidate]` along columns
    /// of `wx` (`in x 3d`), `wh` (`d x 3d`), `bx` and `bh` (`1 x 3d`).
    pub fn gru_cell(&mut self, x: Var, h: Var, wx: Var, wh: Var, bx: Var, bh: Var) -> Var {
        let d = self.shape(h).1;
        let gx = self.value(x).dot(self.value(wx)) + self.value(bx);
        let gh = self.value(h).dot(self.value(wh)) + self.value(bh);
        let r = (&gx.slice(s![.., 0..d]) + &gh.slice(s![.., 0..d])).mapv(sigmoid);
        let z = (&gx.slice(s![.., d..2 * d]) + &gh.slice(s![.., d..2 * d])).mapv(sigmoid);
        let hn = gh.slice(s![.., 2 * d..3 * d]).to_owned();
        let n = (&gx.slice(s![.., 2 * d..3 * d]) + &(&r * &hn)).mapv(f64::tanh);
        let hv = self.value(h);
        let mut out = Array2::zeros(hv.dim());
        Zip::from(&mut out)
            .and(&n)
            .and(&z)
            .and(hv)
            .for_each(|o, &n, &z, &h| *o = (1.0 - z) * n + z * h);
        self.push(
            out,
            Op::GruCell {
                x,
                h,
                wx,
                wh,
                bx,
                bh,
                saved: Box::new(GruSaved { r, z, n, hn }),
            },
        )
    }

    /// Causal multi-head scaled dot-product attention. Each segment is an
    /// independent sequence; row `i` of a segment attends to rows `<= i`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Var {
        let (rows, dim) = self.shape(q);
        assert!(heads > 0 && dim % heads == 0, "heads must divide the width");
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::zeros((rows, dim));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            let rs = seg.start..seg.start + seg.len;
            for head in 0..heads {
                let cs = head * hd..(head + 1) * hd;
                let qh = qv.slice(s![rs.clone(), cs.clone()]);
                let kh = kv.slice(s![rs.clone(), cs.clone()]);
                let vh = vv.slice(s![rs.clone(), cs.clone()]);
                let mut scores = qh.dot(&kh.t()) * scale;
                for i in 0..seg.len {
                    for j in i + 1..seg.len {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
                let p = softmax_rows(scores.view());
                out.slice_mut(s![rs.clone(), cs]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                saved: Box::new(AttentionSaved {
                    segments: segments.to_vec(),
                    heads,
                    scale,
                    probs,
                }),
            },
        )
    }

    /// Attention probabilities of an attention node, segment-major then head.
    pub fn attention_probs(&self, var: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[var.0].op {
            Op::Attention { saved, .. } => Some(&saved.probs),
            _ => None,
        }
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Mean softmax cross-entropy over rows with a target; `None` rows are
    /// excluded. Returns a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let probs = softmax_rows(lv.view());
        let mut total = 0.0;
        let mut valid = 0;
        for (row, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let max = lv.row(row).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + lv.row(row).iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - lv[[row, t]];
                valid += 1;
            }
        }
        let loss = if valid == 0 { 0.0 } else { total / valid as f64 };
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                valid,
            },
        )
    }

    /// Row-wise dot product, `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let value = (self.value(a) * self.value(b))
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        self.push(value, Op::RowDot(a, b))
    }

    /// Each row divided by `sqrt(|row|^2 + eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        let mut inv = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let i = 1.0 / (row.dot(&row) + eps).sqrt();
            row *= i;
            inv.push(i);
        }
        self.push(value, Op::NormalizeRows(a, inv))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Array2::from_elem((1, 1), v.sum() / v.len().max(1) as f64);
        self.push(value, Op::Mean(a))
    }

    /// Backpropagate from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], var: Var, g: Array2<f64>) {
            match &mut grads[var.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input | Op::Param => {}
                Op::MatMulT(a, b) => {
                    let ga = up.dot(self.value(*b));
                    let gb = up.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = up.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&up);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, up.clone());
                    acc(&mut grads, *b, up.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&up);
                    acc(&mut grads, *a, up.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &up * self.value(*b));
                    acc(&mut grads, *b, &up * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, col_sum(&up));
                    acc(&mut grads, *a, up.clone());
                }
                Op::Scale(a, f) => acc(&mut grads, *a, &up * *f),
                Op::MulConst(a, c) => acc(&mut grads, *a, &up * c),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, &up * &y.mapv(|s| s * (1.0 - s)));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, &up * &y.mapv(|t| 1.0 - t * t));
                }
                Op::Gelu(a) => {
                    let d = self.value(*a).mapv(gelu_grad);
                    acc(&mut grads, *a, &up * &d);
                }
                Op::LeakyRelu(a, slope) => {
                    let d = self
                        .value(*a)
                        .mapv(|v| if v >= 0.0 { 1.0 } else { *slope });
                    acc(&mut grads, *a, &up * &d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&up * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, y * &(&up - &dot));
                }
                Op::Gather {
                    table,
                    indices,
                    skip,
                } => {
                    let mut g = Array2::zeros(self.shape(*table));
                    for (r, &i) in indices.iter().enumerate() {
                        if Some(i) == *skip {
                            continue;
                        }
                        let mut dst = g.row_mut(i);
                        dst += &up.row(r);
                    }
                    acc(&mut grads, *table, g);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(
                            &mut grads,
                            p,
                            up.slice(s![.., offset..offset + w]).to_owned(),
                        );
                        offset += w;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let mut g = Array2::zeros(self.shape(*a));
                    g.slice_mut(s![.., *start..*start + *len]).assign(&up);
                    acc(&mut grads, *a, g);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        acc(
                            &mut grads,
                            p,
                            up.slice(s![offset..offset + h, ..]).to_owned(),
                        );
                        offset += h;
                    }
                }
                Op::SelectRows(a, rows) => {
                    let mut g = Array2::zeros(self.shape(*a));
                    for (r, &i) in rows.iter().enumerate() {
                        let mut dst = g.row_mut(i);
                        dst += &up.row(r);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::BroadcastRows(row) => acc(&mut grads, *row, col_sum(&up)),
                Op::GruCell {
                    x,
                    h,
                    wx,
                    wh,
                    bx,
                    bh,
                    saved,
                } => {
                    let GruSaved { r, z, n, hn } = saved.as_ref();
                    let hv = self.value(*h);
                    let d = hv.ncols();
                    let rows = hv.nrows();
                    let mut gx_pre = Array2::zeros((rows, 3 * d));
                    let mut gh_pre = Array2::zeros((rows, 3 * d));
                    let mut dh = Array2::zeros((rows, d));
                    for i in 0..rows {
                        for j in 0..d {
                            let u = up[[i, j]];
                            let (rv, zv, nv, hnv, hp) =
                                (r[[i, j]], z[[i, j]], n[[i, j]], hn[[i, j]], hv[[i, j]]);
                            let dn = u * (1.0 - zv);
                            let dz = u * (hp - nv);
                            dh[[i, j]] = u * zv;
                            let dn_pre = dn * (1.0 - nv * nv);
                            let dr_pre = dn_pre * hnv * rv * (1.0 - rv);
                            let dz_pre = dz * zv * (1.0 - zv);
                            gx_pre[[i, j]] = dr_pre;
                            gx_pre[[i, d + j]] = dz_pre;
                            gx_pre[[i, 2 * d + j]] = dn_pre;
                            gh_pre[[i, j]] = dr_pre;
                            gh_pre[[i, d + j]] = dz_pre;
                            gh_pre[[i, 2 * d + j]] = dn_pre * rv;
                        }
                    }
                    dh += &gh_pre.dot(&self.value(*wh).t());
                    acc(&mut grads, *x, gx_pre.dot(&self.value(*wx).t()));
                    acc(&mut grads, *wx, self.value(*x).t().dot(&gx_pre));
                    acc(&mut grads, *wh, hv.t().dot(&gh_pre));
                    acc(&mut grads, *bx, col_sum(&gx_pre));
                    acc(&mut grads, *bh, col_sum(&gh_pre));
                    acc(&mut grads, *h, dh);
                }
                Op::Attention { q, k, v, saved } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dim = qv.ncols();
                    let hd = dim / saved.heads;
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    let mut pi = 0;
                    for seg in &saved.segments {
                        let rs = seg.start..seg.start + seg.len;
                        for head in 0..saved.heads {
                            let cs = head * hd..(head + 1) * hd;
                            let p = &saved.probs[pi];
                            pi += 1;
                            let dout = up.slice(s![rs.clone(), cs.clone()]);
                            let qh = qv.slice(s![rs.clone(), cs.clone()]);
                            let kh = kv.slice(s![rs.clone(), cs.clone()]);
                            let vh = vv.slice(s![rs.clone(), cs.clone()]);
                            let dp = dout.dot(&vh.t());
                            dv.slice_mut(s![rs.clone(), cs.clone()])
                                .assign(&p.t().dot(&dout));
                            let rowdot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                            let ds = p * &(&dp - &rowdot) * saved.scale;
                            dq.slice_mut(s![rs.clone(), cs.clone()])
                                .assign(&ds.dot(&kh));
                            dk.slice_mut(s![rs.clone(), cs]).assign(&ds.t().dot(&qh));
                        }
                    }
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    acc(&mut grads, *beta, col_sum(&up));
                    acc(&mut grads, *gamma, col_sum(&(&up * xhat)));
                    let dxhat = &up * gv;
                    let cols = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for (i, is) in inv_std.iter().enumerate() {
                        let dr = dxhat.row(i);
                        let xr = xhat.row(i);
                        let s1 = dr.sum();
                        let s2 = (&dr * &xr).sum();
                        for j in 0..xhat.ncols() {
                            dx[[i, j]] = is / cols * (cols * dr[j] - s1 - xr[j] * s2);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    valid,
                } => {
                    let mut g = Array2::zeros(probs.dim());
                    if *valid > 0 {
                        let f = up[[0, 0]] / *valid as f64;
                        for (row, t) in targets.iter().enumerate() {
                            if let Some(t) = *t {
                                let mut gr = g.row_mut(row);
                                gr.assign(&probs.row(row));
                                gr[t] -= 1.0;
                                gr *= f;
                            }
                        }
                    }
                    acc(&mut grads, *logits, g);
                }
                Op::RowDot(a, b) => {
                    acc(&mut grads, *a, self.value(*b) * &up);
                    acc(&mut grads, *b, self.value(*a) * &up);
                }
                Op::NormalizeRows(a, inv) => {
                    let x = self.value(*a);
                    let mut g = Array2::zeros(x.raw_dim());
                    for (r, &i) in inv.iter().enumerate() {
                        let (xr, ur) = (x.row(r), up.row(r));
                        let proj = xr.dot(&ur) * i * i * i;
                        let mut gr = g.row_mut(r);
                        gr.assign(&(&ur * i - &xr * proj));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Sum(a) => {
                    let g = Array2::from_elem(self.shape(*a), up[[0, 0]]);
                    acc(&mut grads, *a, g);
                }
                Op::Mean(a) => {
                    let shape = self.shape(*a);
                    let n = (shape.0 * shape.1).max(1) as f64;
                    acc(&mut grads, *a, Array2::from_elem(shape, up[[0, 0]] / n));
                }
            }
            grads[idx] = Some(up);
        }

        let mut params: Vec<Option<Array2<f64>>> = (0..self.store.len()).map(|_| None).collect();
        for (&id, &var) in &self.param_vars {
            params[id.index()] = grads[var.0].clone();
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}
