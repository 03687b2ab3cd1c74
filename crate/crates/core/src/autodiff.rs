//! Minimal reverse-mode tape over [`Mat`] values.
//!
//! Parameters are borrowed from a [`ParameterSet`] rather than copied onto the
//! tape; their gradients are accumulated into a tensor set of the same layout.

use crate::encoder::ParameterSet;
use crate::tensor::{dot, Mat};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Which key positions each query row may attend to. Rows with no allowed
/// keys produce a zero output row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(n: usize) -> Self {
        Self { n, allowed: vec![true; n * n] }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                allowed.push(f(i, j));
            }
        }
        Self { n, allowed }
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// Single-head softmax attention weights `softmax(q kᵀ / √d)` with masked
/// entries set to exactly zero.
pub fn attention_weights(q: &Mat, k: &Mat, mask: Option<&AttentionMask>) -> Mat {
    let n = q.rows();
    let m = k.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut w = Mat::zeros(n, m);
    for i in 0..n {
        let qi = q.row(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..m {
            if mask.is_none_or(|mk| mk.allows(i, j)) {
                let s = dot(qi, k.row(j)) * scale;
                w.set(i, j, s);
                max = max.max(s);
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for j in 0..m {
            if mask.is_none_or(|mk| mk.allows(i, j)) {
                let e = (w.get(i, j) - max).exp();
                w.set(i, j, e);
                sum += e;
            }
        }
        for v in w.row_mut(i) {
            *v /= sum;
        }
    }
    w
}

fn head_slice(m: &Mat, h: usize, dh: usize) -> Mat {
    let mut out = Mat::zeros(m.rows(), dh);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[h * dh..(h + 1) * dh]);
    }
    out
}

fn add_head_slice(dst: &mut Mat, src: &Mat, h: usize, dh: usize) {
    for r in 0..dst.rows() {
        for (d, s) in dst.row_mut(r)[h * dh..(h + 1) * dh].iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
}

enum Op {
    Param(usize),
    Const,
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Mat, inv_std: Vec<f64> },
    Gelu(NodeId),
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, weights: Vec<Mat> },
    ConcatRows(NodeId, NodeId),
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParameterSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        let node = &self.nodes[id];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(i)) => self.params.tensor(*i),
            (None, _) => unreachable!("non-parameter nodes own their value"),
        }
    }

    fn push(&mut self, value: Option<Mat>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        self.push(None, Op::Param(index))
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Some(value), Op::Const)
    }

    /// `x · w + b` with `b` a `1 × out` row broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let mut y = self.value(x).matmul(self.value(w));
        let bias = self.value(b);
        for r in 0..y.rows() {
            for (o, bb) in y.row_mut(r).iter_mut().zip(bias.data()) {
                *o += bb;
            }
        }
        self.push(Some(y), Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        self.push(Some(y), Op::Add(a, b))
    }

    /// Row-wise layer normalisation with learned scale and offset.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut y = xhat.clone();
        for r in 0..rows {
            for ((o, gg), bb) in y.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        self.push(Some(y), Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut y = self.value(x).clone();
        for v in y.data_mut() {
            let x = *v;
            *v = 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh());
        }
        self.push(Some(y), Op::Gelu(x))
    }

    /// Multi-head scaled dot-product attention; `q`, `k`, `v` are `n × heads·dh`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, mask: &AttentionMask) -> NodeId {
        let (n, width) = self.value(q).shape();
        assert_eq!(width % heads, 0, "attention width {width} not divisible by {heads} heads");
        assert_eq!(mask.len(), n, "mask size");
        let dh = width / heads;
        let mut out = Mat::zeros(n, width);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = head_slice(self.value(q), h, dh);
            let kh = head_slice(self.value(k), h, dh);
            let vh = head_slice(self.value(v), h, dh);
            let w = attention_weights(&qh, &kh, Some(mask));
            add_head_slice(&mut out, &w.matmul(&vh), h, dh);
            weights.push(w);
        }
        self.push(Some(out), Op::Attention { q, k, v, heads, weights })
    }

    pub fn attention_weights_of(&self, id: NodeId) -> Option<&[Mat]> {
        match &self.nodes[id].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.cols(), bv.cols(), "concat_rows width");
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let y = Mat::from_vec(av.rows() + bv.rows(), av.cols(), data);
        self.push(Some(y), Op::ConcatRows(a, b))
    }

    /// Back-propagates `seed` (the gradient of the scalar objective with
    /// respect to `output`) and accumulates parameter gradients into `grads`.
    pub fn backward(&self, output: NodeId, seed: Mat, grads: &mut ParameterSet) {
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output] = Some(seed);
        for id in (0..=output).rev() {
            let Some(g) = adj[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Param(i) => grads.tensor_mut(*i).add_assign(&g),
                Op::Const => {}
                Op::Linear { x, w, b } => {
                    accumulate(&mut adj, *x, g.matmul_t(self.value(*w)));
                    accumulate(&mut adj, *w, self.value(*x).t_matmul(&g));
                    accumulate(&mut adj, *b, g.column_sums());
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gam = self.value(*gamma).data();
                    let (rows, cols) = g.shape();
                    let mut dgamma = Mat::zeros(1, cols);
                    let mut dbeta = Mat::zeros(1, cols);
                    let mut dx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        for c in 0..cols {
                            dgamma.data_mut()[c] += gr[c] * xr[c];
                            dbeta.data_mut()[c] += gr[c];
                        }
                        let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dot(&dxhat, xr) / cols as f64;
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    accumulate(&mut adj, *gamma, dgamma);
                    accumulate(&mut adj, *beta, dbeta);
                    accumulate(&mut adj, *x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &x) in dx.data_mut().iter_mut().zip(xv.data()) {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *d *= 0.5 * (1.0 + t) + 0.5 * x * dt;
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Attention { q, k, v, heads, weights } => {
                    let (n, width) = g.shape();
                    let dh = width / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(n, width);
                    let mut dk = Mat::zeros(n, width);
                    let mut dv = Mat::zeros(n, width);
                    for (h, p) in weights.iter().enumerate() {
                        let qh = head_slice(self.value(*q), h, dh);
                        let kh = head_slice(self.value(*k), h, dh);
                        let vh = head_slice(self.value(*v), h, dh);
                        let gh = head_slice(&g, h, dh);
                        add_head_slice(&mut dv, &p.t_matmul(&gh), h, dh);
                        let dp = gh.matmul_t(&vh);
                        let mut ds = Mat::zeros(n, n);
                        for i in 0..n {
                            let pr = p.row(i);
                            let dpr = dp.row(i);
                            let inner = dot(pr, dpr);
                            for (j, o) in ds.row_mut(i).iter_mut().enumerate() {
                                *o = pr[j] * (dpr[j] - inner) * scale;
                            }
                        }
                        add_head_slice(&mut dq, &ds.matmul(&kh), h, dh);
                        add_head_slice(&mut dk, &ds.t_matmul(&qh), h, dh);
                    }
                    accumulate(&mut adj, *q, dq);
                    accumulate(&mut adj, *k, dk);
                    accumulate(&mut adj, *v, dv);
                }
                Op::ConcatRows(a, b) => {
                    let ar = self.value(*a).rows();
                    let cols = g.cols();
                    let (top, bottom) = g.data().split_at(ar * cols);
                    accumulate(&mut adj, *a, Mat::from_vec(ar, cols, top.to_vec()));
                    accumulate(&mut adj, *b, Mat::from_vec(g.rows() - ar, cols, bottom.to_vec()));
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut adj[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
