//! Reverse-mode automatic differentiation over a flat tape of small dense
//! matrices.
//!
//! The network-specific operations (linear layers, layer norm, segmented
//! causal attention, log-softmax at a target) are fused, and their forward
//! passes are built from the row kernels in [`kernels`]. Incremental
//! decoding uses the same kernels, which is what makes log-probabilities
//! recorded while sampling bit-identical to a later full forward pass.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn scalar(x: f64) -> Self {
        Self::from_vec(1, 1, vec![x])
    }

    /// Column vector.
    pub fn column(values: Vec<f64>) -> Self {
        Self::from_vec(values.len(), 1, values)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Forward kernels shared by the tape and by incremental decoding.
///
/// Every kernel fixes its summation order, so identical inputs give
/// identical bits no matter which path calls it.
pub mod kernels {
    pub const LN_EPS: f64 = 1e-5;
    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const GELU_A: f64 = 0.044_715;

    /// `out = b + x W` with `W` stored row-major as `x.len() × out.len()`.
    pub fn linear_row(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
        let n = out.len();
        out.copy_from_slice(b);
        for (k, &xk) in x.iter().enumerate() {
            let wk = &w[k * n..(k + 1) * n];
            for (o, &wkj) in out.iter_mut().zip(wk) {
                *o += xk * wkj;
            }
        }
    }

    /// Returns `(mean, 1/std)`.
    pub fn layer_norm_row(x: &[f64], g: &[f64], b: &[f64], out: &mut [f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..x.len() {
            out[i] = (x[i] - mean) * rstd * g[i] + b[i];
        }
        (mean, rstd)
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
    }

    pub fn gelu_grad(x: f64) -> f64 {
        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    }

    /// Causal attention for query row `i` over rows `start..=i` of a packed
    /// `[q | k | v]` buffer with row stride `3 * d`.
    ///
    /// `probs` receives `heads × (i - start + 1)` attention weights and `out`
    /// the `d` concatenated head outputs.
    pub fn attention_row(
        qkv: &[f64],
        d: usize,
        heads: usize,
        start: usize,
        i: usize,
        probs: &mut [f64],
        out: &mut [f64],
    ) {
        let dh = d / heads;
        let stride = 3 * d;
        let span = i - start + 1;
        let scale = 1.0 / (dh as f64).sqrt();
        for h in 0..heads {
            let q = &qkv[i * stride + h * dh..i * stride + (h + 1) * dh];
            let p = &mut probs[h * span..(h + 1) * span];
            let mut max = f64::NEG_INFINITY;
            for (s, j) in (start..=i).enumerate() {
                let k = &qkv[j * stride + d + h * dh..j * stride + d + (h + 1) * dh];
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q[c] * k[c];
                }
                p[s] = dot * scale;
                max = max.max(p[s]);
            }
            let mut total = 0.0;
            for v in p.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in p.iter_mut() {
                *v /= total;
            }
            let o = &mut out[h * dh..(h + 1) * dh];
            o.fill(0.0);
            for (s, j) in (start..=i).enumerate() {
                let v = &qkv[j * stride + 2 * d + h * dh..j * stride + 2 * d + (h + 1) * dh];
                for c in 0..dh {
                    o[c] += p[s] * v[c];
                }
            }
        }
    }

    /// `out[j] = logits[j] / T − logsumexp(logits / T)`.
    pub fn log_softmax_row(logits: &[f64], temperature: f64, out: &mut [f64]) {
        let mut max = f64::NEG_INFINITY;
        for (o, &l) in out.iter_mut().zip(logits) {
            *o = l / temperature;
            max = max.max(*o);
        }
        let mut total = 0.0;
        for &z in out.iter() {
            total += (z - max).exp();
        }
        let lse = max + total.ln();
        for o in out.iter_mut() {
            *o -= lse;
        }
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position on the tape; indexes the vector returned by [`Tape::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Per-row scale by constants.
    ScaleRows(Var, Vec<f64>),
    AddScalar(Var),
    Exp(Var),
    LogSigmoid(Var),
    Clamp(Var, f64, f64),
    Min(Var, Var),
    Sum(Var),
    Square(Var),
    Concat(Vec<Var>),
    Embed { tok: Var, pos: Var, ids: Vec<u32>, positions: Vec<usize> },
    Linear { x: Var, w: Var, b: Var },
    LayerNorm { x: Var, g: Var, b: Var, stats: Vec<(f64, f64)> },
    Gelu(Var),
    Attention { qkv: Var, heads: usize, starts: Vec<usize>, probs: Vec<f64>, offsets: Vec<usize> },
    TargetLogprob { logits: Var, rows: Vec<usize>, targets: Vec<u32>, temperature: f64, logp: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(value, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let value = Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|&x| f(x)).collect());
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Min(a, b), f64::min)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows, factors.len(), "one factor per row");
        let mut value = t.clone();
        for (i, &f) in factors.iter().enumerate() {
            for x in value.row_mut(i) {
                *x *= f;
            }
        }
        self.push(value, Op::ScaleRows(a, factors.to_vec()), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// Numerically stable `ln σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean of all entries, as a 1×1 node.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Stacks column vectors (or any tensors with equal column count) by rows.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat column mismatch");
            data.extend_from_slice(&t.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Tensor::from_vec(rows, cols, data), Op::Concat(parts.to_vec()), parts)
    }

    /// Row `i` is `tok[ids[i]] + pos[positions[i]]`.
    pub fn embed(&mut self, tok: Var, pos: Var, ids: &[u32], positions: &[usize]) -> Var {
        let (tt, pt) = (self.value(tok), self.value(pos));
        let d = tt.cols;
        let mut value = Tensor::zeros(ids.len(), d);
        for (i, (&id, &p)) in ids.iter().zip(positions).enumerate() {
            let (a, b) = (tt.row(id as usize), pt.row(p));
            for (o, (x, y)) in value.row_mut(i).iter_mut().zip(a.iter().zip(b)) {
                *o = x + y;
            }
        }
        let op = Op::Embed { tok, pos, ids: ids.to_vec(), positions: positions.to_vec() };
        self.push(value, op, &[tok, pos])
    }

    /// `x W + b` row by row; `b` is a 1×n row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(tx.cols, tw.rows, "linear input width");
        let mut value = Tensor::zeros(tx.rows, tw.cols);
        for i in 0..tx.rows {
            kernels::linear_row(tx.row(i), &tw.data, &tb.data, value.row_mut(i));
        }
        self.push(value, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(g), self.value(b));
        let mut value = Tensor::zeros(tx.rows, tx.cols);
        let stats = (0..tx.rows)
            .map(|i| kernels::layer_norm_row(tx.row(i), &tg.data, &tb.data, value.row_mut(i)))
            .collect();
        self.push(value, Op::LayerNorm { x, g, b, stats }, &[x, g, b])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), kernels::gelu)
    }

    /// Multi-head causal self-attention over a `[q | k | v]` input. Row `i`
    /// attends to rows `starts[i]..=i`, which keeps packed documents apart.
    pub fn attention(&mut self, qkv: Var, heads: usize, starts: &[usize]) -> Var {
        let t = self.value(qkv);
        let d = t.cols / 3;
        let mut offsets = Vec::with_capacity(t.rows + 1);
        let mut total = 0;
        for (i, &s) in starts.iter().enumerate() {
            offsets.push(total);
            total += heads * (i - s + 1);
        }
        offsets.push(total);
        let mut probs = vec![0.0; total];
        let mut value = Tensor::zeros(t.rows, d);
        for i in 0..t.rows {
            let p = &mut probs[offsets[i]..offsets[i + 1]];
            kernels::attention_row(&t.data, d, heads, starts[i], i, p, value.row_mut(i));
        }
        let op = Op::Attention { qkv, heads, starts: starts.to_vec(), probs, offsets };
        self.push(value, op, &[qkv])
    }

    /// Column vector of `log softmax(logits[rows[k]] / T)[targets[k]]`.
    pub fn target_logprobs(&mut self, logits: Var, rows: &[usize], targets: &[u32], temperature: f64) -> Var {
        let t = self.value(logits);
        let v = t.cols;
        let mut logp = vec![0.0; rows.len() * v];
        let mut out = Vec::with_capacity(rows.len());
        for (k, (&r, &tgt)) in rows.iter().zip(targets).enumerate() {
            let lp = &mut logp[k * v..(k + 1) * v];
            kernels::log_softmax_row(t.row(r), temperature, lp);
            out.push(lp[tgt as usize]);
        }
        let op = Op::TargetLogprob {
            logits,
            rows: rows.to_vec(),
            targets: targets.to_vec(),
            temperature,
            logp,
        };
        self.push(Tensor::column(out), op, &[logits])
    }

    /// Gradients of the 1×1 node `loss` with respect to every node.
    ///
    /// Entries are `None` for nodes the loss does not depend on.
    pub fn backward(&self, loss: Var) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        grads
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        let t = self.value(v);
        Tensor::from_vec(t.rows, t.cols, data)
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = g.data.iter().map(|x| -x).collect();
                self.accumulate(grads, *b, self.like(*b, neg));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                let gb = g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
                self.accumulate(grads, *b, self.like(*b, gb));
            }
            Op::Min(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if ta.data[i] <= tb.data[i] {
                        ga[i] = g.data[i];
                    } else {
                        gb[i] = g.data[i];
                    }
                }
                self.accumulate(grads, *a, self.like(*a, ga));
                self.accumulate(grads, *b, self.like(*b, gb));
            }
            Op::Scale(a, c) => {
                let d = g.data.iter().map(|x| x * c).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::ScaleRows(a, factors) => {
                let mut d = g.clone();
                for (i, &f) in factors.iter().enumerate() {
                    for x in d.row_mut(i) {
                        *x *= f;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Exp(a) => {
                let d = g.data.iter().zip(&out.data).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::LogSigmoid(a) => {
                // d/dx ln σ(x) = σ(−x)
                let ta = self.value(*a);
                let d = g.data.iter().zip(&ta.data).map(|(x, y)| x * sigmoid(-y)).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Clamp(a, lo, hi) => {
                let ta = self.value(*a);
                let d = g
                    .data
                    .iter()
                    .zip(&ta.data)
                    .map(|(x, y)| if (*lo..=*hi).contains(y) { *x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Square(a) => {
                let ta = self.value(*a);
                let d = g.data.iter().zip(&ta.data).map(|(x, y)| 2.0 * x * y).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, self.like(*a, vec![g.data[0]; n]));
            }
            Op::Concat(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, self.like(p, g.data[at..at + n].to_vec()));
                    at += n;
                }
            }
            Op::Embed { tok, pos, ids, positions } => {
                let (tt, pt) = (self.value(*tok), self.value(*pos));
                let mut gt = Tensor::zeros(tt.rows, tt.cols);
                let mut gp = Tensor::zeros(pt.rows, pt.cols);
                for (i, (&id, &p)) in ids.iter().zip(positions).enumerate() {
                    for (c, &x) in g.row(i).iter().enumerate() {
                        gt.data[id as usize * tt.cols + c] += x;
                        gp.data[p * pt.cols + c] += x;
                    }
                }
                self.accumulate(grads, *tok, gt);
                self.accumulate(grads, *pos, gp);
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n_in, n_out) = (tw.rows, tw.cols);
                let mut gx = Tensor::zeros(tx.rows, n_in);
                let mut gw = Tensor::zeros(n_in, n_out);
                let mut gb = Tensor::zeros(1, n_out);
                for i in 0..tx.rows {
                    let gy = g.row(i);
                    let xi = tx.row(i);
                    let gxi = gx.row_mut(i);
                    for k in 0..n_in {
                        let wk = &tw.data[k * n_out..(k + 1) * n_out];
                        let gwk = &mut gw.data[k * n_out..(k + 1) * n_out];
                        let mut acc = 0.0;
                        for j in 0..n_out {
                            acc += gy[j] * wk[j];
                            gwk[j] += xi[k] * gy[j];
                        }
                        gxi[k] = acc;
                    }
                    for j in 0..n_out {
                        gb.data[j] += gy[j];
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *b, gb);
            }
            Op::LayerNorm { x, g: gain, b, stats } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let n = tx.cols;
                let mut gx = Tensor::zeros(tx.rows, n);
                let mut gg = Tensor::zeros(tg.rows, tg.cols);
                let mut gb = Tensor::zeros(tg.rows, tg.cols);
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for (i, &(mean, rstd)) in stats.iter().enumerate() {
                    let (xi, gy) = (tx.row(i), g.row(i));
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for c in 0..n {
                        xhat[c] = (xi[c] - mean) * rstd;
                        dxhat[c] = gy[c] * tg.data[c];
                        m1 += dxhat[c];
                        m2 += dxhat[c] * xhat[c];
                        gg.data[c] += gy[c] * xhat[c];
                        gb.data[c] += gy[c];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for (c, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o = rstd * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gain, gg);
                self.accumulate(grads, *b, gb);
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let d = g.data.iter().zip(&ta.data).map(|(x, y)| x * kernels::gelu_grad(*y)).collect();
                self.accumulate(grads, *a, self.like(*a, d));
            }
            Op::Attention { qkv, heads, starts, probs, offsets } => {
                let t = self.value(*qkv);
                let d = t.cols / 3;
                let dh = d / heads;
                let stride = 3 * d;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor::zeros(t.rows, t.cols);
                let mut dp = Vec::new();
                for i in 0..t.rows {
                    let start = starts[i];
                    let span = i - start + 1;
                    let gi = g.row(i);
                    for h in 0..*heads {
                        let p = &probs[offsets[i] + h * span..offsets[i] + (h + 1) * span];
                        let go = &gi[h * dh..(h + 1) * dh];
                        dp.clear();
                        let mut weighted = 0.0;
                        for (s, j) in (start..=i).enumerate() {
                            let vo = j * stride + 2 * d + h * dh;
                            let mut dot = 0.0;
                            for c in 0..dh {
                                dot += go[c] * t.data[vo + c];
                                gq.data[vo + c] += p[s] * go[c];
                            }
                            dp.push(dot);
                            weighted += p[s] * dot;
                        }
                        let qo = i * stride + h * dh;
                        for (s, j) in (start..=i).enumerate() {
                            let ds = p[s] * (dp[s] - weighted) * scale;
                            let ko = j * stride + d + h * dh;
                            for c in 0..dh {
                                gq.data[qo + c] += ds * t.data[ko + c];
                                gq.data[ko + c] += ds * t.data[qo + c];
                            }
                        }
                    }
                }
                self.accumulate(grads, *qkv, gq);
            }
            Op::TargetLogprob { logits, rows, targets, temperature, logp } => {
                let t = self.value(*logits);
                let v = t.cols;
                let mut gl = Tensor::zeros(t.rows, v);
                for (k, (&r, &tgt)) in rows.iter().zip(targets).enumerate() {
                    let gk = g.data[k] / temperature;
                    let lp = &logp[k * v..(k + 1) * v];
                    let row = gl.row_mut(r);
                    for j in 0..v {
                        row[j] -= gk * lp[j].exp();
                    }
                    row[tgt as usize] += gk;
                }
                self.accumulate(grads, *logits, gl);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Fails with `NonFiniteLoss` unless `x` is finite.
pub fn ensure_finite(x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFiniteLoss(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Compares backward against centered differences on every input entry.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        let h = 1e-5;
        for (n, input) in inputs.iter().enumerate() {
            let g = grads[vars[n].0].clone().unwrap_or_else(|| Tensor::zeros(input.rows, input.cols));
            for e in 0..input.len() {
                let eval = |delta: f64| {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(m, t)| {
                            let mut t = t.clone();
                            if m == n {
                                t.data[e] += delta;
                            }
                            tape.variable(t)
                        })
                        .collect();
                    let l = build(&mut tape, &vars);
                    tape.scalar_value(l)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.data[e];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "input {n} entry {e}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 2);
        let b = random(&mut rng, 3, 2);
        check(vec![a, b], |t, v| {
            let m = t.mul(v[0], v[1]);
            let e = t.exp(v[0]);
            let s = t.sub(e, m);
            let c = t.clamp(s, -0.5, 1.5);
            let mn = t.min(c, v[1]);
            let ls = t.log_sigmoid(mn);
            let sq = t.square(ls);
            let sr = t.scale_rows(sq, &[1.0, -2.0, 0.5]);
            let sc = t.add_scalar(sr, 3.0);
            let cat = t.concat(&[sc, v[0]]);
            t.mean(cat)
        });
    }

    #[test]
    fn network_ops() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let (d, heads, n) = (4, 2, 5);
        let inputs = vec![
            random(&mut rng, 6, d),
            random(&mut rng, 4, d),
            random(&mut rng, d, 3 * d),
            random(&mut rng, 1, 3 * d),
            random(&mut rng, 1, d),
            random(&mut rng, 1, d),
            random(&mut rng, d, 6),
            random(&mut rng, 1, 6),
        ];
        check(inputs, |t, v| {
            let x = t.embed(v[0], v[1], &[1, 3, 5, 0, 2], &[0, 1, 2, 0, 1]);
            let ln = t.layer_norm(x, v[4], v[5]);
            let qkv = t.linear(ln, v[2], v[3]);
            let att = t.attention(qkv, heads, &[0, 0, 0, 3, 3]);
            let h = t.add(x, att);
            let a = t.gelu(h);
            let logits = t.linear(a, v[6], v[7]);
            let lp = t.target_logprobs(logits, &[0, 1, 2, 3, 4], &[1, 2, 0, 5, 4], 0.7);
            let _ = n;
            t.sum(lp)
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(3.0));
        let m = tape.mul(a, c);
        let g = tape.backward(m);
        assert_eq!(g[a.0].as_ref().unwrap().data, [3.0]);
        assert!(g[c.0].is_none());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert_eq!(log_sigmoid(800.0), 0.0);
    }
}
