//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the backward pass is a single reverse sweep. Ops are
//! deliberately coarse (fused attention, fused layer norm, fused token
//! log-probability) to keep the node count per batch in the low hundreds.

use crate::tensor::{self, Matrix, Real};

pub type NodeId = usize;

/// A contiguous run of rows belonging to one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Layout of a block-diagonal multi-head attention: query span `i` attends
/// only to key span `i`.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub heads: usize,
    pub query_spans: Vec<Span>,
    pub key_spans: Vec<Span>,
    /// Query `t` of a span sees keys `0..=t` of its key span.
    pub causal: bool,
    /// Per key row; `false` rows are never attended (padding).
    pub key_valid: Option<Vec<bool>>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: Box<AttentionLayout>,
        probs: Vec<T>,
    },
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    TokenLogprob {
        logits: NodeId,
        targets: Vec<usize>,
        softmax: Matrix<T>,
    },
    SpanReduce {
        x: NodeId,
        spans: Vec<Span>,
        mean: bool,
    },
    LogSigmoid(NodeId),
    SumAll(NodeId),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Gradients with respect to parameters, indexed like the parameter list the
/// graph was built against.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub grads: Vec<Option<Matrix<T>>>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<T: Real> Graph<T> {
    pub fn new(param_count: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; param_count],
        }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "node is not a scalar");
        v.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Trainable parameter `index`. Repeated calls return the same node.
    pub fn param(&mut self, index: usize, value: &Matrix<T>) -> NodeId {
        if let Some(id) = self.param_nodes[index] {
            return id;
        }
        let id = self.push(value.clone(), Op::Param(index));
        self.param_nodes[index] = Some(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x - y).collect();
        let v = Matrix::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Sub(a, b))
    }

    /// `a + row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        tensor::add_row_inplace(&mut v, self.value(row));
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| x * c).collect();
        let v = Matrix::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| tensor::gelu(x)).collect();
        let v = Matrix::from_vec(va.rows, va.cols, data);
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (y, xhat, rstd) = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias));
        self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, layout: AttentionLayout) -> NodeId {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(layout.query_spans.len(), layout.key_spans.len());
        assert_eq!(vq.cols % layout.heads, 0);
        let d = vq.cols;
        let hd = d / layout.heads;
        let mut out = Matrix::zeros(vq.rows, d);
        let mut probs = Vec::new();
        for (qs, ks) in layout.query_spans.iter().zip(&layout.key_spans) {
            if layout.causal {
                assert_eq!(qs.len, ks.len, "causal attention needs equal spans");
            }
            for h in 0..layout.heads {
                for i in 0..qs.len {
                    let k_end = if layout.causal { ks.start + i + 1 } else { ks.end() };
                    let n = k_end - ks.start;
                    let base = probs.len();
                    probs.resize(base + n, T::zero());
                    let row = qs.start + i;
                    tensor::attend_row(
                        vq.row(row),
                        vk,
                        vv,
                        ks.start,
                        k_end,
                        h * hd,
                        hd,
                        layout.key_valid.as_deref(),
                        &mut probs[base..],
                        out.row_mut(row),
                    );
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout: Box::new(layout),
                probs,
            },
        )
    }

    pub fn gather_rows(&mut self, src: NodeId, index: Vec<usize>) -> NodeId {
        let vs = self.value(src);
        let mut v = Matrix::zeros(index.len(), vs.cols);
        for (r, &i) in index.iter().enumerate() {
            v.row_mut(r).copy_from_slice(vs.row(i));
        }
        self.push(v, Op::GatherRows(src, index))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut v = Matrix::zeros(0, cols);
        for &p in &parts {
            let vp = self.value(p);
            assert_eq!(vp.cols, cols, "concat_rows column mismatch");
            v.data.extend_from_slice(&vp.data);
            v.rows += vp.rows;
        }
        self.push(v, Op::ConcatRows(parts))
    }

    /// Column vector of `log softmax(logits[r])[targets[r]]`.
    pub fn token_logprob(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let vl = self.value(logits);
        assert_eq!(vl.rows, targets.len());
        let lsm = tensor::log_softmax(vl);
        let mut out = Matrix::zeros(vl.rows, 1);
        let mut softmax = Matrix::zeros(vl.rows, vl.cols);
        for (r, &t) in targets.iter().enumerate() {
            out.data[r] = lsm.get(r, t);
            for c in 0..vl.cols {
                softmax.data[r * vl.cols + c] = lsm.get(r, c).exp();
            }
        }
        self.push(
            out,
            Op::TokenLogprob {
                logits,
                targets,
                softmax,
            },
        )
    }

    /// Sum (or mean) of a column vector over each span; one output row per span.
    pub fn span_reduce(&mut self, x: NodeId, spans: Vec<Span>, mean: bool) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.cols, 1);
        let mut out = Matrix::zeros(spans.len(), 1);
        for (i, s) in spans.iter().enumerate() {
            let mut acc = T::zero();
            for r in s.start..s.end() {
                acc = acc + vx.data[r];
            }
            if mean {
                acc = acc / T::from_usize(s.len.max(1)).unwrap();
            }
            out.data[i] = acc;
        }
        self.push(out, Op::SpanReduce { x, spans, mean })
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data.iter().map(|&x| log_sigmoid(x)).collect();
        let v = Matrix::from_vec(va.rows, va.cols, data);
        self.push(v, Op::LogSigmoid(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().copied().sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::SumAll(a))
    }

    /// Backpropagate from the scalar `root`; returns parameter gradients.
    pub fn backward(&self, root: NodeId) -> ParamGrads<T> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Matrix::from_vec(1, 1, vec![T::one()]));
        let mut out = ParamGrads {
            grads: vec![None; self.param_nodes.len()],
        };
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, g, &mut grads, &mut out);
        }
        out
    }

    fn backward_node(
        &self,
        id: NodeId,
        g: Matrix<T>,
        grads: &mut [Option<Matrix<T>>],
        params: &mut ParamGrads<T>,
    ) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Param(p) => accumulate(&mut params.grads[*p], g),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(va.rows, va.cols);
                tensor::matmul_nt_acc(&g, vb, &mut ga);
                let mut gb = Matrix::zeros(vb.rows, vb.cols);
                tensor::matmul_tn_acc(va, &g, &mut gb);
                accumulate(&mut grads[*a], ga);
                accumulate(&mut grads[*b], gb);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[*b], g.clone());
                accumulate(&mut grads[*a], g);
            }
            Op::Sub(a, b) => {
                let neg = Matrix::from_vec(g.rows, g.cols, g.data.iter().map(|&x| -x).collect());
                accumulate(&mut grads[*b], neg);
                accumulate(&mut grads[*a], g);
            }
            Op::AddRow(a, row) => {
                let mut gr = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (acc, &x) in gr.data.iter_mut().zip(g.row(r)) {
                        *acc = *acc + x;
                    }
                }
                accumulate(&mut grads[*row], gr);
                accumulate(&mut grads[*a], g);
            }
            Op::Scale(a, c) => {
                let ga = Matrix::from_vec(g.rows, g.cols, g.data.iter().map(|&x| x * *c).collect());
                accumulate(&mut grads[*a], ga);
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&va.data)
                    .map(|(&gg, &x)| gg * tensor::gelu_grad(x))
                    .collect();
                accumulate(&mut grads[*a], Matrix::from_vec(g.rows, g.cols, data));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = g.cols;
                let nf = T::from_usize(n).unwrap();
                let vg = self.value(*gain);
                let mut gx = Matrix::zeros(g.rows, n);
                let mut gg = Matrix::zeros(1, n);
                let mut gb = Matrix::zeros(1, n);
                for r in 0..g.rows {
                    let gr = g.row(r);
                    let xh = xhat.row(r);
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for c in 0..n {
                        let d = gr[c] * vg.data[c];
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * xh[c];
                        gg.data[c] = gg.data[c] + gr[c] * xh[c];
                        gb.data[c] = gb.data[c] + gr[c];
                    }
                    mean_d = mean_d / nf;
                    mean_dx = mean_dx / nf;
                    let out = gx.row_mut(r);
                    for c in 0..n {
                        let d = gr[c] * vg.data[c];
                        out[c] = rstd[r] * (d - mean_d - xh[c] * mean_dx);
                    }
                }
                accumulate(&mut grads[*x], gx);
                accumulate(&mut grads[*gain], gg);
                accumulate(&mut grads[*bias], gb);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (gq, gk, gv) = attention_backward(vq, vk, vv, layout, probs, &g);
                accumulate(&mut grads[*q], gq);
                accumulate(&mut grads[*k], gk);
                accumulate(&mut grads[*v], gv);
            }
            Op::GatherRows(src, index) => {
                let vs = self.value(*src);
                let mut gs = Matrix::zeros(vs.rows, vs.cols);
                for (r, &i) in index.iter().enumerate() {
                    let c = vs.cols;
                    for (acc, &x) in gs.data[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                        *acc = *acc + x;
                    }
                }
                accumulate(&mut grads[*src], gs);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    let c = g.cols;
                    let gp = Matrix::from_vec(
                        rows,
                        c,
                        g.data[offset * c..(offset + rows) * c].to_vec(),
                    );
                    accumulate(&mut grads[p], gp);
                    offset += rows;
                }
            }
            Op::TokenLogprob {
                logits,
                targets,
                softmax,
            } => {
                let mut gl = Matrix::zeros(softmax.rows, softmax.cols);
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.data[r];
                    let out = gl.row_mut(r);
                    for (o, &p) in out.iter_mut().zip(softmax.row(r)) {
                        *o = -gr * p;
                    }
                    out[t] = out[t] + gr;
                }
                accumulate(&mut grads[*logits], gl);
            }
            Op::SpanReduce { x, spans, mean } => {
                let rows = self.value(*x).rows;
                let mut gx = Matrix::zeros(rows, 1);
                for (i, s) in spans.iter().enumerate() {
                    let mut gi = g.data[i];
                    if *mean {
                        gi = gi / T::from_usize(s.len.max(1)).unwrap();
                    }
                    for r in s.start..s.end() {
                        gx.data[r] = gx.data[r] + gi;
                    }
                }
                accumulate(&mut grads[*x], gx);
            }
            Op::LogSigmoid(a) => {
                let va = self.value(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&va.data)
                    .map(|(&gg, &x)| gg * sigmoid(-x))
                    .collect();
                accumulate(&mut grads[*a], Matrix::from_vec(g.rows, g.cols, data));
            }
            Op::SumAll(a) => {
                let va = self.value(*a);
                accumulate(&mut grads[*a], Matrix::filled(va.rows, va.cols, g.data[0]));
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Matrix<T>>, g: Matrix<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
pub fn log_sigmoid<T: Real>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

fn attention_backward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    layout: &AttentionLayout,
    probs: &[T],
    g: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let d = q.cols;
    let hd = d / layout.heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let mut gq = Matrix::zeros(q.rows, d);
    let mut gk = Matrix::zeros(k.rows, d);
    let mut gv = Matrix::zeros(v.rows, d);
    let mut cursor = 0;
    let mut dp = Vec::new();
    for (qs, ks) in layout.query_spans.iter().zip(&layout.key_spans) {
        for h in 0..layout.heads {
            let c0 = h * hd;
            for i in 0..qs.len {
                let n = if layout.causal { i + 1 } else { ks.len };
                let p = &probs[cursor..cursor + n];
                cursor += n;
                let row = qs.start + i;
                let go = &g.row(row)[c0..c0 + hd];
                dp.clear();
                let mut dot = T::zero();
                for (j, &pj) in p.iter().enumerate() {
                    let kr = ks.start + j;
                    let vrow = &v.row(kr)[c0..c0 + hd];
                    let mut s = T::zero();
                    for t in 0..hd {
                        s = s + go[t] * vrow[t];
                    }
                    dp.push(s);
                    dot = dot + pj * s;
                    if pj != T::zero() {
                        let gvr = &mut gv.data[kr * d + c0..kr * d + c0 + hd];
                        for t in 0..hd {
                            gvr[t] = gvr[t] + pj * go[t];
                        }
                    }
                }
                let qrow = &q.row(row)[c0..c0 + hd];
                for (j, &pj) in p.iter().enumerate() {
                    if pj == T::zero() {
                        continue;
                    }
                    let ds = pj * (dp[j] - dot) * scale;
                    let kr = ks.start + j;
                    let krow = &k.row(kr)[c0..c0 + hd];
                    let gqr = &mut gq.data[row * d + c0..row * d + c0 + hd];
                    for t in 0..hd {
                        gqr[t] = gqr[t] + ds * krow[t];
                    }
                    let gkr = &mut gk.data[kr * d + c0..kr * d + c0 + hd];
                    for t in 0..hd {
                        gkr[t] = gkr[t] + ds * qrow[t];
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}
