//! Batched graph construction. All sequences of a batch are stacked row-wise;
//! attention is block-diagonal over [`Span`]s, so no padding is needed.

use super::{AttnIx, EncLayerIx, FfnIx, LnIx, Model};
use crate::autograd::{AttentionLayout, Graph, NodeId, Span};
use crate::error::{LadError, Result};
use crate::interests::{AssembledInput, Segment};
use crate::tensor::{sinusoid_row, Matrix, Real};
use crate::vocab::{TokenId, BOS, PAD};

/// Where an encoder item's long-term rows come from.
#[derive(Debug, Clone)]
pub enum LongRef<T> {
    /// Indices into [`ForwardBatch::behaviors`]; encoded in-graph so the
    /// long-term encoder receives gradients.
    Behaviors(Vec<usize>),
    /// Precomputed vectors (memory bank), treated as constants.
    Vectors(Matrix<T>),
}

#[derive(Debug, Clone)]
pub struct EncItem<T> {
    pub prefix: Vec<TokenId>,
    pub short: Vec<TokenId>,
    pub long: LongRef<T>,
}

impl<T: Real> EncItem<T> {
    fn long_rows(&self) -> usize {
        match &self.long {
            LongRef::Behaviors(b) => b.len(),
            LongRef::Vectors(v) => v.rows,
        }
    }

    pub fn len(&self) -> usize {
        self.prefix.len() + self.short.len() + self.long_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A decoder sequence to score against encoder item `item`. `tokens` are the
/// prediction targets; the decoder input is `BOS` followed by all but the
/// last target.
#[derive(Debug, Clone)]
pub struct DecSeq {
    pub item: usize,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone)]
pub struct ForwardBatch<T> {
    /// Unique long-term behaviors (token ids, without the summary slot).
    pub behaviors: Vec<Vec<TokenId>>,
    pub items: Vec<EncItem<T>>,
    pub seqs: Vec<DecSeq>,
}

impl<T: Real> ForwardBatch<T> {
    pub fn single(input: &AssembledInput<T>, targets: Vec<Vec<TokenId>>) -> Self {
        Self {
            behaviors: vec![],
            items: vec![EncItem {
                prefix: input.prefix_ids.clone(),
                short: input.short_ids.clone(),
                long: LongRef::Vectors(input.long_vectors.vectors.clone()),
            }],
            seqs: targets
                .into_iter()
                .map(|tokens| DecSeq { item: 0, tokens })
                .collect(),
        }
    }
}

/// Node handles of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub logits: NodeId,
    /// Column of per-target log-probabilities.
    pub token_lp: NodeId,
    /// One row per decoder sequence: summed log-probability.
    pub seq_sum: NodeId,
    /// One row per decoder sequence: mean log-probability.
    pub seq_mean: NodeId,
    pub seq_spans: Vec<Span>,
}

fn linear<T: Real>(g: &mut Graph<T>, m: &Model<T>, x: NodeId, w: usize, b: usize) -> NodeId {
    let wn = g.param(w, m.p(w));
    let bn = g.param(b, m.p(b));
    let y = g.matmul(x, wn);
    g.add_row(y, bn)
}

fn layer_norm<T: Real>(g: &mut Graph<T>, m: &Model<T>, x: NodeId, ix: LnIx) -> NodeId {
    let gn = g.param(ix.g, m.p(ix.g));
    let bn = g.param(ix.b, m.p(ix.b));
    g.layer_norm(x, gn, bn)
}

fn attention<T: Real>(
    g: &mut Graph<T>,
    m: &Model<T>,
    ix: &AttnIx,
    xq: NodeId,
    xkv: NodeId,
    layout: AttentionLayout,
) -> NodeId {
    let q = linear(g, m, xq, ix.wq, ix.bq);
    let k = linear(g, m, xkv, ix.wk, ix.bk);
    let v = linear(g, m, xkv, ix.wv, ix.bv);
    let o = g.attention(q, k, v, layout);
    linear(g, m, o, ix.wo, ix.bo)
}

fn feed_forward<T: Real>(g: &mut Graph<T>, m: &Model<T>, x: NodeId, ix: &FfnIx) -> NodeId {
    let h = linear(g, m, x, ix.w1, ix.b1);
    let h = g.gelu(h);
    linear(g, m, h, ix.w2, ix.b2)
}

fn encoder_layer<T: Real>(
    g: &mut Graph<T>,
    m: &Model<T>,
    ix: &EncLayerIx,
    x: NodeId,
    layout: &AttentionLayout,
) -> NodeId {
    let h = layer_norm(g, m, x, ix.ln1);
    let a = attention(g, m, &ix.attn, h, h, layout.clone());
    let x = g.add(x, a);
    let h = layer_norm(g, m, x, ix.ln2);
    let f = feed_forward(g, m, h, &ix.ffn);
    g.add(x, f)
}

fn positions<T: Real>(spans: &[Span], dim: usize) -> Matrix<T> {
    let rows: usize = spans.iter().map(|s| s.len).sum();
    let mut pos = Matrix::zeros(rows, dim);
    for s in spans {
        for j in 0..s.len {
            sinusoid_row(j, pos.row_mut(s.start + j));
        }
    }
    pos
}

/// Long-term encoder over `behaviors`; returns a `behaviors.len() x dim`
/// node holding each behavior's summary-slot output.
pub(crate) fn lte_forward<T: Real>(
    m: &Model<T>,
    g: &mut Graph<T>,
    behaviors: &[Vec<TokenId>],
) -> NodeId {
    let h = m.hyper();
    let mut ids = Vec::new();
    let mut spans = Vec::with_capacity(behaviors.len());
    for b in behaviors {
        let start = ids.len();
        ids.push(BOS);
        ids.extend(b.iter().take(h.max_lte_len - 1));
        spans.push(Span::new(start, ids.len() - start));
    }
    let valid: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
    let emb = g.param(m.layout.tok_emb, m.p(m.layout.tok_emb));
    let x = g.gather_rows(emb, ids.iter().map(|&t| t as usize).collect());
    let pos = g.constant(positions(&spans, h.dim));
    let mut x = g.add(x, pos);
    let layout = AttentionLayout {
        heads: h.heads,
        query_spans: spans.clone(),
        key_spans: spans.clone(),
        causal: false,
        key_valid: Some(valid),
    };
    for ix in &m.layout.lte {
        x = encoder_layer(g, m, ix, x, &layout);
    }
    let x = layer_norm(g, m, x, m.layout.lte_ln);
    g.gather_rows(x, spans.iter().map(|s| s.start).collect())
}

struct Encoded {
    memory: NodeId,
    spans: Vec<Span>,
    valid: Vec<bool>,
}

fn encode<T: Real>(m: &Model<T>, g: &mut Graph<T>, batch: &ForwardBatch<T>) -> Result<Encoded> {
    let h = m.hyper();
    for item in &batch.items {
        if item.len() > h.max_enc_len {
            return Err(LadError::TooLong {
                what: "encoder input",
                len: item.len(),
                max: h.max_enc_len,
            });
        }
        if let LongRef::Vectors(v) = &item.long {
            if v.rows > 0 && v.cols != h.dim {
                return Err(LadError::InvalidInput(format!(
                    "long-term vectors have width {}, model dim is {}",
                    v.cols, h.dim
                )));
            }
        }
    }
    let lte = if batch.behaviors.is_empty() {
        None
    } else {
        Some(lte_forward(m, g, &batch.behaviors))
    };

    // Rows of `combined`: all prefix/short tokens, then LTE outputs, then
    // precomputed vectors.
    let mut token_ids: Vec<usize> = Vec::new();
    let mut const_vectors: Matrix<T> = Matrix::zeros(0, h.dim);
    for item in &batch.items {
        token_ids.extend(item.prefix.iter().chain(&item.short).map(|&t| t as usize));
        if let LongRef::Vectors(v) = &item.long {
            for r in 0..v.rows {
                const_vectors.push_row(v.row(r));
            }
        }
    }
    let n_tok = token_ids.len();
    let n_lte = batch.behaviors.len();

    let mut order = Vec::new();
    let mut tags = Vec::new();
    let mut valid = Vec::new();
    let mut spans = Vec::new();
    let (mut tok_cursor, mut const_cursor) = (0usize, 0usize);
    for item in &batch.items {
        let start = order.len();
        for &t in item.prefix.iter().chain(&item.short) {
            order.push(tok_cursor);
            tok_cursor += 1;
            valid.push(t != PAD);
        }
        tags.extend(std::iter::repeat_n(Segment::Prefix as usize, item.prefix.len()));
        tags.extend(std::iter::repeat_n(Segment::Short as usize, item.short.len()));
        match &item.long {
            LongRef::Behaviors(ix) => {
                for &b in ix {
                    order.push(n_tok + b);
                }
            }
            LongRef::Vectors(v) => {
                for _ in 0..v.rows {
                    order.push(n_tok + n_lte + const_cursor);
                    const_cursor += 1;
                }
            }
        }
        let long_rows = item.long_rows();
        tags.extend(std::iter::repeat_n(Segment::Long as usize, long_rows));
        valid.extend(std::iter::repeat_n(true, long_rows));
        spans.push(Span::new(start, order.len() - start));
    }

    let emb = g.param(m.layout.tok_emb, m.p(m.layout.tok_emb));
    let mut parts = vec![g.gather_rows(emb, token_ids)];
    if let Some(l) = lte {
        parts.push(l);
    }
    if const_vectors.rows > 0 {
        parts.push(g.constant(const_vectors));
    }
    let combined = if parts.len() == 1 { parts[0] } else { g.concat_rows(parts) };
    let x = g.gather_rows(combined, order);
    let pos = g.constant(positions(&spans, h.dim));
    let x = g.add(x, pos);
    let seg = g.param(m.layout.seg_emb, m.p(m.layout.seg_emb));
    let seg_rows = g.gather_rows(seg, tags);
    let mut x = g.add(x, seg_rows);
    let layout = AttentionLayout {
        heads: h.heads,
        query_spans: spans.clone(),
        key_spans: spans.clone(),
        causal: false,
        key_valid: Some(valid.clone()),
    };
    for ix in &m.layout.enc {
        x = encoder_layer(g, m, ix, x, &layout);
    }
    let memory = layer_norm(g, m, x, m.layout.enc_ln);
    Ok(Encoded {
        memory,
        spans,
        valid,
    })
}

pub(crate) fn encode_only<T: Real>(
    m: &Model<T>,
    g: &mut Graph<T>,
    batch: &ForwardBatch<T>,
) -> Result<NodeId> {
    Ok(encode(m, g, batch)?.memory)
}

pub fn forward<T: Real>(m: &Model<T>, g: &mut Graph<T>, batch: &ForwardBatch<T>) -> Result<ForwardOut> {
    let h = m.hyper();
    if batch.seqs.is_empty() {
        return Err(LadError::InvalidInput("no decoder sequences in batch".into()));
    }
    for s in &batch.seqs {
        if s.tokens.is_empty() {
            return Err(LadError::InvalidInput("empty decoder sequence".into()));
        }
        if s.tokens.len() > h.max_dec_len {
            return Err(LadError::TooLong {
                what: "decoder sequence",
                len: s.tokens.len(),
                max: h.max_dec_len,
            });
        }
        if s.item >= batch.items.len() {
            return Err(LadError::InvalidInput("decoder sequence refers to a missing item".into()));
        }
        if let Some(&bad) = s.tokens.iter().find(|&&t| t as usize >= m.vocab().len()) {
            return Err(LadError::UnknownId(bad));
        }
    }
    let enc = encode(m, g, batch)?;

    let mut in_ids = Vec::new();
    let mut targets = Vec::new();
    let mut spans = Vec::new();
    let mut key_spans = Vec::new();
    for s in &batch.seqs {
        let start = in_ids.len();
        in_ids.push(BOS as usize);
        in_ids.extend(s.tokens[..s.tokens.len() - 1].iter().map(|&t| t as usize));
        targets.extend(s.tokens.iter().map(|&t| t as usize));
        spans.push(Span::new(start, s.tokens.len()));
        key_spans.push(enc.spans[s.item]);
    }
    let emb = g.param(m.layout.tok_emb, m.p(m.layout.tok_emb));
    let x = g.gather_rows(emb, in_ids);
    let pos = g.constant(positions(&spans, h.dim));
    let mut x = g.add(x, pos);
    let self_layout = AttentionLayout {
        heads: h.heads,
        query_spans: spans.clone(),
        key_spans: spans.clone(),
        causal: true,
        key_valid: None,
    };
    let cross_layout = AttentionLayout {
        heads: h.heads,
        query_spans: spans.clone(),
        key_spans,
        causal: false,
        key_valid: Some(enc.valid.clone()),
    };
    for ix in &m.layout.dec {
        let hn = layer_norm(g, m, x, ix.ln1);
        let a = attention(g, m, &ix.self_attn, hn, hn, self_layout.clone());
        x = g.add(x, a);
        let hn = layer_norm(g, m, x, ix.ln2);
        let c = attention(g, m, &ix.cross, hn, enc.memory, cross_layout.clone());
        x = g.add(x, c);
        let hn = layer_norm(g, m, x, ix.ln3);
        let f = feed_forward(g, m, hn, &ix.ffn);
        x = g.add(x, f);
    }
    let x = layer_norm(g, m, x, m.layout.dec_ln);
    let logits = linear(g, m, x, m.layout.out_w, m.layout.out_b);
    let token_lp = g.token_logprob(logits, targets);
    let seq_sum = g.span_reduce(token_lp, spans.clone(), false);
    let seq_mean = g.span_reduce(token_lp, spans.clone(), true);
    Ok(ForwardOut {
        logits,
        token_lp,
        seq_sum,
        seq_mean,
        seq_spans: spans,
    })
}
