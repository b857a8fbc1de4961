//! Long-term and short-term interest capture and model input assembly.

use crate::autograd::Graph;
use crate::error::{LadError, Result};
use crate::glm::Model;
use crate::tensor::{Matrix, Real};
use crate::vocab::{TokenId, Vocabulary, EOS};

/// Most tokens kept from the prefix.
pub const PREFIX_CAP: usize = 10;
/// Most tokens kept from each copied short-term query.
pub const SHORT_BEHAVIOR_CAP: usize = 10;
/// Separator between copied short-term queries.
pub const SHORT_SEPARATOR: TokenId = EOS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Prefix = 0,
    Short = 1,
    Long = 2,
}

/// One vector per encoded long-term behavior, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTermVectors<T = f32> {
    pub vectors: Matrix<T>,
    /// How many behaviors were cut to the long-term encoder's length.
    pub truncated: usize,
}

impl<T: Real> LongTermVectors<T> {
    pub fn empty(dim: usize) -> Self {
        Self {
            vectors: Matrix::zeros(0, dim),
            truncated: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.vectors.rows
    }

    /// Keep only the most recent `n` rows.
    pub fn most_recent(&self, n: usize) -> Self {
        let skip = self.vectors.rows.saturating_sub(n);
        let cols = self.vectors.cols;
        Self {
            vectors: Matrix::from_vec(
                self.vectors.rows - skip,
                cols,
                self.vectors.data[skip * cols..].to_vec(),
            ),
            truncated: self.truncated,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledInput<T = f32> {
    pub prefix_ids: Vec<TokenId>,
    pub short_ids: Vec<TokenId>,
    pub long_vectors: LongTermVectors<T>,
    pub segment_tags: Vec<Segment>,
}

impl<T: Real> AssembledInput<T> {
    pub fn len(&self) -> usize {
        self.segment_tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_tags.is_empty()
    }
}

fn recent<S>(items: &[S], n: usize) -> &[S] {
    &items[items.len().saturating_sub(n)..]
}

/// Token ids a behavior contributes to the long-term encoder, after the cap.
pub fn long_term_tokens(vocab: &Vocabulary, behavior: &str, max_tokens: usize) -> (Vec<TokenId>, bool) {
    let mut ids = vocab.encode(behavior);
    let cut = ids.len() > max_tokens;
    ids.truncate(max_tokens);
    (ids, cut)
}

/// Encode the most recent `l_max` behaviors into one vector each.
pub fn encode_long_term<T: Real>(
    behaviors: &[String],
    l_max: usize,
    model: &Model<T>,
) -> Result<LongTermVectors<T>> {
    let kept = recent(behaviors, l_max);
    let dim = model.hyper().dim;
    if kept.is_empty() {
        return Ok(LongTermVectors::empty(dim));
    }
    let cap = model.hyper().max_lte_len - 1;
    let mut truncated = 0;
    let ids: Vec<Vec<TokenId>> = kept
        .iter()
        .map(|b| {
            let (ids, cut) = long_term_tokens(model.vocab(), b, cap);
            truncated += cut as usize;
            ids
        })
        .collect();
    let mut g = Graph::new(model.params.len());
    let out = crate::glm::lte_forward(model, &mut g, &ids);
    let vectors = g.value(out).clone();
    if !vectors.is_finite() {
        return Err(LadError::InvalidInput("long-term encoder produced non-finite values".into()));
    }
    Ok(LongTermVectors { vectors, truncated })
}

/// Identity copy of the most recent `s_max` queries, separator-joined.
pub fn copy_short_term(behaviors: &[String], s_max: usize, vocab: &Vocabulary) -> Vec<TokenId> {
    let mut out = Vec::new();
    for (i, b) in recent(behaviors, s_max).iter().enumerate() {
        if i > 0 {
            out.push(SHORT_SEPARATOR);
        }
        out.extend(vocab.encode(b).into_iter().take(SHORT_BEHAVIOR_CAP));
    }
    out
}

/// Prefix tokens as the model sees them: encoded and capped.
pub fn prefix_tokens(prefix: &str, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let mut ids = vocab.encode(prefix);
    if ids.is_empty() {
        return Err(LadError::InvalidInput("prefix is empty".into()));
    }
    ids.truncate(PREFIX_CAP);
    Ok(ids)
}

pub fn assemble_input<T: Real>(
    prefix: &str,
    short_ids: Vec<TokenId>,
    long_vectors: LongTermVectors<T>,
    vocab: &Vocabulary,
) -> Result<AssembledInput<T>> {
    let prefix_ids = prefix_tokens(prefix, vocab)?;
    let mut segment_tags = vec![Segment::Prefix; prefix_ids.len()];
    segment_tags.extend(std::iter::repeat_n(Segment::Short, short_ids.len()));
    segment_tags.extend(std::iter::repeat_n(Segment::Long, long_vectors.count()));
    Ok(AssembledInput {
        prefix_ids,
        short_ids,
        long_vectors,
        segment_tags,
    })
}
