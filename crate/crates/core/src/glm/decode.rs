//! Incremental decoding with a key/value cache, and beam search on top of it.
//!
//! The decoder reuses the same row kernels as the training graph, so a beam's
//! accumulated score matches [`Model::sequence_logprob`] up to float rounding.

use super::{AttnIx, Candidate, CandidateList, FfnIx, LnIx, Model};
use crate::error::{LadError, Result};
use crate::interests::AssembledInput;
use crate::tensor::{self, sinusoid_row, Matrix, Real};
use crate::vocab::{TokenId, BOS, EOS, PAD, REJECT, UNK};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Number of real completions to return.
    pub n: usize,
    pub beam_width: usize,
    /// Maximum completion length in tokens, counting the end token.
    pub max_len: usize,
    /// Rank by mean per-token log-probability; `false` ranks by the raw sum.
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            n: 4,
            beam_width: 4,
            max_len: 24,
            length_normalize: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 1 {
            return Err(LadError::InvalidInput("max_len must be at least 1".into()));
        }
        if self.n < 1 || self.beam_width < self.n {
            return Err(LadError::InvalidInput(format!(
                "beam_width {} must be at least n {} and n must be positive",
                self.beam_width, self.n
            )));
        }
        Ok(())
    }
}

/// Per-beam self-attention cache, one key and one value matrix per layer.
#[derive(Debug, Clone, Default)]
pub struct BeamCache<T> {
    keys: Vec<Matrix<T>>,
    values: Vec<Matrix<T>>,
}

impl<T: Real> BeamCache<T> {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encoded input plus per-layer cross-attention keys and values.
pub struct Decoder<'m, T: Real> {
    model: &'m Model<T>,
    cross_k: Vec<Matrix<T>>,
    cross_v: Vec<Matrix<T>>,
    memory_valid: Vec<bool>,
}

fn ln<T: Real>(m: &Model<T>, x: &Matrix<T>, ix: LnIx) -> Matrix<T> {
    tensor::layer_norm(x, m.p(ix.g), m.p(ix.b)).0
}

fn lin<T: Real>(m: &Model<T>, x: &Matrix<T>, w: usize, b: usize) -> Matrix<T> {
    tensor::linear(x, m.p(w), m.p(b))
}

fn ffn<T: Real>(m: &Model<T>, x: &Matrix<T>, ix: &FfnIx) -> Matrix<T> {
    let mut h = lin(m, x, ix.w1, ix.b1);
    h.data.iter_mut().for_each(|v| *v = tensor::gelu(*v));
    lin(m, &h, ix.w2, ix.b2)
}

impl<'m, T: Real> Decoder<'m, T> {
    pub fn new(model: &'m Model<T>, input: &AssembledInput<T>) -> Result<Self> {
        let memory = model.encode(input)?;
        let mut memory_valid: Vec<bool> = input
            .prefix_ids
            .iter()
            .chain(&input.short_ids)
            .map(|&t| t != PAD)
            .collect();
        memory_valid.resize(memory.rows, true);
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for l in &model.layout.dec {
            cross_k.push(lin(model, &memory, l.cross.wk, l.cross.bk));
            cross_v.push(lin(model, &memory, l.cross.wv, l.cross.bv));
        }
        Ok(Self {
            model,
            cross_k,
            cross_v,
            memory_valid,
        })
    }

    pub fn start(&self) -> BeamCache<T> {
        let d = self.model.hyper().dim;
        let layers = self.model.layout.dec.len();
        BeamCache {
            keys: vec![Matrix::zeros(0, d); layers],
            values: vec![Matrix::zeros(0, d); layers],
        }
    }

    fn attend(
        &self,
        ix: &AttnIx,
        q: &Matrix<T>,
        keys: &[&Matrix<T>],
        values: &[&Matrix<T>],
        valid: Option<&[bool]>,
    ) -> Matrix<T> {
        let h = self.model.hyper();
        let hd = h.dim / h.heads;
        let mut out = Matrix::zeros(q.rows, h.dim);
        let mut probs = Vec::new();
        for r in 0..q.rows {
            let n = keys[r].rows;
            probs.resize(n, T::zero());
            for head in 0..h.heads {
                tensor::attend_row(
                    q.row(r),
                    keys[r],
                    values[r],
                    0,
                    n,
                    head * hd,
                    hd,
                    valid,
                    &mut probs,
                    out.row_mut(r),
                );
            }
        }
        lin(self.model, &out, ix.wo, ix.bo)
    }

    /// Feed one token per beam and return the next-token log-probabilities,
    /// one row per beam. Each cache grows by one position.
    pub fn step(&self, caches: &mut [BeamCache<T>], tokens: &[TokenId]) -> Result<Matrix<T>> {
        assert_eq!(caches.len(), tokens.len());
        let m = self.model;
        let h = m.hyper();
        let vocab = m.vocab().len();
        let mut x = Matrix::zeros(tokens.len(), h.dim);
        let mut pos = vec![T::zero(); h.dim];
        for (r, (&t, c)) in tokens.iter().zip(caches.iter()).enumerate() {
            if t as usize >= vocab {
                return Err(LadError::UnknownId(t));
            }
            if c.len() >= h.max_dec_len {
                return Err(LadError::TooLong {
                    what: "decoder sequence",
                    len: c.len() + 1,
                    max: h.max_dec_len,
                });
            }
            sinusoid_row(c.len(), &mut pos);
            let emb = m.p(m.layout.tok_emb).row(t as usize);
            for ((o, &e), &p) in x.row_mut(r).iter_mut().zip(emb).zip(&pos) {
                *o = e + p;
            }
        }
        for (li, l) in m.layout.dec.iter().enumerate() {
            let hn = ln(m, &x, l.ln1);
            let q = lin(m, &hn, l.self_attn.wq, l.self_attn.bq);
            let k = lin(m, &hn, l.self_attn.wk, l.self_attn.bk);
            let v = lin(m, &hn, l.self_attn.wv, l.self_attn.bv);
            for (r, c) in caches.iter_mut().enumerate() {
                c.keys[li].push_row(k.row(r));
                c.values[li].push_row(v.row(r));
            }
            let ks: Vec<&Matrix<T>> = caches.iter().map(|c| &c.keys[li]).collect();
            let vs: Vec<&Matrix<T>> = caches.iter().map(|c| &c.values[li]).collect();
            let a = self.attend(&l.self_attn, &q, &ks, &vs, None);
            x.add_assign(&a);

            let hn = ln(m, &x, l.ln2);
            let q = lin(m, &hn, l.cross.wq, l.cross.bq);
            let ks = vec![&self.cross_k[li]; q.rows];
            let vs = vec![&self.cross_v[li]; q.rows];
            let a = self.attend(&l.cross, &q, &ks, &vs, Some(&self.memory_valid));
            x.add_assign(&a);

            let hn = ln(m, &x, l.ln3);
            let f = ffn(m, &hn, &l.ffn);
            x.add_assign(&f);
        }
        let x = ln(m, &x, m.layout.dec_ln);
        let logits = lin(m, &x, m.layout.out_w, m.layout.out_b);
        Ok(tensor::log_softmax(&logits))
    }
}

struct Beam<T> {
    ids: Vec<TokenId>,
    sum: f64,
    cache: BeamCache<T>,
}

fn seq_score(sum: f64, len: usize, normalize: bool) -> f64 {
    if normalize {
        sum / len as f64
    } else {
        sum
    }
}

fn expandable(t: TokenId, step: usize, last: bool) -> bool {
    match t {
        PAD | BOS | UNK => false,
        REJECT => step == 0,
        EOS => true,
        _ => !last,
    }
}

/// Beam search for `cfg.n` completions.
///
/// `REJECT` may only be the first token; choosing it ends the beam as the
/// reject candidate, which is always included when its score is finite.
/// Beams that have not emitted `EOS` within `cfg.max_len` tokens are dropped.
/// The result is sorted by score, descending, with ties broken by token ids.
pub fn beam_generate<T: Real>(
    model: &Model<T>,
    input: &AssembledInput<T>,
    cfg: &DecodeConfig,
) -> Result<CandidateList> {
    cfg.validate()?;
    if cfg.max_len > model.hyper().max_dec_len {
        return Err(LadError::TooLong {
            what: "max_len",
            len: cfg.max_len,
            max: model.hyper().max_dec_len,
        });
    }
    let dec = Decoder::new(model, input)?;
    let vocab = model.vocab().len();
    let mut live = vec![Beam {
        ids: vec![],
        sum: 0.0,
        cache: dec.start(),
    }];
    let mut finished: Vec<(Vec<TokenId>, f64)> = Vec::new();
    let mut reject: Option<f64> = None;

    for step in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let last = step + 1 == cfg.max_len;
        let tokens: Vec<TokenId> = live
            .iter()
            .map(|b| b.ids.last().copied().unwrap_or(BOS))
            .collect();
        let mut caches: Vec<BeamCache<T>> = live.iter_mut().map(|b| std::mem::take(&mut b.cache)).collect();
        let lp = dec.step(&mut caches, &tokens)?;
        for (b, c) in live.iter_mut().zip(caches) {
            b.cache = c;
        }

        // (beam index, token, cumulative sum)
        let mut expansions: Vec<(usize, TokenId, f64)> = Vec::new();
        for (bi, b) in live.iter().enumerate() {
            let row = lp.row(bi);
            for t in 0..vocab {
                let tok = t as TokenId;
                if !expandable(tok, step, last) {
                    continue;
                }
                let lp_t = row[t].as_f64();
                // Tokens whose probability underflows to zero are never expanded.
                if lp_t.exp() == 0.0 {
                    continue;
                }
                let s = b.sum + lp_t;
                if !s.is_finite() {
                    continue;
                }
                match tok {
                    REJECT => reject = Some(s),
                    EOS => {
                        let mut ids = b.ids.clone();
                        ids.push(EOS);
                        finished.push((ids, s));
                    }
                    _ => expansions.push((bi, tok, s)),
                }
            }
        }
        expansions.sort_by(|a, b| {
            b.2.total_cmp(&a.2).then_with(|| {
                live[a.0]
                    .ids
                    .iter()
                    .chain(std::iter::once(&a.1))
                    .cmp(live[b.0].ids.iter().chain(std::iter::once(&b.1)))
            })
        });
        expansions.truncate(cfg.beam_width);
        live = expansions
            .into_iter()
            .map(|(bi, tok, s)| {
                let mut ids = live[bi].ids.clone();
                ids.push(tok);
                Beam {
                    ids,
                    sum: s,
                    cache: live[bi].cache.clone(),
                }
            })
            .collect();
    }

    let mut scored: Vec<(Vec<TokenId>, f64)> = finished
        .into_iter()
        .map(|(ids, s)| {
            let n = ids.len();
            (ids, seq_score(s, n, cfg.length_normalize))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(cfg.n);

    let mut candidates = Vec::with_capacity(scored.len() + 1);
    for (ids, score) in scored {
        let text = model.vocab().decode_completion(&ids)?;
        candidates.push(Candidate {
            ids,
            text,
            seq_score: score,
            expert_score: 0.0,
            is_reject: false,
        });
    }
    if let Some(s) = reject {
        candidates.push(Candidate::reject(seq_score(s, 1, cfg.length_normalize)));
    }
    candidates.sort_by(|a, b| b.seq_score.total_cmp(&a.seq_score).then_with(|| a.ids.cmp(&b.ids)));
    Ok(CandidateList::new(candidates))
}
