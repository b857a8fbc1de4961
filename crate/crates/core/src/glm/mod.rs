//! The generative model: a long-term encoder (LTE), an encoder over the
//! assembled `[prefix, short-term, long-term]` input, and an autoregressive
//! decoder over characters.

mod checkpoint;
mod decode;
mod forward;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::{beam_generate, DecodeConfig, Decoder};
pub use forward::{forward, DecSeq, EncItem, ForwardBatch, ForwardOut, LongRef};
pub(crate) use forward::lte_forward;

use crate::error::{LadError, Result};
use crate::interests::AssembledInput;
use crate::rng::SeededRng;
use crate::tensor::{self, Matrix, Real};
use crate::vocab::{TokenId, Vocabulary};
use crate::autograd::Graph;
use serde::{Deserialize, Serialize};

/// Model shape. Immutable once a model is built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub lte_layers: usize,
    /// Encoder positions (prefix + short-term tokens + long-term vectors).
    pub max_enc_len: usize,
    /// Decoder positions, including the end token.
    pub max_dec_len: usize,
    /// Long-term encoder positions, including the summary slot.
    pub max_lte_len: usize,
    /// Recent queries copied into the input (S).
    pub short_max: usize,
    /// Long-term vectors per user (L).
    pub long_max: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            ffn_dim: 256,
            enc_layers: 2,
            dec_layers: 2,
            lte_layers: 2,
            max_enc_len: 64,
            max_dec_len: 24,
            max_lte_len: 24,
            short_max: 3,
            long_max: 7,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(LadError::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.ffn_dim == 0 || self.max_enc_len == 0 || self.max_dec_len == 0 || self.max_lte_len < 2 {
            return Err(LadError::Config("layer widths and max lengths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LnIx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayerIx {
    pub ln1: LnIx,
    pub attn: AttnIx,
    pub ln2: LnIx,
    pub ffn: FfnIx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayerIx {
    pub ln1: LnIx,
    pub self_attn: AttnIx,
    pub ln2: LnIx,
    pub cross: AttnIx,
    pub ln3: LnIx,
    pub ffn: FfnIx,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub seg_emb: usize,
    pub lte: Vec<EncLayerIx>,
    pub lte_ln: LnIx,
    pub enc: Vec<EncLayerIx>,
    pub enc_ln: LnIx,
    pub dec: Vec<DecLayerIx>,
    pub dec_ln: LnIx,
    pub out_w: usize,
    pub out_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct Registry {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Registry {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }

    fn ln(&mut self, p: &str, d: usize) -> LnIx {
        LnIx {
            g: self.add(format!("{p}.g"), 1, d, Init::Ones),
            b: self.add(format!("{p}.b"), 1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, p: &str, d: usize, out_std: f64) -> AttnIx {
        let std = 1.0 / (d as f64).sqrt();
        AttnIx {
            wq: self.add(format!("{p}.wq"), d, d, Init::Normal(std)),
            bq: self.add(format!("{p}.bq"), 1, d, Init::Zeros),
            wk: self.add(format!("{p}.wk"), d, d, Init::Normal(std)),
            bk: self.add(format!("{p}.bk"), 1, d, Init::Zeros),
            wv: self.add(format!("{p}.wv"), d, d, Init::Normal(std)),
            bv: self.add(format!("{p}.bv"), 1, d, Init::Zeros),
            wo: self.add(format!("{p}.wo"), d, d, Init::Normal(out_std)),
            bo: self.add(format!("{p}.bo"), 1, d, Init::Zeros),
        }
    }

    fn ffn(&mut self, p: &str, d: usize, f: usize, out_std: f64) -> FfnIx {
        FfnIx {
            w1: self.add(format!("{p}.w1"), d, f, Init::Normal(1.0 / (d as f64).sqrt())),
            b1: self.add(format!("{p}.b1"), 1, f, Init::Zeros),
            w2: self.add(format!("{p}.w2"), f, d, Init::Normal(out_std)),
            b2: self.add(format!("{p}.b2"), 1, d, Init::Zeros),
        }
    }

    fn enc_layer(&mut self, p: &str, h: &Hyper, out_std: f64) -> EncLayerIx {
        EncLayerIx {
            ln1: self.ln(&format!("{p}.ln1"), h.dim),
            attn: self.attn(&format!("{p}.attn"), h.dim, out_std),
            ln2: self.ln(&format!("{p}.ln2"), h.dim),
            ffn: self.ffn(&format!("{p}.ffn"), h.dim, h.ffn_dim, out_std / 2.0),
        }
    }
}

fn build_layout(h: &Hyper, vocab_size: usize) -> (Layout, Registry) {
    let mut r = Registry {
        names: vec![],
        shapes: vec![],
        inits: vec![],
    };
    let d = h.dim;
    let depth = (h.enc_layers + h.dec_layers + h.lte_layers).max(1) as f64;
    let out_std = 1.0 / (d as f64).sqrt() / depth.sqrt();
    let tok_emb = r.add("tok_emb".into(), vocab_size, d, Init::Normal(0.5));
    let seg_emb = r.add("seg_emb".into(), 3, d, Init::Normal(0.5));
    let lte = (0..h.lte_layers)
        .map(|i| r.enc_layer(&format!("lte.{i}"), h, out_std))
        .collect();
    let lte_ln = r.ln("lte.ln", d);
    let enc = (0..h.enc_layers)
        .map(|i| r.enc_layer(&format!("enc.{i}"), h, out_std))
        .collect();
    let enc_ln = r.ln("enc.ln", d);
    let dec = (0..h.dec_layers)
        .map(|i| {
            let p = format!("dec.{i}");
            DecLayerIx {
                ln1: r.ln(&format!("{p}.ln1"), d),
                self_attn: r.attn(&format!("{p}.self"), d, out_std),
                ln2: r.ln(&format!("{p}.ln2"), d),
                cross: r.attn(&format!("{p}.cross"), d, out_std),
                ln3: r.ln(&format!("{p}.ln3"), d),
                ffn: r.ffn(&format!("{p}.ffn"), d, h.ffn_dim, out_std / 2.0),
            }
        })
        .collect();
    let dec_ln = r.ln("dec.ln", d);
    // Near-zero output projection: a fresh model predicts close to uniform.
    let out_w = r.add("out.w".into(), d, vocab_size, Init::Normal(0.002));
    let out_b = r.add("out.b".into(), 1, vocab_size, Init::Zeros);
    (
        Layout {
            tok_emb,
            seg_emb,
            lte,
            lte_ln,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out_w,
            out_b,
        },
        r,
    )
}

/// Named learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Matrix<T>,
}

/// All learnable state plus the vocabulary and hyperparameters.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    hyper: Hyper,
    vocab: Vocabulary,
    pub params: Vec<Param<T>>,
    pub(crate) layout: Layout,
}

/// Single-precision model, the one that is trained, served and checkpointed.
pub type ModelState = Model<f32>;

impl<T: Real> Model<T> {
    pub fn new(hyper: Hyper, vocab: Vocabulary, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let (layout, reg) = build_layout(&hyper, vocab.len());
        let mut rng = SeededRng::new(seed);
        let params = reg
            .names
            .into_iter()
            .zip(reg.shapes)
            .zip(reg.inits)
            .map(|((name, (rows, cols)), init)| {
                let data = (0..rows * cols)
                    .map(|_| match init {
                        Init::Normal(std) => T::from_f64_lossy(rng.normal() * std),
                        Init::Zeros => T::zero(),
                        Init::Ones => T::one(),
                    })
                    .collect();
                Param {
                    name,
                    value: Matrix::from_vec(rows, cols, data),
                }
            })
            .collect();
        Ok(Self {
            hyper,
            vocab,
            params,
            layout,
        })
    }

    /// Rebuild from explicit tensors; names and shapes must match the layout.
    pub fn from_params(hyper: Hyper, vocab: Vocabulary, params: Vec<Param<T>>) -> Result<Self> {
        hyper.validate()?;
        let (layout, reg) = build_layout(&hyper, vocab.len());
        if reg.names.len() != params.len() {
            return Err(LadError::Checkpoint(format!(
                "expected {} tensors, found {}",
                reg.names.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in reg.names.iter().zip(&reg.shapes).zip(&params) {
            if *name != p.name || *shape != p.value.shape() {
                return Err(LadError::Checkpoint(format!(
                    "tensor {} has shape {:?}, layout expects {} with {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    shape
                )));
            }
        }
        Ok(Self {
            hyper,
            vocab,
            params,
            layout,
        })
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    pub(crate) fn p(&self, i: usize) -> &Matrix<T> {
        &self.params[i].value
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Matrix<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            hyper: self.hyper.clone(),
            vocab: self.vocab.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Encoder memory for one assembled input (inference, no gradients).
    pub fn encode(&self, input: &AssembledInput<T>) -> Result<Matrix<T>> {
        let batch = ForwardBatch::single(input, vec![]);
        let mut g = Graph::new(self.params.len());
        let memory = forward::encode_only(self, &mut g, &batch)?;
        Ok(g.value(memory).clone())
    }

    /// Teacher-forced per-position log-probability table over the vocabulary.
    ///
    /// `target_ids` are the tokens to be predicted; the decoder sees them
    /// shifted right behind `BOS`.
    pub fn glm_forward(&self, input: &AssembledInput<T>, target_ids: &[TokenId]) -> Result<Matrix<T>> {
        let out = self.run_single(input, target_ids)?;
        Ok(tensor::log_softmax(&out.1))
    }

    /// `-sum log P(target | input)`.
    pub fn glm_loss(&self, input: &AssembledInput<T>, target_ids: &[TokenId]) -> Result<T> {
        let (sum, _) = self.run_single(input, target_ids)?.0;
        Ok(-sum)
    }

    /// Mean per-token log-probability of `candidate` (the ranking score).
    pub fn sequence_logprob(&self, input: &AssembledInput<T>, candidate: &[TokenId]) -> Result<T> {
        let (_, mean) = self.run_single(input, candidate)?.0;
        Ok(mean)
    }

    fn run_single(&self, input: &AssembledInput<T>, targets: &[TokenId]) -> Result<((T, T), Matrix<T>)> {
        if targets.is_empty() {
            return Err(LadError::InvalidInput("target sequence is empty".into()));
        }
        let batch = ForwardBatch::single(input, vec![targets.to_vec()]);
        let mut g = Graph::new(self.params.len());
        let out = forward::forward(self, &mut g, &batch)?;
        let sum = g.value(out.seq_sum).data[0];
        let mean = g.value(out.seq_mean).data[0];
        Ok(((sum, mean), g.value(out.logits).clone()))
    }
}

/// One generated completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// `EOS`-terminated token ids, or exactly `[REJECT]`.
    pub ids: Vec<TokenId>,
    pub text: String,
    pub seq_score: f64,
    pub expert_score: f64,
    pub is_reject: bool,
}

impl Candidate {
    pub fn reject(seq_score: f64) -> Self {
        Self {
            ids: vec![crate::vocab::REJECT],
            text: "[Reject]".into(),
            seq_score,
            expert_score: 0.0,
            is_reject: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub candidates: Vec<Candidate>,
    pub reject_index: Option<usize>,
}

impl CandidateList {
    /// Wraps candidates, locating the reject sentinel if present.
    pub fn new(candidates: Vec<Candidate>) -> Self {
        let reject_index = candidates.iter().position(|c| c.is_reject);
        Self {
            candidates,
            reject_index,
        }
    }

    /// Candidates ranked above the reject sentinel (all of them if absent).
    pub fn kept(&self) -> Vec<&Candidate> {
        let end = self.reject_index.unwrap_or(self.candidates.len());
        self.candidates[..end].iter().filter(|c| !c.is_reject).collect()
    }

    /// Real candidates ranked below the reject sentinel.
    pub fn rejected_count(&self) -> usize {
        match self.reject_index {
            Some(i) => self.candidates[i + 1..].iter().filter(|c| !c.is_reject).count(),
            None => 0,
        }
    }

    pub fn real(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(|c| !c.is_reject)
    }

    /// Drop the reject sentinel, keeping the order of the others.
    pub fn without_reject(mut self) -> Self {
        self.candidates.retain(|c| !c.is_reject);
        self.reject_index = None;
        self
    }
}
