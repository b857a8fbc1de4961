//! Reject preference optimization: reject injection into expert-ranked
//! candidate lists, preference pairs, the pairwise loss and the two-phase
//! training step.

use crate::autograd::{Graph, NodeId, ParamGrads};
use crate::corpus::UserSample;
use crate::error::{LadError, Result};
use crate::expert::{QualityScorer, DEFAULT_EPSILON};
use crate::glm::{beam_generate, Candidate, CandidateList, DecSeq, DecodeConfig, EncItem, ForwardBatch, LongRef, Model};
use crate::interests::{self, encode_long_term, long_term_tokens, AssembledInput, LongTermVectors};
use crate::tensor::{Matrix, Real};
use crate::vocab::{TokenId, EOS, REJECT};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    PlusVsReject,
    RejectVsMinus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub better: Vec<TokenId>,
    pub worse: Vec<TokenId>,
    pub kind: PairKind,
}

/// Insert the reject sentinel at the first candidate whose expert score is
/// below `epsilon` (at the end if there is none).
pub fn inject_reject(ranked: CandidateList, epsilon: f64) -> Result<CandidateList> {
    if ranked.reject_index.is_some() || ranked.candidates.iter().any(|c| c.is_reject) {
        return Err(LadError::InvalidInput("list already contains a reject".into()));
    }
    let mut candidates = ranked.candidates;
    let at = candidates
        .iter()
        .position(|c| c.expert_score < epsilon)
        .unwrap_or(candidates.len());
    candidates.insert(at, Candidate::reject(0.0));
    Ok(CandidateList::new(candidates))
}

/// One pair per real candidate: those above the reject must beat it, the
/// reject must beat those below.
pub fn build_pairs(injected: &CandidateList) -> Result<Vec<PreferencePair>> {
    let r = injected
        .reject_index
        .ok_or_else(|| LadError::InvalidInput("list has no reject".into()))?;
    let reject = vec![REJECT];
    Ok(injected
        .candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_reject)
        .map(|(i, c)| {
            if i < r {
                PreferencePair {
                    better: c.ids.clone(),
                    worse: reject.clone(),
                    kind: PairKind::PlusVsReject,
                }
            } else {
                PreferencePair {
                    better: reject.clone(),
                    worse: c.ids.clone(),
                    kind: PairKind::RejectVsMinus,
                }
            }
        })
        .collect())
}

/// `-sum log sigmoid(delta)` for precomputed margins.
pub fn pairwise_loss(deltas: &[f64]) -> f64 {
    deltas.iter().map(|&d| -crate::autograd::log_sigmoid(d)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Glm,
    Rpo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Optimizer steps.
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    /// Final learning rate as a fraction of the peak (cosine decay).
    pub min_lr_ratio: f64,
    pub grad_accum: usize,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub n_candidates: usize,
    pub beam_width: usize,
    pub max_len: usize,
    pub epsilon: f64,
    pub glm_weight: f64,
    pub rpo_weight: f64,
    /// Score sequences by mean token log-probability (else by the sum).
    pub length_normalize: bool,
    /// In the reject stage, leave out the generation loss on golden targets
    /// that the expert itself scores below `epsilon`.
    pub skip_toxic_golden: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Glm,
            steps: 2000,
            batch_size: 64,
            warmup_steps: 500,
            peak_lr: 3e-4,
            min_lr_ratio: 0.1,
            grad_accum: 1,
            clip_norm: 1.0,
            n_candidates: 4,
            beam_width: 4,
            max_len: 24,
            epsilon: DEFAULT_EPSILON,
            glm_weight: 1.0,
            rpo_weight: 1.0,
            length_normalize: true,
            skip_toxic_golden: true,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.grad_accum == 0 || self.n_candidates == 0 {
            return Err(LadError::Config(
                "steps, batch_size, grad_accum and n_candidates must be positive".into(),
            ));
        }
        if self.beam_width < self.n_candidates {
            return Err(LadError::Config("beam_width must be at least n_candidates".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(LadError::Config("peak_lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(LadError::Config("epsilon and min_lr_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            n: self.n_candidates,
            beam_width: self.beam_width,
            max_len: self.max_len,
            length_normalize: self.length_normalize,
        }
    }
}

/// A training example in token form. Long-term behaviors are kept as token
/// lists so that the long-term encoder runs inside the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub prefix: Vec<TokenId>,
    pub short: Vec<TokenId>,
    pub long: Vec<Vec<TokenId>>,
    /// Golden target, `EOS`-terminated.
    pub target: Vec<TokenId>,
    /// Whether the generation loss applies to `target`.
    pub use_target: bool,
    pub pairs: Vec<PreferencePair>,
}

impl Example {
    pub fn from_sample<T: Real>(sample: &UserSample, model: &Model<T>) -> Result<Self> {
        let h = model.hyper();
        let vocab = model.vocab();
        let kept = &sample.long_term[sample.long_term.len().saturating_sub(h.long_max)..];
        let long = kept
            .iter()
            .map(|b| long_term_tokens(vocab, b, h.max_lte_len - 1).0)
            .collect();
        let mut target = vocab.encode(&sample.target);
        target.push(EOS);
        Ok(Self {
            prefix: interests::prefix_tokens(&sample.prefix, vocab)?,
            short: interests::copy_short_term(&sample.short_term, h.short_max, vocab),
            long,
            target,
            use_target: true,
            pairs: vec![],
        })
    }
}

/// Scalar losses of one graph evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub glm: f64,
    pub rpo: f64,
    pub total: f64,
}

struct SeqTable {
    index: HashMap<(usize, Vec<TokenId>), usize>,
    seqs: Vec<DecSeq>,
}

impl SeqTable {
    fn id(&mut self, item: usize, tokens: &[TokenId]) -> usize {
        let key = (item, tokens.to_vec());
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        self.seqs.push(DecSeq {
            item,
            tokens: tokens.to_vec(),
        });
        self.index.insert(key, self.seqs.len() - 1);
        self.seqs.len() - 1
    }
}

fn loss_graph<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    batch: ForwardBatch<T>,
    targets: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    denom: usize,
    cfg: &TrainConfig,
) -> Result<(NodeId, LossParts)> {
    let out = crate::glm::forward(model, g, &batch)?;
    let scale = T::from_f64_lossy(1.0 / denom.max(1) as f64);
    let mut parts = LossParts::default();
    let mut terms = Vec::new();
    if !targets.is_empty() {
        let t = g.gather_rows(out.seq_sum, targets);
        let s = g.sum_all(t);
        let l = g.scale(s, -scale * T::from_f64_lossy(cfg.glm_weight));
        parts.glm = -g.scalar(s).as_f64() / denom.max(1) as f64;
        terms.push(l);
    }
    if !pairs.is_empty() {
        let scores = if cfg.length_normalize { out.seq_mean } else { out.seq_sum };
        let b = g.gather_rows(scores, pairs.iter().map(|p| p.0).collect());
        let w = g.gather_rows(scores, pairs.iter().map(|p| p.1).collect());
        let d = g.sub(b, w);
        let ls = g.log_sigmoid(d);
        let s = g.sum_all(ls);
        let l = g.scale(s, -scale * T::from_f64_lossy(cfg.rpo_weight));
        parts.rpo = -g.scalar(s).as_f64() / denom.max(1) as f64;
        terms.push(l);
    }
    let total = match terms.len() {
        0 => return Err(LadError::InvalidInput("batch has no loss terms".into())),
        1 => terms[0],
        _ => g.add(terms[0], terms[1]),
    };
    parts.total = g.scalar(total).as_f64();
    Ok((total, parts))
}

/// Build the graph for `glm_weight * L_GLM + rpo_weight * L_RPO` over a batch
/// of examples, each term averaged over the batch.
pub fn combined_loss<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    examples: &[Example],
    cfg: &TrainConfig,
) -> Result<(NodeId, LossParts)> {
    let mut behaviors: Vec<Vec<TokenId>> = Vec::new();
    let mut behavior_ix: HashMap<Vec<TokenId>, usize> = HashMap::new();
    let mut items = Vec::with_capacity(examples.len());
    let mut table = SeqTable {
        index: HashMap::new(),
        seqs: vec![],
    };
    let mut targets = Vec::new();
    let mut pairs = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let long = ex
            .long
            .iter()
            .map(|b| {
                *behavior_ix.entry(b.clone()).or_insert_with(|| {
                    behaviors.push(b.clone());
                    behaviors.len() - 1
                })
            })
            .collect();
        items.push(EncItem {
            prefix: ex.prefix.clone(),
            short: ex.short.clone(),
            long: LongRef::Behaviors(long),
        });
        if ex.use_target {
            targets.push(table.id(i, &ex.target));
        }
        for p in &ex.pairs {
            pairs.push((table.id(i, &p.better), table.id(i, &p.worse)));
        }
    }
    let batch = ForwardBatch {
        behaviors,
        items,
        seqs: table.seqs,
    };
    loss_graph(model, g, batch, targets, pairs, examples.len(), cfg)
}

/// Pairwise reject-preference loss for one assembled input.
pub fn rpo_loss<T: Real>(
    pairs: &[PreferencePair],
    input: &AssembledInput<T>,
    model: &Model<T>,
    length_normalize: bool,
) -> Result<T> {
    if pairs.is_empty() {
        return Ok(T::zero());
    }
    let mut table = SeqTable {
        index: HashMap::new(),
        seqs: vec![],
    };
    let ix: Vec<(usize, usize)> = pairs
        .iter()
        .map(|p| (table.id(0, &p.better), table.id(0, &p.worse)))
        .collect();
    let mut batch = ForwardBatch::single(input, vec![]);
    batch.seqs = table.seqs;
    let cfg = TrainConfig {
        length_normalize,
        ..TrainConfig::default()
    };
    let mut g = Graph::new(model.params.len());
    let (_, parts) = loss_graph(model, &mut g, batch, vec![], ix, 1, &cfg)?;
    Ok(T::from_f64_lossy(parts.rpo))
}

/// Generation phase of the reject stage for one input: generate, rank with
/// the expert, inject the reject and build pairs. No gradients.
pub fn generate_pairs<T: Real, S: QualityScorer + ?Sized>(
    model: &Model<T>,
    input: &AssembledInput<T>,
    prefix: &str,
    expert: &S,
    cfg: &TrainConfig,
) -> Result<(CandidateList, Vec<PreferencePair>)> {
    let list = beam_generate(model, input, &cfg.decode_config())?.without_reject();
    let ranked = expert.rank_candidates(list, Some(prefix))?;
    let injected = inject_reject(ranked, cfg.epsilon)?;
    let pairs = build_pairs(&injected)?;
    Ok((injected, pairs))
}

/// Diagnostics of one training step.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub loss_glm: f64,
    pub loss_rpo: f64,
    /// Mean position of the injected reject (reject stage only).
    pub avg_reject_index: f64,
    /// Mean number of generated candidates placed below the reject.
    pub avg_rejected: f64,
}

/// One micro-batch: generation phase (reject stage only), then a single
/// backward pass through the combined loss. Returns gradients and stats.
pub fn train_step<S: QualityScorer + ?Sized>(
    batch: &[UserSample],
    model: &Model<f32>,
    expert: Option<&S>,
    cfg: &TrainConfig,
) -> Result<(ParamGrads<f32>, StepStats)> {
    if batch.is_empty() {
        return Err(LadError::InvalidInput("empty batch".into()));
    }
    let mut stats = StepStats::default();
    let mut examples = Vec::with_capacity(batch.len());
    for s in batch {
        examples.push(Example::from_sample(s, model)?);
    }
    if cfg.stage == Stage::Rpo {
        let expert = expert.ok_or_else(|| LadError::Config("the rpo stage requires an expert".into()))?;
        let mut long_cache: HashMap<&[String], LongTermVectors<f32>> = HashMap::new();
        for (s, ex) in batch.iter().zip(examples.iter_mut()) {
            let long = match long_cache.get(s.long_term.as_slice()) {
                Some(v) => v.clone(),
                None => {
                    let v = encode_long_term(&s.long_term, model.hyper().long_max, model)?;
                    long_cache.insert(&s.long_term, v.clone());
                    v
                }
            };
            let input = interests::assemble_input(&s.prefix, ex.short.clone(), long, model.vocab())?;
            let (injected, pairs) = generate_pairs(model, &input, &s.prefix, expert, cfg)?;
            stats.avg_reject_index += injected.reject_index.unwrap_or(0) as f64;
            stats.avg_rejected += injected.rejected_count() as f64;
            ex.pairs = pairs;
            if cfg.skip_toxic_golden && expert.score_in_context(&s.prefix, &s.target) < cfg.epsilon {
                ex.use_target = false;
            }
        }
        stats.avg_reject_index /= batch.len() as f64;
        stats.avg_rejected /= batch.len() as f64;
    }
    let mut g = Graph::new(model.params.len());
    let (root, parts) = combined_loss(model, &mut g, &examples, cfg)?;
    stats.loss_glm = parts.glm;
    stats.loss_rpo = parts.rpo;
    Ok((g.backward(root), stats))
}

/// Value of the combined loss at the model's current parameters.
pub fn evaluate_combined<T: Real>(model: &Model<T>, examples: &[Example], cfg: &TrainConfig) -> Result<LossParts> {
    let mut g = Graph::new(model.params.len());
    Ok(combined_loss(model, &mut g, examples, cfg)?.1)
}

/// Gradient of the combined loss as dense matrices (zeros for unused params).
pub fn combined_gradient<T: Real>(model: &Model<T>, examples: &[Example], cfg: &TrainConfig) -> Result<Vec<Matrix<T>>> {
    let mut g = Graph::new(model.params.len());
    let (root, _) = combined_loss(model, &mut g, examples, cfg)?;
    let grads = g.backward(root);
    Ok(model
        .params
        .iter()
        .zip(grads.grads)
        .map(|(p, gr)| gr.unwrap_or_else(|| Matrix::zeros(p.value.rows, p.value.cols)))
        .collect())
}
