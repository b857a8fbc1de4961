//! Offline metrics, the evaluation driver and the most-popular-completion
//! baseline.
//!
//! All metrics are computed over the *kept* completions of each sample, that
//! is, the generated list cut at the reject candidate.
//!
//! BLEU is sentence-level BLEU-4 over characters, computed on the top kept
//! completion against the golden query:
//!
//! * `p_n = clipped matches / candidate n-grams`, or `1 / (candidate n-grams + 1)`
//!   when there are no matches;
//! * brevity penalty `exp(1 - r/c)` when the candidate is shorter than the
//!   reference, else 1;
//! * `BLEU = BP * exp(mean_n log p_n)`, and 0 for an empty completion set or
//!   an empty completion.

use crate::corpus::UserSample;
use crate::error::{LadError, Result};
use crate::expert::{is_toxic, toxicity, QualityScorer};
use crate::glm::{beam_generate, DecodeConfig, ModelState};
use crate::interests::{assemble_input, copy_short_term, encode_long_term, LongTermVectors};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

/// Default generation cap `N_G`.
pub const DEFAULT_NG: usize = 4;

fn non_empty(n: usize) -> Result<()> {
    if n == 0 {
        Err(LadError::InvalidInput("metrics need at least one sample".into()))
    } else {
        Ok(())
    }
}

/// Fraction of samples whose golden query appears in the top `k` kept
/// completions.
pub fn recall_at_k(kept: &[Vec<String>], golden: &[String], k: usize) -> Result<f64> {
    non_empty(kept.len())?;
    if k == 0 {
        return Err(LadError::InvalidInput("k must be at least 1".into()));
    }
    let hits = kept
        .iter()
        .zip(golden)
        .filter(|(list, g)| list.iter().take(k).any(|c| c == *g))
        .count();
    Ok(hits as f64 / kept.len() as f64)
}

/// Mean reciprocal rank of the golden query; a miss contributes 0.
pub fn mrr(kept: &[Vec<String>], golden: &[String]) -> Result<f64> {
    non_empty(kept.len())?;
    let sum: f64 = kept
        .iter()
        .zip(golden)
        .map(|(list, g)| {
            list.iter()
                .position(|c| c == g)
                .map_or(0.0, |i| 1.0 / (i + 1) as f64)
        })
        .sum();
    Ok(sum / kept.len() as f64)
}

fn ngram_counts(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut m = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Smoothed sentence-level character BLEU-4 (see the module docs).
pub fn sentence_bleu(candidate: &str, reference: &str) -> f64 {
    let c: Vec<char> = candidate.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    if c.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let cc = ngram_counts(&c, n);
        let rc = ngram_counts(&r, n);
        let total = c.len().saturating_sub(n - 1);
        let matches: usize = cc
            .iter()
            .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matches == 0 {
            1.0 / (total + 1) as f64
        } else {
            matches as f64 / total as f64
        };
        log_p += p.ln() / 4.0;
    }
    let bp = if c.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * log_p.exp()
}

/// Mean BLEU of the top kept completion per sample (0 when none is kept).
pub fn bleu(kept: &[Vec<String>], golden: &[String]) -> Result<f64> {
    non_empty(kept.len())?;
    let sum: f64 = kept
        .iter()
        .zip(golden)
        .map(|(list, g)| list.first().map_or(0.0, |c| sentence_bleu(c, g)))
        .sum();
    Ok(sum / kept.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToxicityMetrics {
    pub amaxt: f64,
    pub prob: f64,
    pub uamaxt: f64,
    pub uprob: f64,
    pub avg_rn: f64,
    /// Mean number of kept completions per sample.
    pub mean_kept: f64,
    /// Set when nothing was kept at all, so the unbiased variants are 0.
    pub nothing_kept: bool,
}

/// Toxicity metrics over the kept completions with generation cap `n_g`.
pub fn toxicity_metrics<S: QualityScorer + ?Sized>(
    kept: &[Vec<String>],
    scorer: &S,
    n_g: usize,
) -> Result<ToxicityMetrics> {
    non_empty(kept.len())?;
    let n = kept.len() as f64;
    let mut max_sum = 0.0;
    let mut toxic_samples = 0usize;
    let mut kept_sum = 0usize;
    let mut rejected_sum = 0.0;
    for list in kept {
        let max = list.iter().map(|c| toxicity(scorer, c)).fold(0.0, f64::max);
        max_sum += max;
        toxic_samples += list.iter().any(|c| is_toxic(scorer, c)) as usize;
        kept_sum += list.len();
        rejected_sum += n_g.saturating_sub(list.len()) as f64;
    }
    let amaxt = max_sum / n;
    let prob = toxic_samples as f64 / n;
    let mean_kept = kept_sum as f64 / n;
    let nothing_kept = kept_sum == 0;
    let mult = if nothing_kept { 0.0 } else { n_g as f64 / mean_kept };
    Ok(ToxicityMetrics {
        amaxt,
        prob,
        uamaxt: mult * amaxt,
        uprob: mult * prob,
        avg_rn: rejected_sum / n,
        mean_kept,
        nothing_kept,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recall_at_4: f64,
    pub mrr: f64,
    pub bleu: f64,
    pub amaxt: f64,
    pub prob: f64,
    pub uamaxt: f64,
    pub uprob: f64,
    pub avg_rn: f64,
    pub n_samples: usize,
    pub mean_kept: f64,
    pub n_g: usize,
    pub nothing_kept: bool,
}

impl MetricsReport {
    pub fn compute<S: QualityScorer + ?Sized>(
        kept: &[Vec<String>],
        golden: &[String],
        scorer: &S,
        n_g: usize,
    ) -> Result<Self> {
        let t = toxicity_metrics(kept, scorer, n_g)?;
        Ok(Self {
            recall_at_4: recall_at_k(kept, golden, 4)?,
            mrr: mrr(kept, golden)?,
            bleu: bleu(kept, golden)?,
            amaxt: t.amaxt,
            prob: t.prob,
            uamaxt: t.uamaxt,
            uprob: t.uprob,
            avg_rn: t.avg_rn,
            n_samples: kept.len(),
            mean_kept: t.mean_kept,
            n_g,
            nothing_kept: t.nothing_kept,
        })
    }
}

/// Overall metrics plus the toxic-prefix and clean-prefix splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: MetricsReport,
    pub toxic: Option<MetricsReport>,
    pub non_toxic: Option<MetricsReport>,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        crate::corpus::write_atomic(path, &bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedCandidate {
    pub text: String,
    pub seq_score: f64,
    pub is_reject: bool,
}

/// One line of the per-sample generation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLog {
    pub user_id: String,
    pub prefix: String,
    pub target: String,
    pub toxic_prefix: bool,
    pub candidates: Vec<LoggedCandidate>,
    pub reject_index: Option<usize>,
    pub kept: Vec<String>,
}

/// Recompute the report from a generation log.
pub fn report_from_logs<S: QualityScorer + ?Sized>(logs: &[SampleLog], scorer: &S, n_g: usize) -> Result<EvalReport> {
    let part = |pred: &dyn Fn(&SampleLog) -> bool| -> Result<Option<MetricsReport>> {
        let sel: Vec<&SampleLog> = logs.iter().filter(|l| pred(l)).collect();
        if sel.is_empty() {
            return Ok(None);
        }
        let kept: Vec<Vec<String>> = sel.iter().map(|l| l.kept.clone()).collect();
        let golden: Vec<String> = sel.iter().map(|l| l.target.clone()).collect();
        MetricsReport::compute(&kept, &golden, scorer, n_g).map(Some)
    };
    Ok(EvalReport {
        overall: part(&|_| true)?.ok_or_else(|| LadError::InvalidInput("empty dataset".into()))?,
        toxic: part(&|l| l.toxic_prefix)?,
        non_toxic: part(&|l| !l.toxic_prefix)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
    pub n_g: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decode: DecodeConfig::default(),
            n_g: DEFAULT_NG,
        }
    }
}

/// Generate for every sample, cut at the reject and score the kept lists.
pub fn evaluate<S: QualityScorer + ?Sized>(
    model: &ModelState,
    samples: &[UserSample],
    scorer: &S,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<SampleLog>)> {
    non_empty(samples.len())?;
    let h = model.hyper();
    let vocab = model.vocab();
    let mut cache: HashMap<&[String], LongTermVectors<f32>> = HashMap::new();
    let mut logs = Vec::with_capacity(samples.len());
    for s in samples {
        let long = match cache.get(s.long_term.as_slice()) {
            Some(v) => v.clone(),
            None => {
                let v = encode_long_term(&s.long_term, h.long_max, model)?;
                cache.insert(&s.long_term, v.clone());
                v
            }
        };
        let short = copy_short_term(&s.short_term, h.short_max, vocab);
        let input = assemble_input(&s.prefix, short, long, vocab)?;
        let list = beam_generate(model, &input, &cfg.decode)?;
        logs.push(SampleLog {
            user_id: s.user_id.clone(),
            prefix: s.prefix.clone(),
            target: s.target.clone(),
            toxic_prefix: is_toxic(scorer, &s.prefix),
            candidates: list
                .candidates
                .iter()
                .map(|c| LoggedCandidate {
                    text: c.text.clone(),
                    seq_score: c.seq_score,
                    is_reject: c.is_reject,
                })
                .collect(),
            reject_index: list.reject_index,
            kept: list.kept().into_iter().map(|c| c.text.clone()).collect(),
        });
    }
    Ok((report_from_logs(&logs, scorer, cfg.n_g)?, logs))
}

/// Write a generation log, one JSON object per line.
pub fn write_sample_log(logs: &[SampleLog], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for l in logs {
        out.extend(serde_json::to_vec(l)?);
        out.push(b'\n');
    }
    crate::corpus::write_atomic(path, &out)
}

/// Most popular completion: golden-query frequencies from training data,
/// looked up by exact prefix.
#[derive(Debug, Clone, Default)]
pub struct Mpc {
    counts: BTreeMap<String, usize>,
}

impl Mpc {
    pub fn fit(samples: &[UserSample]) -> Self {
        let mut counts = BTreeMap::new();
        for s in samples {
            *counts.entry(s.target.clone()).or_insert(0) += 1;
        }
        Self { counts }
    }

    /// Up to `n` queries starting with `prefix`, most frequent first, ties
    /// in lexicographic order.
    pub fn complete(&self, prefix: &str, n: usize) -> Vec<String> {
        let mut hits: Vec<(&String, usize)> = self
            .counts
            .range(prefix.to_string()..)
            .take_while(|(q, _)| q.starts_with(prefix))
            .map(|(q, &c)| (q, c))
            .collect();
        hits.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        hits.into_iter().take(n).map(|(q, _)| q.clone()).collect()
    }

    pub fn evaluate<S: QualityScorer + ?Sized>(&self, samples: &[UserSample], scorer: &S, n_g: usize) -> Result<EvalReport> {
        let logs: Vec<SampleLog> = samples
            .iter()
            .map(|s| {
                let kept = self.complete(&s.prefix, n_g);
                SampleLog {
                    user_id: s.user_id.clone(),
                    prefix: s.prefix.clone(),
                    target: s.target.clone(),
                    toxic_prefix: is_toxic(scorer, &s.prefix),
                    candidates: kept
                        .iter()
                        .map(|t| LoggedCandidate {
                            text: t.clone(),
                            seq_score: 0.0,
                            is_reject: false,
                        })
                        .collect(),
                    reject_index: None,
                    kept,
                }
            })
            .collect();
        report_from_logs(&logs, scorer, n_g)
    }
}
