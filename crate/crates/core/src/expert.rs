//! Quality scoring of generated queries.
//!
//! Scores are *quality* in `[0, 1]`: higher is better, and the toxicity used
//! by the metrics is `1 - quality`.
//!
//! The rule oracle computes `1 - max(penalties)` from this table:
//!
//! | condition                                            | penalty |
//! |------------------------------------------------------|---------|
//! | empty text                                           | 1.0     |
//! | contains a token from the toxic manifest             | 0.8     |
//! | out-of-charset characters, fraction `f`              | `min(1, 2f)` |
//! | a word occurs twice                                  | 0.5     |
//! | empty word (leading, trailing or doubled space)      | 0.5     |
//! | with a prefix: fraction of prefix positions matched < 0.5 | 0.5 |

use crate::error::{LadError, Result};
use crate::glm::CandidateList;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

pub const TOXIC_PENALTY: f64 = 0.8;
pub const UNK_PENALTY_SLOPE: f64 = 2.0;
pub const DUPLICATE_WORD_PENALTY: f64 = 0.5;
pub const EMPTY_WORD_PENALTY: f64 = 0.5;
pub const IRRELEVANCE_PENALTY: f64 = 0.5;
pub const MIN_PREFIX_OVERLAP: f64 = 0.5;
pub const DEFAULT_EPSILON: f64 = 0.6;
/// Toxicity strictly above this counts as toxic.
pub const TOXICITY_CUTOFF: f64 = 0.5;

pub trait QualityScorer: Send + Sync {
    /// Context-free quality of `text`.
    fn score(&self, text: &str) -> f64;

    /// Quality of `text` as a completion of `prefix`.
    fn score_in_context(&self, _prefix: &str, text: &str) -> f64 {
        self.score(text)
    }

    /// Fill every candidate's expert score and sort descending (stable).
    fn rank_candidates(&self, mut list: CandidateList, prefix: Option<&str>) -> Result<CandidateList> {
        if list.candidates.iter().any(|c| c.is_reject) || list.reject_index.is_some() {
            return Err(LadError::InvalidInput(
                "rank_candidates expects a list without the reject sentinel".into(),
            ));
        }
        for c in &mut list.candidates {
            c.expert_score = match prefix {
                Some(p) => self.score_in_context(p, &c.text),
                None => self.score(&c.text),
            };
        }
        list.candidates
            .sort_by(|a, b| b.expert_score.total_cmp(&a.expert_score));
        Ok(list)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    RuleOracle,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub kind: ExpertKind,
    pub manifest: PathBuf,
    pub epsilon: f64,
}

impl ExpertConfig {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        Self {
            kind: ExpertKind::RuleOracle,
            manifest: manifest.into(),
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(LadError::Config(format!(
                "epsilon {} is outside [0, 1]",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Build the configured scorer. `charset` enables the out-of-charset check.
    pub fn build(&self, charset: Option<&[char]>) -> Result<RuleExpert> {
        self.validate()?;
        match self.kind {
            ExpertKind::RuleOracle => {
                let mut e = RuleExpert::from_manifest(&self.manifest)?;
                if let Some(cs) = charset {
                    e = e.with_charset(cs.iter().copied());
                }
                Ok(e)
            }
            ExpertKind::Learned => Err(LadError::Config(
                "the learned expert is not part of this build; use rule_oracle".into(),
            )),
        }
    }
}

/// Transparent rule-based scorer over a toxic-token manifest.
#[derive(Debug, Clone)]
pub struct RuleExpert {
    toxic: Vec<String>,
    charset: Option<HashSet<char>>,
}

impl RuleExpert {
    pub fn new(toxic: Vec<String>) -> Self {
        Self {
            toxic: toxic.into_iter().filter(|t| !t.is_empty()).collect(),
            charset: None,
        }
    }

    pub fn from_manifest(path: &Path) -> Result<Self> {
        Ok(Self::new(crate::corpus::load_toxic_manifest(path)?))
    }

    /// Characters outside `chars` (other than space) count as unknown.
    pub fn with_charset(mut self, chars: impl IntoIterator<Item = char>) -> Self {
        let mut set: HashSet<char> = chars.into_iter().collect();
        set.insert(' ');
        self.charset = Some(set);
        self
    }

    pub fn toxic_tokens(&self) -> &[String] {
        &self.toxic
    }

    fn penalty(&self, text: &str) -> f64 {
        if text.is_empty() {
            return 1.0;
        }
        let mut p: f64 = 0.0;
        if self.toxic.iter().any(|t| text.contains(t.as_str())) {
            p = p.max(TOXIC_PENALTY);
        }
        if let Some(cs) = &self.charset {
            let n = text.chars().count();
            let unknown = text.chars().filter(|c| !cs.contains(c)).count();
            p = p.max((UNK_PENALTY_SLOPE * unknown as f64 / n as f64).min(1.0));
        }
        let words: Vec<&str> = text.split(' ').collect();
        if words.iter().any(|w| w.is_empty()) {
            p = p.max(EMPTY_WORD_PENALTY);
        }
        let mut seen = HashSet::new();
        if words.iter().filter(|w| !w.is_empty()).any(|w| !seen.insert(*w)) {
            p = p.max(DUPLICATE_WORD_PENALTY);
        }
        p
    }
}

fn positional_matches(prefix: &str, text: &str) -> usize {
    prefix.chars().zip(text.chars()).filter(|(x, y)| x == y).count()
}

impl QualityScorer for RuleExpert {
    fn score(&self, text: &str) -> f64 {
        1.0 - self.penalty(text)
    }

    fn score_in_context(&self, prefix: &str, text: &str) -> f64 {
        let mut p = self.penalty(text);
        let n = prefix.chars().count();
        if n > 0 && (positional_matches(prefix, text) as f64 / n as f64) < MIN_PREFIX_OVERLAP {
            p = p.max(IRRELEVANCE_PENALTY);
        }
        1.0 - p
    }
}

/// Toxicity as reported by the metrics.
pub fn toxicity<S: QualityScorer + ?Sized>(scorer: &S, text: &str) -> f64 {
    1.0 - scorer.score(text)
}

pub fn is_toxic<S: QualityScorer + ?Sized>(scorer: &S, text: &str) -> bool {
    toxicity(scorer, text) > TOXICITY_CUTOFF
}
