//! Flat run configuration shared by every command.
//!
//! A config file is a single JSON object whose keys are the field names of
//! [`RunConfig`]. Missing keys take their defaults and unknown keys are an
//! error. Individual values can be overridden afterwards with
//! [`RunConfig::set`], which is how command-line flags are applied.

use crate::corpus::GenConfig;
use crate::error::{LadError, Result};
use crate::expert::{ExpertConfig, ExpertKind, DEFAULT_EPSILON};
use crate::glm::{DecodeConfig, Hyper};
use crate::rpo::{Stage, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Users in the synthetic corpus. Default 5000.
    pub num_users: usize,
    /// Samples generated per user. Default 10.
    pub samples_per_user: usize,
    /// Letters in the synthetic alphabet. Default 20.
    pub alphabet_size: usize,
    /// Topic words. Default 16.
    pub topic_count: usize,
    /// Attribute words. Default 8.
    pub attribute_count: usize,
    /// Toxic words in the manifest. Default 4.
    pub toxic_token_count: usize,
    /// Share of prefixes carrying a toxic word. Default 0.15.
    pub toxic_prefix_fraction: f64,
    /// Share of prefixes with a substituted character. Default 0.1.
    pub typo_fraction: f64,
    /// Corpus seed. Default 42.
    pub seed: u64,
    /// Generic head words. Default 4.
    pub head_count: usize,
    /// Long-term behaviors kept per user. Default 9.
    pub long_term_len: usize,
    /// Recent queries stored per sample. Default 3.
    pub short_term_len: usize,
    /// Share of each user's samples held out for test. Default 0.1.
    pub test_fraction: f64,

    /// Model width. Default 64.
    pub dim: usize,
    /// Attention heads. Default 4.
    pub heads: usize,
    /// Feed-forward width. Default 256.
    pub ffn_dim: usize,
    /// Encoder layers. Default 2.
    pub enc_layers: usize,
    /// Decoder layers. Default 2.
    pub dec_layers: usize,
    /// Long-term encoder layers. Default 2.
    pub lte_layers: usize,
    /// Encoder positions. Default 64.
    pub max_enc_len: usize,
    /// Decoder positions. Default 24.
    pub max_dec_len: usize,
    /// Long-term encoder positions. Default 24.
    pub max_lte_len: usize,
    /// Recent queries copied into the input (S). Default 3.
    pub short_max: usize,
    /// Long-term vectors per user (L). Default 7.
    pub long_max: usize,
    /// Parameter initialisation seed. Default 1.
    pub init_seed: u64,

    /// Training stage. Default `glm`.
    pub stage: Stage,
    /// Optimizer steps. Default 2000.
    pub steps: usize,
    /// Samples per micro-batch. Default 64.
    pub batch_size: usize,
    /// Linear warmup steps. Default 500.
    pub warmup_steps: usize,
    /// Peak learning rate. Default 3e-4.
    pub peak_lr: f64,
    /// Final learning rate as a fraction of the peak. Default 0.1.
    pub min_lr_ratio: f64,
    /// Micro-batches per optimizer step. Default 1.
    pub grad_accum: usize,
    /// Global gradient norm cap, 0 disables. Default 1.0.
    pub clip_norm: f64,
    /// Completions per request (N). Default 4.
    pub n_candidates: usize,
    /// Beam width. Default 4.
    pub beam_width: usize,
    /// Maximum completion length in tokens. Default 24.
    pub max_len: usize,
    /// Quality threshold for the reject token. Default 0.6.
    pub epsilon: f64,
    /// Weight of the generation loss. Default 1.0.
    pub glm_weight: f64,
    /// Weight of the preference loss. Default 1.0.
    pub rpo_weight: f64,
    /// Rank by mean token log-probability. Default true.
    pub length_normalize: bool,
    /// Skip the generation loss on golden targets the expert rejects. Default true.
    pub skip_toxic_golden: bool,
    /// Batch order seed. Default 7.
    pub train_seed: u64,

    /// Scorer family. Default `rule_oracle`.
    pub expert_kind: ExpertKind,
    /// Toxic-token manifest for the scorer. Default unset.
    pub expert: Option<PathBuf>,

    /// Dataset directory. Default `data`.
    pub data_dir: PathBuf,
    /// Checkpoint to read. Default unset.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint to write after training. Default `model.ckpt`.
    pub out: PathBuf,
    /// Per-step JSON-lines training log. Default unset.
    pub metrics_log: Option<PathBuf>,
    /// Evaluation report path. Default `report.json`.
    pub report: PathBuf,
    /// Per-sample evaluation log. Default unset.
    pub sample_log: Option<PathBuf>,
    /// BLEU n-gram order. Default 4.
    pub n_g: usize,
    /// Listen address for the service. Default `127.0.0.1:8080`.
    pub addr: String,
    /// Behavior log used for memory refreshes. Default unset.
    pub behavior_log: Option<PathBuf>,
    /// Journal for recent queries. Default unset.
    pub gsu_journal: Option<PathBuf>,
    /// Recent queries kept per user by the service. Default 3.
    pub gsu_capacity: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GenConfig::default();
        let h = Hyper::default();
        let t = TrainConfig::default();
        Self {
            num_users: g.num_users,
            samples_per_user: g.samples_per_user,
            alphabet_size: g.alphabet_size,
            topic_count: g.topic_count,
            attribute_count: g.attribute_count,
            toxic_token_count: g.toxic_token_count,
            toxic_prefix_fraction: g.toxic_prefix_fraction,
            typo_fraction: g.typo_fraction,
            seed: g.seed,
            head_count: g.head_count,
            long_term_len: g.long_term_len,
            short_term_len: g.short_term_len,
            test_fraction: g.test_fraction,
            dim: h.dim,
            heads: h.heads,
            ffn_dim: h.ffn_dim,
            enc_layers: h.enc_layers,
            dec_layers: h.dec_layers,
            lte_layers: h.lte_layers,
            max_enc_len: h.max_enc_len,
            max_dec_len: h.max_dec_len,
            max_lte_len: h.max_lte_len,
            short_max: h.short_max,
            long_max: h.long_max,
            init_seed: 1,
            stage: t.stage,
            steps: t.steps,
            batch_size: t.batch_size,
            warmup_steps: t.warmup_steps,
            peak_lr: t.peak_lr,
            min_lr_ratio: t.min_lr_ratio,
            grad_accum: t.grad_accum,
            clip_norm: t.clip_norm,
            n_candidates: t.n_candidates,
            beam_width: t.beam_width,
            max_len: t.max_len,
            epsilon: DEFAULT_EPSILON,
            glm_weight: t.glm_weight,
            rpo_weight: t.rpo_weight,
            length_normalize: t.length_normalize,
            skip_toxic_golden: t.skip_toxic_golden,
            train_seed: t.seed,
            expert_kind: ExpertKind::RuleOracle,
            expert: None,
            data_dir: PathBuf::from("data"),
            checkpoint: None,
            out: PathBuf::from("model.ckpt"),
            metrics_log: None,
            report: PathBuf::from("report.json"),
            sample_log: None,
            n_g: crate::eval::DEFAULT_NG,
            addr: "127.0.0.1:8080".into(),
            behavior_log: None,
            gsu_journal: None,
            gsu_capacity: h.short_max,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LadError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LadError::io(path, e))?;
        Self::from_json(&text).map_err(|e| LadError::Config(format!("{}: {e}", path.display())))
    }

    /// Override one field. `raw` is read as JSON when it parses, otherwise as
    /// a plain string, so `--set steps=10` and `--set data_dir=d` both work.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut obj = match serde_json::to_value(&*self)? {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("RunConfig serializes to an object"),
        };
        if !obj.contains_key(key) {
            return Err(LadError::Config(format!("unknown config key `{key}`")));
        }
        let mut attempt = |value: serde_json::Value| {
            obj.insert(key.into(), value);
            serde_json::from_value::<RunConfig>(serde_json::Value::Object(obj.clone()))
        };
        let parsed = match serde_json::from_str(raw) {
            Ok(v) => attempt(v).or_else(|_| attempt(serde_json::Value::String(raw.into()))),
            Err(_) => attempt(serde_json::Value::String(raw.into())),
        };
        *self = parsed.map_err(|e| LadError::Config(format!("bad value for `{key}`: {e}")))?;
        Ok(())
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            num_users: self.num_users,
            samples_per_user: self.samples_per_user,
            alphabet_size: self.alphabet_size,
            topic_count: self.topic_count,
            attribute_count: self.attribute_count,
            toxic_token_count: self.toxic_token_count,
            toxic_prefix_fraction: self.toxic_prefix_fraction,
            typo_fraction: self.typo_fraction,
            seed: self.seed,
            head_count: self.head_count,
            long_term_len: self.long_term_len,
            short_term_len: self.short_term_len,
            test_fraction: self.test_fraction,
        }
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            dim: self.dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            lte_layers: self.lte_layers,
            max_enc_len: self.max_enc_len,
            max_dec_len: self.max_dec_len,
            max_lte_len: self.max_lte_len,
            short_max: self.short_max,
            long_max: self.long_max,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            stage: self.stage,
            steps: self.steps,
            batch_size: self.batch_size,
            warmup_steps: self.warmup_steps,
            peak_lr: self.peak_lr,
            min_lr_ratio: self.min_lr_ratio,
            grad_accum: self.grad_accum,
            clip_norm: self.clip_norm,
            n_candidates: self.n_candidates,
            beam_width: self.beam_width,
            max_len: self.max_len,
            epsilon: self.epsilon,
            glm_weight: self.glm_weight,
            rpo_weight: self.rpo_weight,
            length_normalize: self.length_normalize,
            skip_toxic_golden: self.skip_toxic_golden,
            seed: self.train_seed,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            n: self.n_candidates,
            beam_width: self.beam_width,
            max_len: self.max_len,
            length_normalize: self.length_normalize,
        }
    }

    /// Scorer settings, or `None` when no manifest is configured.
    pub fn expert_config(&self) -> Option<ExpertConfig> {
        self.expert.as_ref().map(|m| ExpertConfig {
            kind: self.expert_kind,
            manifest: m.clone(),
            epsilon: self.epsilon,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_all_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::default().train_config(), TrainConfig::default());
        assert_eq!(RunConfig::default().hyper(), Hyper::default());
        assert_eq!(RunConfig::default().gen_config(), GenConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_json(r#"{"stepz": 3}"#).unwrap_err();
        assert!(matches!(e, LadError::Config(_)));
        assert!(RunConfig::default().set("stepz", "3").is_err());
    }

    #[test]
    fn overrides_parse_json_or_strings() {
        let mut c = RunConfig::from_json(r#"{"steps": 3, "stage": "rpo"}"#).unwrap();
        assert_eq!(c.steps, 3);
        assert_eq!(c.stage, Stage::Rpo);
        c.set("steps", "10").unwrap();
        c.set("data_dir", "some/dir").unwrap();
        c.set("addr", "8080").unwrap();
        assert_eq!(c.addr, "8080");
        c.set("expert", "toxic.txt").unwrap();
        c.set("stage", "glm").unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.data_dir, PathBuf::from("some/dir"));
        assert_eq!(c.expert_config().unwrap().manifest, PathBuf::from("toxic.txt"));
        assert_eq!(c.stage, Stage::Glm);
        assert!(c.set("steps", "-1").is_err());
    }
}
