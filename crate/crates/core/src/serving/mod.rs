//! Online completion service: a memory bank of cached long-term vectors, a
//! per-user buffer of recent queries, and reject-cutoff filtering.
//!
//! The model and the memory bank are published as immutable snapshots behind
//! `RwLock<Arc<_>>`; a request clones the `Arc`s once and works on that pair,
//! so a concurrent refresh never changes what an in-flight request sees.

mod http;

pub use http::{router, serve};

use crate::corpus::{load_behaviors, BehaviorRecord};
use crate::error::{LadError, Result};
use crate::glm::{beam_generate, DecodeConfig, ModelState};
use crate::interests::{assemble_input, copy_short_term, encode_long_term, LongTermVectors};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub vectors: LongTermVectors<f32>,
    pub refreshed_at_ms: u64,
}

/// Immutable snapshot of per-user long-term vectors.
#[derive(Debug, Clone, Default)]
pub struct MemoryBank {
    pub generation: u64,
    entries: HashMap<String, MemoryEntry>,
}

impl MemoryBank {
    /// Encode every user's behavior log with `model`. A user listed twice
    /// keeps the later record.
    pub fn build(records: &[BehaviorRecord], model: &ModelState, generation: u64) -> Result<Self> {
        let ts = now_ms();
        let mut entries = HashMap::with_capacity(records.len());
        for r in records {
            let vectors = encode_long_term(&r.queries, model.hyper().long_max, model)?;
            entries.insert(
                r.user_id.clone(),
                MemoryEntry {
                    vectors,
                    refreshed_at_ms: ts,
                },
            );
        }
        Ok(Self { generation, entries })
    }

    pub fn get(&self, user_id: &str) -> Option<&MemoryEntry> {
        self.entries.get(user_id)
    }

    pub fn users(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JournalLine {
    user_id: String,
    query: String,
    ts: u64,
}

/// Per-user ring buffer of the most recent queries, newest last, with an
/// optional append-only journal that is replayed on open.
#[derive(Debug)]
pub struct GsuBuffer {
    capacity: usize,
    users: Mutex<HashMap<String, VecDeque<(String, u64)>>>,
    journal: Option<Mutex<File>>,
}

impl GsuBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            users: Mutex::new(HashMap::new()),
            journal: None,
        }
    }

    /// Buffer backed by the journal at `path`, which is created if missing.
    pub fn with_journal(capacity: usize, path: &Path) -> Result<Self> {
        let buf = Self::new(capacity);
        if path.exists() {
            let f = File::open(path).map_err(|e| LadError::io(path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| LadError::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let j: JournalLine = serde_json::from_str(&line).map_err(|e| LadError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                buf.push(j.user_id, j.query, j.ts);
            }
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LadError::io(path, e))?;
        Ok(Self {
            journal: Some(Mutex::new(f)),
            ..buf
        })
    }

    fn push(&self, user_id: String, query: String, ts: u64) {
        let mut users = self.users.lock().unwrap_or_else(|e| e.into_inner());
        let q = users.entry(user_id).or_default();
        q.push_back((query, ts));
        while q.len() > self.capacity {
            q.pop_front();
        }
    }

    pub fn record(&self, user_id: &str, query: &str) -> Result<()> {
        if query.is_empty() {
            return Err(LadError::InvalidInput("query is empty".into()));
        }
        let ts = now_ms();
        if let Some(j) = &self.journal {
            let line = serde_json::to_string(&JournalLine {
                user_id: user_id.into(),
                query: query.into(),
                ts,
            })?;
            let mut f = j.lock().unwrap_or_else(|e| e.into_inner());
            writeln!(f, "{line}").map_err(|e| LadError::io("<gsu journal>", e))?;
        }
        self.push(user_id.into(), query.into(), ts);
        Ok(())
    }

    /// Recent queries for `user_id`, oldest first.
    pub fn recent(&self, user_id: &str) -> Vec<String> {
        let users = self.users.lock().unwrap_or_else(|e| e.into_inner());
        users
            .get(user_id)
            .map(|q| q.iter().map(|(s, _)| s.clone()).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCompletion {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub completions: Vec<ScoredCompletion>,
    pub rejected_count: usize,
    /// Memory bank generation the request was served from.
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshResponse {
    pub generation: u64,
    pub users: usize,
}

pub struct Service {
    model: RwLock<Option<Arc<ModelState>>>,
    bank: RwLock<Arc<MemoryBank>>,
    gsu: GsuBuffer,
    decode: DecodeConfig,
    checkpoint: String,
    behavior_log: Option<PathBuf>,
}

impl Service {
    /// `checkpoint` is a label reported by the health endpoint.
    pub fn new(model: Option<ModelState>, gsu: GsuBuffer, decode: DecodeConfig, checkpoint: impl Into<String>) -> Self {
        Self {
            model: RwLock::new(model.map(Arc::new)),
            bank: RwLock::new(Arc::new(MemoryBank::default())),
            gsu,
            decode,
            checkpoint: checkpoint.into(),
            behavior_log: None,
        }
    }

    /// Behavior log re-read by [`Service::refresh_from_log`].
    pub fn with_behavior_log(mut self, path: impl Into<PathBuf>) -> Self {
        self.behavior_log = Some(path.into());
        self
    }

    pub fn checkpoint(&self) -> &str {
        &self.checkpoint
    }

    pub fn model(&self) -> Result<Arc<ModelState>> {
        self.model
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
            .ok_or_else(|| LadError::Unavailable("no checkpoint loaded".into()))
    }

    pub fn bank(&self) -> Arc<MemoryBank> {
        self.bank.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn gsu(&self) -> &GsuBuffer {
        &self.gsu
    }

    pub fn record_event(&self, user_id: &str, query: &str) -> Result<()> {
        self.gsu.record(user_id, query)
    }

    /// Rebuild the memory bank from `records` and publish it.
    pub fn refresh(&self, records: &[BehaviorRecord]) -> Result<RefreshResponse> {
        let model = self.model()?;
        let bank = MemoryBank::build(records, &model, 0)?;
        let users = bank.users();
        let mut slot = self.bank.write().unwrap_or_else(|e| e.into_inner());
        let generation = slot.generation + 1;
        *slot = Arc::new(MemoryBank { generation, ..bank });
        Ok(RefreshResponse { generation, users })
    }

    /// Re-read the configured behavior log and refresh. On any failure the
    /// current bank stays in place.
    pub fn refresh_from_log(&self) -> Result<RefreshResponse> {
        match &self.behavior_log {
            Some(p) => {
                let records = load_behaviors(p)?;
                self.refresh(&records)
            }
            None => self.refresh(&[]),
        }
    }

    /// Generate completions and drop everything ranked below the reject.
    pub fn complete(&self, user_id: &str, prefix: &str) -> Result<CompletionResponse> {
        let model = self.model()?;
        let bank = self.bank();
        let h = model.hyper();
        let vocab = model.vocab();
        let short = copy_short_term(&self.gsu.recent(user_id), h.short_max, vocab);
        let long = bank
            .get(user_id)
            .map(|e| e.vectors.most_recent(h.long_max))
            .unwrap_or_else(|| LongTermVectors::empty(h.dim));
        let input = assemble_input(prefix, short, long, vocab)?;
        let list = beam_generate(&model, &input, &self.decode)?;
        Ok(CompletionResponse {
            completions: list
                .kept()
                .into_iter()
                .map(|c| ScoredCompletion {
                    text: c.text.clone(),
                    score: c.seq_score,
                })
                .collect(),
            rejected_count: list.rejected_count(),
            generation: bank.generation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{Hyper, Model};
    use crate::vocab::{Vocabulary, REJECT};

    fn model() -> ModelState {
        let h = Hyper {
            dim: 8,
            heads: 2,
            ffn_dim: 16,
            enc_layers: 1,
            dec_layers: 1,
            lte_layers: 1,
            max_dec_len: 6,
            ..Hyper::default()
        };
        Model::new(h, Vocabulary::build("abc ".chars()).unwrap(), 4).unwrap()
    }

    fn decode() -> DecodeConfig {
        DecodeConfig {
            max_len: 6,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn gsu_evicts_oldest_and_isolates_users() {
        let g = GsuBuffer::new(3);
        for q in ["a", "b", "c", "d"] {
            g.record("u1", q).unwrap();
        }
        assert_eq!(g.recent("u1"), vec!["b", "c", "d"]);
        assert!(g.recent("u2").is_empty());
        assert!(g.record("u1", "").is_err());
    }

    #[test]
    fn journal_replays_after_restart() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gsu.jsonl");
        {
            let g = GsuBuffer::with_journal(2, &p).unwrap();
            g.record("u", "a").unwrap();
            g.record("u", "b").unwrap();
            g.record("u", "c").unwrap();
        }
        let g = GsuBuffer::with_journal(2, &p).unwrap();
        assert_eq!(g.recent("u"), vec!["b", "c"]);
    }

    #[test]
    fn memory_bank_refresh_is_pure_and_versioned() {
        let s = Service::new(Some(model()), GsuBuffer::new(3), decode(), "m");
        let recs = vec![BehaviorRecord {
            user_id: "u".into(),
            queries: vec!["ab".into(), "ca".into()],
        }];
        let r1 = s.refresh(&recs).unwrap();
        let v1 = s.bank().get("u").unwrap().vectors.clone();
        let r2 = s.refresh(&recs).unwrap();
        assert_eq!(r2.generation, r1.generation + 1);
        assert_eq!(s.bank().get("u").unwrap().vectors, v1);
        assert_eq!(s.refresh(&[]).unwrap().users, 0);
    }

    #[test]
    fn failed_log_refresh_keeps_old_bank() {
        let s = Service::new(Some(model()), GsuBuffer::new(3), decode(), "m").with_behavior_log("/nonexistent/log.jsonl");
        s.refresh(&[BehaviorRecord {
            user_id: "u".into(),
            queries: vec!["ab".into()],
        }])
        .unwrap();
        assert!(s.refresh_from_log().is_err());
        assert_eq!(s.bank().generation, 1);
        assert!(s.bank().get("u").is_some());
    }

    #[test]
    fn missing_model_is_unavailable() {
        let s = Service::new(None, GsuBuffer::new(3), decode(), "");
        assert!(matches!(s.complete("u", "a"), Err(LadError::Unavailable(_))));
    }

    #[test]
    fn forced_reject_hides_everything() {
        let mut m = model();
        m.param_by_name_mut("out.b").unwrap().data[REJECT as usize] = 12.0;
        let s = Service::new(Some(m), GsuBuffer::new(3), decode(), "m");
        let r = s.complete("nobody", "ab").unwrap();
        assert!(r.completions.is_empty());
        assert_eq!(r.rejected_count, 4);
        assert!(s.complete("nobody", "").is_err());
    }

    #[test]
    fn reject_last_keeps_all() {
        let mut m = model();
        m.param_by_name_mut("out.b").unwrap().data[REJECT as usize] = -50.0;
        let s = Service::new(Some(m), GsuBuffer::new(3), decode(), "m");
        let r = s.complete("nobody", "ab").unwrap();
        assert_eq!(r.completions.len(), 4);
        assert_eq!(r.rejected_count, 0);
        assert!(r.completions.iter().all(|c| !c.text.contains("[Reject]")));
    }
}
