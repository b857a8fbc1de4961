//! Python bindings: corpus generation, models, training, completion,
//! the quality scorer, metrics and the in-process completion service.
//!
//! Structured results (reports, samples, responses) are returned as plain
//! Python dicts and lists.

use lad_core::corpus::{self, BehaviorRecord, GenConfig};
use lad_core::eval::{evaluate, EvalConfig, MetricsReport};
use lad_core::expert::{QualityScorer, RuleExpert};
use lad_core::glm::{beam_generate, load_checkpoint, save_checkpoint, Candidate, CandidateList, DecodeConfig, Hyper, Model as CoreModel, ModelState};
use lad_core::interests::{assemble_input, copy_short_term, encode_long_term, AssembledInput};
use lad_core::rpo::{self, Stage, TrainConfig};
use lad_core::serving::{GsuBuffer, Service as CoreService};
use lad_core::vocab::{Vocabulary as CoreVocab, EOS};
use lad_core::LadError;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::path::PathBuf;

fn py_err(e: LadError) -> PyErr {
    match e {
        LadError::Io { .. } => PyIOError::new_err(e.to_string()),
        LadError::Unavailable(_) | LadError::Checkpoint(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let s = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (s,))?.unbind())
}

#[pyclass(name = "Vocabulary", frozen)]
struct Vocabulary {
    inner: CoreVocab,
}

#[pymethods]
impl Vocabulary {
    #[new]
    fn new(chars: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CoreVocab::build(chars.chars()).map_err(py_err)?,
        })
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Encoder-decoder completion model with its long-term encoder.
#[pyclass(name = "Model")]
struct Model {
    inner: ModelState,
}

impl Model {
    fn input(&self, prefix: &str, short: &[String], long: &[String]) -> PyResult<AssembledInput> {
        let m = &self.inner;
        let h = m.hyper();
        let long = encode_long_term(long, h.long_max, m).map_err(py_err)?;
        let short = copy_short_term(short, h.short_max, m.vocab());
        assemble_input(prefix, short, long, m.vocab()).map_err(py_err)
    }
}

fn candidate_dicts(py: Python<'_>, list: &CandidateList) -> PyResult<Py<PyAny>> {
    #[derive(serde::Serialize)]
    struct Row<'a> {
        text: &'a str,
        score: f64,
        is_reject: bool,
    }
    let rows: Vec<Row> = list
        .candidates
        .iter()
        .map(|c: &Candidate| Row {
            text: &c.text,
            score: c.seq_score,
            is_reject: c.is_reject,
        })
        .collect();
    to_py(py, &rows)
}

#[pymethods]
impl Model {
    /// Fresh model over `alphabet` (a space is always added).
    #[new]
    #[pyo3(signature = (alphabet, seed=1, dim=64, heads=4, ffn_dim=256, layers=2, short_max=3, long_max=7))]
    #[allow(clippy::too_many_arguments)]
    fn new(alphabet: &str, seed: u64, dim: usize, heads: usize, ffn_dim: usize, layers: usize, short_max: usize, long_max: usize) -> PyResult<Self> {
        let vocab = CoreVocab::build(alphabet.chars().chain([' '])).map_err(py_err)?;
        let h = Hyper {
            dim,
            heads,
            ffn_dim,
            enc_layers: layers,
            dec_layers: layers,
            lte_layers: layers,
            short_max,
            long_max,
            ..Hyper::default()
        };
        Ok(Self {
            inner: CoreModel::new(h, vocab, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            inner: self.inner.vocab().clone(),
        }
    }

    /// Ranked candidates (including the reject entry when generated).
    #[pyo3(signature = (prefix, short=vec![], long=vec![], n=4, beam_width=4, max_len=24))]
    #[allow(clippy::too_many_arguments)]
    fn generate(&self, py: Python<'_>, prefix: &str, short: Vec<String>, long: Vec<String>, n: usize, beam_width: usize, max_len: usize) -> PyResult<Py<PyAny>> {
        let input = self.input(prefix, &short, &long)?;
        let cfg = DecodeConfig {
            n,
            beam_width,
            max_len,
            length_normalize: true,
        };
        let list = beam_generate(&self.inner, &input, &cfg).map_err(py_err)?;
        candidate_dicts(py, &list)
    }

    /// Mean token log-probability of `completion` (without the end token).
    #[pyo3(signature = (prefix, completion, short=vec![], long=vec![]))]
    fn sequence_logprob(&self, prefix: &str, completion: &str, short: Vec<String>, long: Vec<String>) -> PyResult<f64> {
        let input = self.input(prefix, &short, &long)?;
        let mut ids = self.inner.vocab().encode(completion);
        ids.push(EOS);
        Ok(self.inner.sequence_logprob(&input, &ids).map_err(py_err)? as f64)
    }

    /// Train in place on a JSON-lines file. Returns the per-step losses.
    #[pyo3(signature = (data, stage="glm", steps=100, batch_size=64, lr=1e-3, expert=None, seed=7))]
    #[allow(clippy::too_many_arguments)]
    fn train(&mut self, py: Python<'_>, data: PathBuf, stage: &str, steps: usize, batch_size: usize, lr: f64, expert: Option<PathBuf>, seed: u64) -> PyResult<Py<PyAny>> {
        let stage = match stage {
            "glm" => Stage::Glm,
            "rpo" => Stage::Rpo,
            other => return Err(PyValueError::new_err(format!("unknown stage {other:?}"))),
        };
        let samples = corpus::load_samples(&data).map_err(py_err)?;
        let scorer = match expert {
            Some(p) => Some(
                RuleExpert::from_manifest(&p)
                    .map_err(py_err)?
                    .with_charset(self.inner.vocab().chars().iter().copied()),
            ),
            None => None,
        };
        let cfg = TrainConfig {
            stage,
            steps,
            batch_size,
            warmup_steps: (steps / 10).max(1),
            peak_lr: lr,
            seed,
            ..TrainConfig::default()
        };
        let report = lad_core::train::train(
            &mut self.inner,
            &samples,
            scorer.as_ref().map(|s| s as &dyn QualityScorer),
            &cfg,
            None,
        )
        .map_err(py_err)?;
        to_py(py, &report.history)
    }

    /// Evaluate on a JSON-lines test file; returns the metrics report.
    #[pyo3(signature = (data, expert, limit=None))]
    fn evaluate(&self, py: Python<'_>, data: PathBuf, expert: PathBuf, limit: Option<usize>) -> PyResult<Py<PyAny>> {
        let mut samples = corpus::load_samples(&data).map_err(py_err)?;
        if let Some(n) = limit {
            samples.truncate(n);
        }
        let scorer = RuleExpert::from_manifest(&expert)
            .map_err(py_err)?
            .with_charset(self.inner.vocab().chars().iter().copied());
        let (report, _) = evaluate(&self.inner, &samples, &scorer, &EvalConfig::default()).map_err(py_err)?;
        to_py(py, &report)
    }
}

/// Rule-based quality scorer; higher is better, toxicity is `1 - score`.
#[pyclass(name = "Expert", frozen)]
struct Expert {
    inner: RuleExpert,
}

#[pymethods]
impl Expert {
    #[new]
    fn new(toxic: Vec<String>) -> Self {
        Self {
            inner: RuleExpert::new(toxic),
        }
    }

    fn score(&self, text: &str) -> f64 {
        self.inner.score(text)
    }

    fn score_in_context(&self, prefix: &str, text: &str) -> f64 {
        self.inner.score_in_context(prefix, text)
    }
}

/// In-process completion service with memory bank and recent-query buffer.
#[pyclass(name = "Service", frozen)]
struct Service {
    inner: CoreService,
}

#[pymethods]
impl Service {
    #[new]
    #[pyo3(signature = (checkpoint, gsu_capacity=3))]
    fn new(checkpoint: PathBuf, gsu_capacity: usize) -> PyResult<Self> {
        let model = load_checkpoint(&checkpoint).map_err(py_err)?;
        Ok(Self {
            inner: CoreService::new(
                Some(model),
                GsuBuffer::new(gsu_capacity),
                DecodeConfig::default(),
                checkpoint.display().to_string(),
            ),
        })
    }

    fn record_event(&self, user_id: &str, query: &str) -> PyResult<()> {
        self.inner.record_event(user_id, query).map_err(py_err)
    }

    /// Rebuild the memory bank from `{user_id: [queries...]}`.
    fn refresh(&self, py: Python<'_>, behaviors: std::collections::BTreeMap<String, Vec<String>>) -> PyResult<Py<PyAny>> {
        let records: Vec<BehaviorRecord> = behaviors
            .into_iter()
            .map(|(user_id, queries)| BehaviorRecord { user_id, queries })
            .collect();
        to_py(py, &self.inner.refresh(&records).map_err(py_err)?)
    }

    fn complete(&self, py: Python<'_>, user_id: &str, prefix: &str) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.complete(user_id, prefix).map_err(py_err)?)
    }
}

/// Write a synthetic corpus into `out` and return the sample counts.
#[pyfunction]
#[pyo3(signature = (out, seed=42, num_users=5000))]
fn generate_corpus(py: Python<'_>, out: PathBuf, seed: u64, num_users: usize) -> PyResult<Py<PyAny>> {
    let cfg = GenConfig {
        seed,
        num_users,
        ..GenConfig::default()
    };
    let c = corpus::generate_corpus(&cfg, &out).map_err(py_err)?;
    to_py(
        py,
        &serde_json::json!({ "train": c.train.len(), "test": c.test.len(), "toxic": c.lexicon.toxic }),
    )
}

#[pyfunction]
fn load_samples(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    to_py(py, &corpus::load_samples(&path).map_err(py_err)?)
}

/// Metrics over kept completion lists, scored by `expert`.
#[pyfunction]
#[pyo3(signature = (kept, golden, expert, n_g=4))]
fn metrics(py: Python<'_>, kept: Vec<Vec<String>>, golden: Vec<String>, expert: &Expert, n_g: usize) -> PyResult<Py<PyAny>> {
    if kept.len() != golden.len() {
        return Err(PyValueError::new_err("kept and golden differ in length"));
    }
    to_py(py, &MetricsReport::compute(&kept, &golden, &expert.inner, n_g).map_err(py_err)?)
}

/// Position of the reject token for candidates with the given expert
/// scores (already sorted best first).
#[pyfunction]
fn reject_position(scores: Vec<f64>, epsilon: f64) -> PyResult<usize> {
    let list = CandidateList::new(
        scores
            .into_iter()
            .map(|s| Candidate {
                ids: vec![EOS],
                text: String::new(),
                seq_score: 0.0,
                expert_score: s,
                is_reject: false,
            })
            .collect(),
    );
    let injected = rpo::inject_reject(list, epsilon).map_err(py_err)?;
    Ok(injected.reject_index.unwrap_or(0))
}

#[pyfunction]
fn pairwise_loss(deltas: Vec<f64>) -> f64 {
    rpo::pairwise_loss(&deltas)
}

#[pymodule]
fn lad(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocabulary>()?;
    m.add_class::<Model>()?;
    m.add_class::<Expert>()?;
    m.add_class::<Service>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(load_samples, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(reject_position, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_loss, m)?)?;
    Ok(())
}
