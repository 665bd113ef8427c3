//! Python bindings: toy-suite generation, synthesis helpers, losses, training,
//! division, adaptive embedding and evaluation.

use aqa_core::corpus::{self, Content, Modality};
use aqa_core::division::{self, DivisionConfig};
use aqa_core::evaluation;
use aqa_core::model::{self, EmbeddingVec, ModelConfig, ModelState};
use aqa_core::routing::{self, InferenceMode};
use aqa_core::synthesis::{self, MockTeacher, TeacherResponse};
use aqa_core::training::{self, TargetSeq, TrainConfig, TrainMode};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use std::collections::{BTreeMap, HashMap};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn infer_mode(s: &str) -> PyResult<InferenceMode> {
    match s {
        "adaptive" => Ok(InferenceMode::Adaptive),
        "force-embed" => Ok(InferenceMode::ForceEmbed),
        "force-augment" => Ok(InferenceMode::ForceAugment),
        _ => Err(value_err(format!("mode must be adaptive, force-embed or force-augment, got `{s}`"))),
    }
}

fn train_mode(s: &str, half_seed: u64) -> PyResult<TrainMode> {
    match s {
        "noaug" => Ok(TrainMode::NoAug),
        "alwaysaug" => Ok(TrainMode::AlwaysAug),
        "adaptive" => Ok(TrainMode::Adaptive),
        "half" => Ok(TrainMode::HalfRandom(half_seed)),
        _ => Err(value_err(format!("mode must be noaug, alwaysaug, adaptive or half, got `{s}`"))),
    }
}

fn content(text: Vec<u32>, visual: Vec<u32>) -> Content {
    match (text.is_empty(), visual.is_empty()) {
        (false, true) => Content::text(text),
        (true, false) => Content::image(visual),
        _ => Content { text, visual, modality: Modality::Interleaved },
    }
}

#[pyclass(name = "Corpus", module = "aqa", from_py_object)]
#[derive(Clone)]
struct PyCorpus {
    inner: corpus::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        corpus::load_corpus(path).map(|inner| Self { inner }).map_err(value_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        corpus::save_corpus(&self.inner, path).map_err(runtime_err)
    }

    fn to_jsonl(&self) -> String {
        corpus::to_jsonl(&self.inner)
    }

    fn dataset_names(&self) -> Vec<String> {
        self.inner.datasets.iter().map(|d| d.name.clone()).collect()
    }

    fn num_samples(&self) -> usize {
        self.inner.num_samples()
    }

    /// `{name: aug_required}` with `None` for undivided datasets.
    fn labels(&self) -> BTreeMap<String, Option<bool>> {
        self.inner.datasets.iter().map(|d| (d.name.clone(), d.aug_required)).collect()
    }

    fn split_holdout(&self, fraction: f64) -> (Self, Self) {
        let (a, b) = self.inner.split_holdout(fraction);
        (Self { inner: a }, Self { inner: b })
    }

    /// Fills augmentation targets from `{sample_id: answer}` through the mock teacher.
    fn synthesize_mock(&self, answers: HashMap<String, String>) -> PyResult<(Self, usize)> {
        let out = synthesis::synthesize_augmentations(&self.inner.datasets, &self.inner.hasher, &MockTeacher::new(answers)).map_err(runtime_err)?;
        let inner = corpus::Corpus::new(out.datasets, self.inner.vocab, self.inner.hasher).map_err(runtime_err)?;
        Ok((Self { inner }, out.failures.len()))
    }

    fn apply_labels(&self, labels: BTreeMap<String, bool>) -> PyResult<Self> {
        division::apply_manual_division(&self.inner, &labels).map(|inner| Self { inner }).map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.inner.num_samples()
    }

    fn __repr__(&self) -> String {
        format!("Corpus(datasets={:?}, samples={})", self.dataset_names(), self.inner.num_samples())
    }
}

/// Generates the toy suite; returns the corpus and `{sample_id: answer}`.
#[pyfunction]
#[pyo3(signature = (seed=0, samples_per_dataset=None, keys_per_slot=None, a_datasets=None, b_datasets=None))]
fn generate_toy_suite(
    seed: u64,
    samples_per_dataset: Option<usize>,
    keys_per_slot: Option<usize>,
    a_datasets: Option<usize>,
    b_datasets: Option<usize>,
) -> PyResult<(PyCorpus, HashMap<String, String>)> {
    let mut cfg = corpus::ToySuiteConfig::default();
    cfg.samples_per_dataset = samples_per_dataset.unwrap_or(cfg.samples_per_dataset);
    cfg.keys_per_slot = keys_per_slot.unwrap_or(cfg.keys_per_slot);
    cfg.a_datasets = a_datasets.unwrap_or(cfg.a_datasets);
    cfg.b_datasets = b_datasets.unwrap_or(cfg.b_datasets);
    let suite = corpus::generate_toy_suite(&cfg, seed).map_err(value_err)?;
    Ok((PyCorpus { inner: suite.corpus }, suite.sidecar.answer_map()))
}

/// Ground-truth division labels of the toy suite generated with the same arguments.
#[pyfunction]
#[pyo3(signature = (seed=0, samples_per_dataset=None, keys_per_slot=None))]
fn toy_ground_truth(seed: u64, samples_per_dataset: Option<usize>, keys_per_slot: Option<usize>) -> PyResult<BTreeMap<String, bool>> {
    let mut cfg = corpus::ToySuiteConfig::default();
    cfg.samples_per_dataset = samples_per_dataset.unwrap_or(cfg.samples_per_dataset);
    cfg.keys_per_slot = keys_per_slot.unwrap_or(cfg.keys_per_slot);
    Ok(corpus::generate_toy_suite(&cfg, seed).map_err(value_err)?.sidecar.ground_truth_labels())
}

#[pyfunction]
fn render_prompt(question: &str) -> PyResult<String> {
    synthesis::render_prompt(question).map(|p| p.body).map_err(value_err)
}

#[pyfunction]
fn extract_answer(raw: &str) -> PyResult<String> {
    synthesis::extract_answer(&TeacherResponse { raw: raw.into(), latency_ms: 0.0 }).map_err(value_err)
}

#[pyfunction]
fn mock_teacher(prompt: &str, answer: &str) -> String {
    synthesis::mock_teacher(&synthesis::PromptText { body: prompt.into() }, answer).raw
}

fn units(xs: Vec<Vec<f64>>) -> PyResult<Vec<EmbeddingVec>> {
    xs.into_iter().map(|v| EmbeddingVec::from_unit(v).ok_or_else(|| value_err("embeddings must be unit-norm"))).collect()
}

#[pyfunction]
fn contrastive_loss(anchors: Vec<Vec<f64>>, positives: Vec<Vec<f64>>, negatives: Vec<Vec<Vec<f64>>>, tau: f64) -> PyResult<f64> {
    let negatives: Vec<Vec<EmbeddingVec>> = negatives.into_iter().map(units).collect::<PyResult<_>>()?;
    training::contrastive_loss(&units(anchors)?, &units(positives)?, &negatives, tau).map_err(value_err)
}

/// `logits[t]` predicts `target[t]`; the target is `[AUGMENT, g.., EOS]` or `[EMBED, EOS]`.
#[pyfunction]
fn generation_loss(logits: Vec<Vec<f64>>, target: Vec<u32>) -> PyResult<f64> {
    let t = TargetSeq::new(target).map_err(value_err)?;
    training::generation_loss(&logits, &t).map_err(value_err)
}

#[pyclass(name = "Model", module = "aqa", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: ModelState,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (hidden_dim=32, layers=2, heads=4, max_seq_len=64, seed=0))]
    fn new(hidden_dim: usize, layers: usize, heads: usize, max_seq_len: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig { hidden_dim, layers, heads, max_seq_len, seed, ..ModelConfig::default() };
        model::init_model(&cfg).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        model::load_checkpoint(path).map(|inner| Self { inner }).map_err(value_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_checkpoint(&self.inner, path).map_err(runtime_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.inner.config.hidden_dim
    }

    /// Returns `(unit vector, trace dict)` for one query.
    #[pyo3(signature = (text, visual=Vec::new(), mode="adaptive", max_len=routing::DEFAULT_MAX_LEN))]
    fn embed(&self, py: Python<'_>, text: Vec<u32>, visual: Vec<u32>, mode: &str, max_len: usize) -> PyResult<(Vec<f64>, Py<PyAny>)> {
        let q = content(text, visual);
        q.validate(&self.inner.config.vocab).map_err(value_err)?;
        let (emb, trace) = routing::embed_adaptive(&self.inner, &q, infer_mode(mode)?, max_len).map_err(value_err)?;
        let trace = serde_json::to_string(&trace).map_err(runtime_err)?;
        Ok((emb.into_inner(), json_to_py(py, &trace)?))
    }

    /// Evaluates on every dataset of `corpus`; returns the report as a dict.
    #[pyo3(signature = (corpus, mode="adaptive", max_len=routing::DEFAULT_MAX_LEN))]
    fn evaluate(&self, py: Python<'_>, corpus: &PyCorpus, mode: &str, max_len: usize) -> PyResult<Py<PyAny>> {
        let (report, _) = evaluation::run_eval(&self.inner, &corpus.inner.datasets, infer_mode(mode)?, max_len).map_err(runtime_err)?;
        json_to_py(py, &report.to_json())
    }
}

/// Trains with the toy recipe; returns the model and the per-step total losses.
#[pyfunction]
#[pyo3(signature = (corpus, mode="adaptive", epochs=None, seed=0, hidden_dim=32))]
fn train(corpus: &PyCorpus, mode: &str, epochs: Option<usize>, seed: u64, hidden_dim: usize) -> PyResult<(PyModel, Vec<f64>)> {
    let model = ModelConfig { hidden_dim, seed, ..ModelConfig::default() };
    let mut cfg = TrainConfig::toy(seed);
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    let (state, log) = training::train(&corpus.inner, train_mode(mode, seed)?, &model, &cfg).map_err(runtime_err)?;
    Ok((PyModel { inner: state }, log.records.iter().map(|r| r.total).collect()))
}

/// Runs the NoAug/AlwaysAug comparison; returns `(divided corpus, report dict)`.
#[pyfunction]
#[pyo3(signature = (corpus, seed=0, epsilon=0.0, epochs=None))]
fn run_division(py: Python<'_>, corpus: &PyCorpus, seed: u64, epsilon: f64, epochs: Option<usize>) -> PyResult<(PyCorpus, Py<PyAny>)> {
    let mut cfg = DivisionConfig { epsilon, ..DivisionConfig::toy(seed) };
    cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
    let out = division::run_division(&corpus.inner, &cfg).map_err(runtime_err)?;
    Ok((PyCorpus { inner: out.corpus }, json_to_py(py, &out.report.to_json())?))
}

#[pymodule]
fn aqa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_toy_suite, m)?)?;
    m.add_function(wrap_pyfunction!(toy_ground_truth, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(extract_answer, m)?)?;
    m.add_function(wrap_pyfunction!(mock_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generation_loss, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_division, m)?)?;
    m.add("AUGMENT", aqa_core::vocab::AUGMENT)?;
    m.add("EMBED", aqa_core::vocab::EMBED)?;
    m.add("EOS", aqa_core::vocab::EOS)?;
    Ok(())
}
