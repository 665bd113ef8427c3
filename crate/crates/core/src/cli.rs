//! Command-line driver: one subcommand per stage, handing off through files
//! in a work directory, plus a `pipeline` command that runs them all.
//!
//! Settings come from built-in defaults, then an optional flat `key = value`
//! file (`--config`), then flags; later sources win.

use crate::corpus::{generate_toy_suite, load_corpus, save_corpus, Content, Corpus, CorpusError, Sidecar, ToySuiteConfig};
use crate::division::{apply_manual_division, labels_to_text, load_labels, run_division, DivisionConfig, DivisionError};
use crate::evaluation::{emit_report, run_eval, ComparisonReport, ComparisonRow, EvalError, EvalReport};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelError, ModelState};
use crate::routing::{embed_adaptive, InferenceMode, TraceRecord, DEFAULT_MAX_LEN};
use crate::synthesis::{synthesize_augmentations, DecodingParams, HttpTeacher, MockTeacher, SynthesisError, Teacher};
use crate::training::{train, Batching, Optimizer, TrainConfig, TrainError, TrainMode};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

pub const TEACHER_URL_ENV: &str = "AQA_TEACHER_URL";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{origin}: {msg}")]
    Config { origin: String, msg: String },
    #[error("{stage} stage failed: {source}")]
    Stage { stage: &'static str, source: StageError },
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for a failed stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Stage { .. } => 2,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Division(#[from] DivisionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint not found: {0}")]
    CheckpointMissing(String),
    #[error("input not found: {0}")]
    InputMissing(String),
    #[error("{path} line {line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn stage<T, E: Into<StageError>>(name: &'static str, r: Result<T, E>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Stage { stage: name, source: e.into() })
}

fn write_file(name: &'static str, path: &Path, text: &str) -> Result<(), CliError> {
    stage(name, std::fs::write(path, text).map_err(|source| StageError::Io { path: path.display().to_string(), source }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainModeSel {
    NoAug,
    AlwaysAug,
    Adaptive,
    Half,
}

impl TrainModeSel {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "noaug" => TrainModeSel::NoAug,
            "alwaysaug" => TrainModeSel::AlwaysAug,
            "adaptive" => TrainModeSel::Adaptive,
            "half" => TrainModeSel::Half,
            _ => return None,
        })
    }

    pub fn slug(&self) -> &'static str {
        match self {
            TrainModeSel::NoAug => "noaug",
            TrainModeSel::AlwaysAug => "alwaysaug",
            TrainModeSel::Adaptive => "adaptive",
            TrainModeSel::Half => "half",
        }
    }
}

fn parse_infer_mode(s: &str) -> Option<InferenceMode> {
    Some(match s {
        "adaptive" => InferenceMode::Adaptive,
        "force-embed" => InferenceMode::ForceEmbed,
        "force-augment" => InferenceMode::ForceAugment,
        _ => return None,
    })
}

fn infer_slug(m: InferenceMode) -> &'static str {
    match m {
        InferenceMode::Adaptive => "adaptive",
        InferenceMode::ForceEmbed => "force-embed",
        InferenceMode::ForceAugment => "force-augment",
    }
}

/// Every setting a command can read.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub work_dir: PathBuf,
    /// Input corpus overriding the stage's default file in `work_dir`.
    pub corpus: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Manual division labels; skips baseline training in `divide`.
    pub labels: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    /// Stem for `embed` outputs.
    pub output: Option<PathBuf>,
    pub toy: ToySuiteConfig,
    pub toy_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_mode: TrainModeSel,
    pub infer_mode: InferenceMode,
    pub half_seed: u64,
    pub teacher_url: Option<String>,
    pub mock_teacher: bool,
    pub teacher_timeout_s: f64,
    pub decoding: DecodingParams,
    pub epsilon: f64,
    pub holdout: f64,
    pub max_len: usize,
    /// Train and report NoAug, AlwaysAug and Half alongside Adaptive.
    pub baselines: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let preset = DivisionConfig::toy(0);
        Self {
            work_dir: PathBuf::from("aqa-run"),
            corpus: None,
            sidecar: None,
            checkpoint: None,
            labels: None,
            queries: None,
            output: None,
            toy: ToySuiteConfig::default(),
            toy_seed: 0,
            model: preset.model,
            train: preset.train,
            train_mode: TrainModeSel::Adaptive,
            infer_mode: InferenceMode::Adaptive,
            half_seed: 0,
            teacher_url: None,
            mock_teacher: false,
            teacher_timeout_s: 30.0,
            decoding: DecodingParams::default(),
            epsilon: preset.epsilon,
            holdout: preset.holdout,
            max_len: DEFAULT_MAX_LEN,
            baselines: true,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
}

fn flag(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("`{key}`: expected true or false, got `{v}`")),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let path = || Some(PathBuf::from(v));
        match key {
            "work_dir" => self.work_dir = PathBuf::from(v),
            "corpus" => self.corpus = path(),
            "sidecar" => self.sidecar = path(),
            "checkpoint" => self.checkpoint = path(),
            "labels" => self.labels = path(),
            "queries" => self.queries = path(),
            "output" => self.output = path(),
            "a_datasets" => self.toy.a_datasets = num(key, v)?,
            "b_datasets" => self.toy.b_datasets = num(key, v)?,
            "samples_per_dataset" => self.toy.samples_per_dataset = num(key, v)?,
            "hard_negatives" => self.toy.hard_negatives = num(key, v)?,
            "keys_per_slot" => self.toy.keys_per_slot = num(key, v)?,
            "answers_per_b_dataset" => self.toy.answers_per_b_dataset = num(key, v)?,
            "a_doc_distractors" => self.toy.a_doc_distractors = num(key, v)?,
            "b_content_tokens" => self.toy.b_content_tokens = num(key, v)?,
            "answer_region" => self.toy.answer_region = num(key, v)?,
            "vocab_size" => {
                self.toy.vocab.size = num(key, v)?;
                self.model.vocab.size = self.toy.vocab.size;
            }
            "visual_lo" => {
                self.toy.vocab.visual_lo = num(key, v)?;
                self.model.vocab.visual_lo = self.toy.vocab.visual_lo;
            }
            "visual_hi" => {
                self.toy.vocab.visual_hi = num(key, v)?;
                self.model.vocab.visual_hi = self.toy.vocab.visual_hi;
            }
            "hidden_dim" => self.model.hidden_dim = num(key, v)?,
            "layers" => self.model.layers = num(key, v)?,
            "heads" => self.model.heads = num(key, v)?,
            "max_seq_len" => self.model.max_seq_len = num(key, v)?,
            "tau" => self.train.loss.tau = num(key, v)?,
            "alpha_rep" => self.train.loss.alpha_rep = num(key, v)?,
            "alpha_gen" => self.train.loss.alpha_gen = num(key, v)?,
            "batch_size" => self.train.loss.batch_size = num(key, v)?,
            "m" => self.train.loss.m = num(key, v)?,
            "learning_rate" => self.train.learning_rate = num(key, v)?,
            "epochs" => self.train.epochs = num(key, v)?,
            "contrast_original" => self.train.contrast_original = flag(key, v)?,
            "optimizer" => {
                self.train.optimizer = match v {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::adam(),
                    _ => return Err(format!("`optimizer`: expected sgd or adam, got `{v}`")),
                }
            }
            "batching" => {
                self.train.batching = match v {
                    "mixed" => Batching::Mixed,
                    "per_dataset" => Batching::PerDataset,
                    _ => return Err(format!("`batching`: expected mixed or per_dataset, got `{v}`")),
                }
            }
            "train_mode" => {
                self.train_mode = TrainModeSel::parse(v)
                    .ok_or_else(|| format!("`train_mode`: expected noaug, alwaysaug, adaptive or half, got `{v}`"))?
            }
            "infer_mode" => {
                self.infer_mode = parse_infer_mode(v)
                    .ok_or_else(|| format!("`infer_mode`: expected adaptive, force-embed or force-augment, got `{v}`"))?
            }
            "seed" => {
                let s: u64 = num(key, v)?;
                self.toy_seed = s;
                self.model.seed = s;
                self.train.seed = s;
                self.half_seed = s;
            }
            "toy_seed" => self.toy_seed = num(key, v)?,
            "model_seed" => self.model.seed = num(key, v)?,
            "train_seed" => self.train.seed = num(key, v)?,
            "half_seed" => self.half_seed = num(key, v)?,
            "teacher_url" => self.teacher_url = Some(v.to_string()),
            "mock_teacher" => self.mock_teacher = flag(key, v)?,
            "teacher_timeout_s" => self.teacher_timeout_s = num(key, v)?,
            "teacher_temperature" => self.decoding.temperature = Some(num(key, v)?),
            "teacher_max_tokens" => self.decoding.max_tokens = Some(num(key, v)?),
            "epsilon" => self.epsilon = num(key, v)?,
            "holdout" => self.holdout = num(key, v)?,
            "max_len" => self.max_len = num(key, v)?,
            "baselines" => self.baselines = flag(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Reads `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_file_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| CliError::Config { origin: format!("{origin} line {}", i + 1), msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            self.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config { origin: "config".into(), msg });
        if let Err(e) = self.toy.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.model.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.train.validate() {
            return bad(e.to_string());
        }
        if self.model.vocab != self.toy.vocab {
            return bad("model and toy-suite vocabularies differ".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("`epsilon` must be a non-negative number, got {}", self.epsilon));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return bad(format!("`holdout` must lie in (0, 1), got {}", self.holdout));
        }
        if self.max_len == 0 {
            return bad("`max_len` must be at least 1".into());
        }
        if !(self.teacher_timeout_s > 0.0 && self.teacher_timeout_s.is_finite()) {
            return bad(format!("`teacher_timeout_s` must be positive, got {}", self.teacher_timeout_s));
        }
        if let Some(t) = self.decoding.temperature {
            if !(t >= 0.0 && t.is_finite()) {
                return bad(format!("`teacher_temperature` must be non-negative, got {t}"));
            }
        }
        for (key, p) in [("corpus", &self.corpus), ("sidecar", &self.sidecar), ("labels", &self.labels), ("queries", &self.queries)] {
            if let Some(p) = p {
                if !p.exists() {
                    return bad(format!("`{key}` path {} does not exist", p.display()));
                }
            }
        }
        Ok(())
    }

    fn division_config(&self) -> DivisionConfig {
        DivisionConfig { model: self.model.clone(), train: self.train, epsilon: self.epsilon, holdout: self.holdout, max_len: self.max_len }
    }

    fn in_work(&self, name: &str) -> PathBuf {
        self.work_dir.join(name)
    }
}

/// File names used inside the work directory.
pub mod files {
    pub const TOY_CORPUS: &str = "corpus.jsonl";
    pub const SIDECAR: &str = "sidecar.jsonl";
    pub const SYNTH_CORPUS: &str = "corpus-synth.jsonl";
    pub const SYNTH_FAILURES: &str = "synthesis-failures.jsonl";
    pub const DIVISION: &str = "division";
    pub const LABELS: &str = "labels.txt";
    pub const DIVIDED_CORPUS: &str = "corpus-divided.jsonl";
    pub const COMPARISON: &str = "comparison";

    pub fn checkpoint(mode: &str) -> String {
        format!("model-{mode}.json")
    }

    pub fn train_log(mode: &str) -> String {
        format!("log-{mode}.jsonl")
    }

    /// Report stem; `.txt` and `.json` are appended.
    pub fn report(model: &str, infer: &str) -> String {
        format!("report-{model}-{infer}")
    }
}

fn ensure_work_dir(cfg: &RunConfig, name: &'static str) -> Result<(), CliError> {
    stage(name, std::fs::create_dir_all(&cfg.work_dir).map_err(|source| StageError::Io { path: cfg.work_dir.display().to_string(), source }))
}

fn input(cfg: &RunConfig, name: &'static str, default: &str) -> Result<Corpus, CliError> {
    let path = cfg.corpus.clone().unwrap_or_else(|| cfg.in_work(default));
    if !path.exists() {
        return stage(name, Err(StageError::InputMissing(path.display().to_string())));
    }
    stage(name, load_corpus(&path))
}

fn open_checkpoint(name: &'static str, path: &Path) -> Result<ModelState, CliError> {
    if !path.exists() {
        return stage(name, Err(StageError::CheckpointMissing(path.display().to_string())));
    }
    stage(name, load_checkpoint(path))
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("[aqa] {}", msg.as_ref());
}

/// Writes the toy corpus and its sidecar of ground-truth answers.
pub fn cmd_gen_toy(cfg: &RunConfig) -> Result<(PathBuf, PathBuf), CliError> {
    const S: &str = "gen-toy";
    cfg.validate()?;
    ensure_work_dir(cfg, S)?;
    let suite = stage(S, generate_toy_suite(&cfg.toy, cfg.toy_seed))?;
    let (cp, sp) = (cfg.in_work(files::TOY_CORPUS), cfg.in_work(files::SIDECAR));
    stage(S, save_corpus(&suite.corpus, &cp))?;
    stage(S, suite.sidecar.save(&sp))?;
    progress(format!("{S}: {} samples in {} datasets -> {}", suite.corpus.num_samples(), suite.corpus.datasets.len(), cp.display()));
    Ok((cp, sp))
}

fn teacher(cfg: &RunConfig) -> Result<Box<dyn Teacher>, CliError> {
    const S: &str = "synthesize";
    if cfg.mock_teacher {
        let path = cfg.sidecar.clone().unwrap_or_else(|| cfg.in_work(files::SIDECAR));
        if !path.exists() {
            return stage(S, Err(StageError::InputMissing(path.display().to_string())));
        }
        let sidecar = stage(S, Sidecar::load(&path))?;
        return Ok(Box::new(MockTeacher::new(sidecar.answer_map())));
    }
    let Some(url) = cfg.teacher_url.clone() else {
        let msg = format!("no teacher endpoint configured (set `teacher_url`, {TEACHER_URL_ENV}, or use the mock teacher)");
        return stage(S, Err(SynthesisError::TeacherUnavailable(msg)));
    };
    let mut t = HttpTeacher::new(url);
    t.timeout = Duration::from_secs_f64(cfg.teacher_timeout_s);
    t.decoding = cfg.decoding.clone();
    Ok(Box::new(t))
}

/// Fills augmentation targets from the teacher; failures go to a side file.
pub fn cmd_synthesize(cfg: &RunConfig) -> Result<Corpus, CliError> {
    const S: &str = "synthesize";
    cfg.validate()?;
    ensure_work_dir(cfg, S)?;
    let corpus = input(cfg, S, files::TOY_CORPUS)?;
    let teacher = teacher(cfg)?;
    let out = stage(S, synthesize_augmentations(&corpus.datasets, &corpus.hasher, teacher.as_ref()))?;
    let synth = stage(S, Corpus::new(out.datasets, corpus.vocab, corpus.hasher))?;
    stage(S, save_corpus(&synth, cfg.in_work(files::SYNTH_CORPUS)))?;
    let failures: String = out.failures.iter().map(|f| serde_json::to_string(f).expect("failure serializes") + "\n").collect();
    write_file(S, &cfg.in_work(files::SYNTH_FAILURES), &failures)?;
    progress(format!("{S}: {} samples, {} failures", synth.num_samples(), out.failures.len()));
    Ok(synth)
}

/// Labels datasets, from a label file if given, otherwise by training the
/// NoAug and AlwaysAug baselines. Returns the baseline reports when trained.
pub fn cmd_divide(cfg: &RunConfig) -> Result<(Corpus, Option<(EvalReport, EvalReport)>), CliError> {
    const S: &str = "divide";
    cfg.validate()?;
    ensure_work_dir(cfg, S)?;
    let corpus = input(cfg, S, files::SYNTH_CORPUS)?;
    let (divided, baselines) = if let Some(path) = &cfg.labels {
        let labels = stage(S, load_labels(path))?;
        (stage(S, apply_manual_division(&corpus, &labels))?, None)
    } else {
        progress(format!("{S}: training NoAug and AlwaysAug baselines"));
        let out = stage(S, run_division(&corpus, &cfg.division_config()))?;
        let div = cfg.in_work(files::DIVISION);
        write_file(S, &div.with_extension("txt"), &out.report.to_table())?;
        write_file(S, &div.with_extension("json"), &out.report.to_json())?;
        for (mode, state, report) in [("noaug", &out.noaug.0, &out.noaug.1), ("alwaysaug", &out.always.0, &out.always.1)] {
            stage(S, save_checkpoint(state, cfg.in_work(&files::checkpoint(mode))))?;
            stage(S, emit_report(report, cfg.in_work(&files::report(mode, infer_slug(report.mode)))))?;
        }
        progress(format!("{S}:\n{}", out.report.to_table()));
        (out.corpus, Some((out.noaug.1, out.always.1)))
    };
    let labels = divided.datasets.iter().map(|d| (d.name.clone(), d.aug_required == Some(true))).collect();
    write_file(S, &cfg.in_work(files::LABELS), &labels_to_text(&labels))?;
    stage(S, save_corpus(&divided, cfg.in_work(files::DIVIDED_CORPUS)))?;
    Ok((divided, baselines))
}

/// Trains `cfg.train_mode` on the training split and saves the checkpoint and log.
pub fn cmd_train(cfg: &RunConfig) -> Result<(ModelState, PathBuf), CliError> {
    const S: &str = "train";
    cfg.validate()?;
    ensure_work_dir(cfg, S)?;
    // AlwaysAug and Half need targets on every dataset, so they read the undivided corpus.
    let default = match cfg.train_mode {
        TrainModeSel::NoAug | TrainModeSel::Adaptive => files::DIVIDED_CORPUS,
        TrainModeSel::AlwaysAug | TrainModeSel::Half => files::SYNTH_CORPUS,
    };
    let corpus = input(cfg, S, default)?;
    let (train_split, _) = corpus.split_holdout(cfg.holdout);
    let mode = match cfg.train_mode {
        TrainModeSel::NoAug => TrainMode::NoAug,
        TrainModeSel::AlwaysAug => TrainMode::AlwaysAug,
        TrainModeSel::Adaptive => TrainMode::Adaptive,
        TrainModeSel::Half => TrainMode::HalfRandom(cfg.half_seed),
    };
    progress(format!("{S}: {} on {} samples", mode.name(), train_split.num_samples()));
    let (state, log) = stage(S, train(&train_split, mode, &cfg.model, &cfg.train))?;
    let slug = cfg.train_mode.slug();
    let path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.in_work(&files::checkpoint(slug)));
    stage(S, save_checkpoint(&state, &path))?;
    stage(S, log.save(cfg.in_work(&files::train_log(slug))))?;
    Ok((state, path))
}

/// Evaluates a checkpoint on the held-out split in `cfg.infer_mode`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    const S: &str = "eval";
    cfg.validate()?;
    ensure_work_dir(cfg, S)?;
    let ckpt = cfg.checkpoint.clone().unwrap_or_else(|| cfg.in_work(&files::checkpoint("adaptive")));
    let state = open_checkpoint(S, &ckpt)?;
    let corpus = input(cfg, S, files::DIVIDED_CORPUS)?;
    let (_, held) = corpus.split_holdout(cfg.holdout);
    let (report, _) = stage(S, run_eval(&state, &held.datasets, cfg.infer_mode, cfg.max_len))?;
    let model = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model").trim_start_matches("model-").to_string();
    stage(S, emit_report(&report, cfg.in_work(&files::report(&model, infer_slug(cfg.infer_mode)))))?;
    progress(format!("{S}:\n{}", report.to_table()));
    Ok(report)
}

/// One line of an `embed` query file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub id: String,
    pub query: Content,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorRecord {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Query file for every sample of the corpus, one JSON object per line.
pub fn queries_to_jsonl(corpus: &Corpus) -> String {
    corpus
        .datasets
        .iter()
        .flat_map(|d| &d.samples)
        .map(|s| serde_json::to_string(&QueryRecord { id: s.id.clone(), query: s.query.clone() }).expect("query serializes") + "\n")
        .collect()
}

/// Embeds every query of `queries` in `cfg.infer_mode`, writing
/// `<stem>-vectors.jsonl` and `<stem>-traces.jsonl`.
pub fn cmd_embed(cfg: &RunConfig, queries: &Path) -> Result<Vec<TraceRecord>, CliError> {
    const S: &str = "embed";
    cfg.validate()?;
    ensure_work_dir(cfg, S)?;
    let ckpt = cfg.checkpoint.clone().unwrap_or_else(|| cfg.in_work(&files::checkpoint("adaptive")));
    let state = open_checkpoint(S, &ckpt)?;
    let text = stage(S, std::fs::read_to_string(queries).map_err(|source| StageError::Io { path: queries.display().to_string(), source }))?;
    let format = |line: usize, msg: String| CliError::Stage { stage: S, source: StageError::Format { path: queries.display().to_string(), line, msg } };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(line).map_err(|e| format(i + 1, e.to_string()))?;
        rec.query.validate(&state.config.vocab).map_err(|e| format(i + 1, e.to_string()))?;
        if rec.query.is_empty() {
            return Err(format(i + 1, "query is empty".into()));
        }
        records.push(rec);
    }
    let mut vectors = String::new();
    let mut traces = String::new();
    let mut out = Vec::with_capacity(records.len());
    for rec in &records {
        let (emb, trace) = stage(S, embed_adaptive(&state, &rec.query, cfg.infer_mode, cfg.max_len))?;
        let tr = TraceRecord::new(&rec.id, &trace);
        vectors.push_str(&(serde_json::to_string(&VectorRecord { id: rec.id.clone(), vector: emb.into_inner() }).expect("vector serializes") + "\n"));
        traces.push_str(&(serde_json::to_string(&tr).expect("trace serializes") + "\n"));
        out.push(tr);
    }
    let stem = cfg.output.clone().unwrap_or_else(|| cfg.in_work(&format!("embed-{}", infer_slug(cfg.infer_mode))));
    let name = stem.file_name().and_then(|s| s.to_str()).unwrap_or("embed").to_string();
    write_file(S, &stem.with_file_name(format!("{name}-vectors.jsonl")), &vectors)?;
    write_file(S, &stem.with_file_name(format!("{name}-traces.jsonl")), &traces)?;
    progress(format!("{S}: {} queries", out.len()));
    Ok(out)
}

/// gen-toy (unless a corpus is given) → synthesize → divide → train Adaptive →
/// eval in all inference modes, plus the baselines when enabled.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<ComparisonReport, CliError> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    if cfg.corpus.is_none() {
        cmd_gen_toy(&cfg)?;
    }
    cmd_synthesize(&cfg)?;
    let synth = cfg.in_work(files::SYNTH_CORPUS);
    cfg.corpus = Some(synth.clone());
    let (_, baselines) = cmd_divide(&cfg)?;
    let divided = cfg.in_work(files::DIVIDED_CORPUS);

    let mut rows = Vec::new();
    if cfg.baselines {
        if let Some((noaug, always)) = baselines {
            rows.push(ComparisonRow { label: "NoAug".into(), report: noaug });
            rows.push(ComparisonRow { label: "AlwaysAug".into(), report: always });
        } else {
            for (sel, infer, label) in [(TrainModeSel::NoAug, InferenceMode::ForceEmbed, "NoAug"), (TrainModeSel::AlwaysAug, InferenceMode::ForceAugment, "AlwaysAug")] {
                let c = RunConfig { train_mode: sel, corpus: Some(if sel == TrainModeSel::NoAug { divided.clone() } else { synth.clone() }), checkpoint: None, ..cfg.clone() };
                let (_, ckpt) = cmd_train(&c)?;
                let report = cmd_eval(&RunConfig { infer_mode: infer, checkpoint: Some(ckpt), corpus: Some(divided.clone()), ..cfg.clone() })?;
                rows.push(ComparisonRow { label: label.into(), report });
            }
        }
    }

    let (_, adaptive) = cmd_train(&RunConfig { train_mode: TrainModeSel::Adaptive, corpus: Some(divided.clone()), checkpoint: None, ..cfg.clone() })?;
    let eval = |mode: InferenceMode, ckpt: &Path| cmd_eval(&RunConfig { infer_mode: mode, checkpoint: Some(ckpt.to_path_buf()), corpus: Some(divided.clone()), ..cfg.clone() });
    rows.push(ComparisonRow { label: "Adaptive".into(), report: eval(InferenceMode::Adaptive, &adaptive)? });
    if cfg.baselines {
        let (_, half) = cmd_train(&RunConfig { train_mode: TrainModeSel::Half, corpus: Some(synth.clone()), checkpoint: None, ..cfg.clone() })?;
        rows.push(ComparisonRow { label: "Half".into(), report: eval(InferenceMode::Adaptive, &half)? });
    }
    rows.push(ComparisonRow { label: "ForceEmbed".into(), report: eval(InferenceMode::ForceEmbed, &adaptive)? });
    rows.push(ComparisonRow { label: "ForceAugment".into(), report: eval(InferenceMode::ForceAugment, &adaptive)? });

    let report = ComparisonReport { rows };
    stage("pipeline", report.emit(cfg.in_work(files::COMPARISON)))?;
    progress(format!("pipeline:\n{}", report.to_table()));
    Ok(report)
}

#[derive(Debug, Parser)]
#[command(name = "aqa", version, about = "Adaptive query augmentation: synthesis, division, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct CommonArgs {
    /// Flat `key = value` settings file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Extra setting, applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Directory for all stage inputs and outputs.
    #[arg(long)]
    pub work_dir: Option<PathBuf>,
    /// Sets the toy, model, training and Half seeds together.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input corpus instead of the stage's default file.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Model checkpoint for eval and embed
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Teacher endpoint for synthesis.
    #[arg(long, env = TEACHER_URL_ENV)]
    pub teacher_url: Option<String>,
    /// Answer from the toy sidecar instead of calling a teacher.
    #[arg(long)]
    pub mock_teacher: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic toy suite and its answer sidecar.
    GenToy(CommonArgs),
    /// Fill augmentation targets from the teacher.
    Synthesize(CommonArgs),
    /// Label datasets as augmentation-requiring or not.
    Divide {
        #[command(flatten)]
        common: CommonArgs,
        /// Manual labels (`name true|false` per line) instead of training baselines.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Train one model variant.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// noaug, alwaysaug, adaptive or half.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// adaptive, force-embed or force-augment.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Embed queries from a JSONL file and record routing traces.
    Embed {
        #[command(flatten)]
        common: CommonArgs,
        /// JSONL with one `{"id", "query"}` object per line
        #[arg(long)]
        queries: PathBuf,
        /// adaptive, force-embed or force-augment.
        #[arg(long)]
        mode: Option<String>,
        /// Output stem; `-vectors.jsonl` and `-traces.jsonl` are appended.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run every stage and write a comparison report.
    Pipeline(CommonArgs),
}

/// Builds the effective configuration: defaults, then the file, then flags.
pub fn resolve(common: &CommonArgs, extra: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config { origin: path.display().to_string(), msg: e.to_string() })?;
        cfg.apply_file_text(&text, &path.display().to_string())?;
    }
    let flag_err = |msg: String| CliError::Config { origin: "flag".into(), msg };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| flag_err(format!("`--set {kv}`: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim()).map_err(flag_err)?;
    }
    let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let flags = [
        ("work_dir", path_str(&common.work_dir)),
        ("seed", common.seed.map(|s| s.to_string())),
        ("corpus", path_str(&common.corpus)),
        ("checkpoint", path_str(&common.checkpoint)),
        ("teacher_url", common.teacher_url.clone()),
        ("mock_teacher", common.mock_teacher.then(|| "true".to_string())),
    ];
    for (k, v) in flags.iter().chain(extra) {
        if let Some(v) = v {
            cfg.set(k, v).map_err(flag_err)?;
        }
    }
    Ok(cfg)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: &Command) -> Result<(), CliError> {
    let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    match cmd {
        Command::GenToy(c) => cmd_gen_toy(&resolve(c, &[])?).map(drop),
        Command::Synthesize(c) => cmd_synthesize(&resolve(c, &[])?).map(drop),
        Command::Divide { common, labels } => cmd_divide(&resolve(common, &[("labels", path_str(labels))])?).map(drop),
        Command::Train { common, mode } => cmd_train(&resolve(common, &[("train_mode", mode.clone())])?).map(drop),
        Command::Eval { common, mode } => cmd_eval(&resolve(common, &[("infer_mode", mode.clone())])?).map(drop),
        Command::Embed { common, queries, mode, output } => {
            let cfg = resolve(common, &[("infer_mode", mode.clone()), ("output", path_str(output))])?;
            if !queries.exists() {
                return Err(CliError::Config { origin: "flag".into(), msg: format!("`--queries` path {} does not exist", queries.display()) });
            }
            cmd_embed(&cfg, queries).map(drop)
        }
        Command::Pipeline(c) => cmd_pipeline(&resolve(c, &[])?).map(drop),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let mut cfg = RunConfig::default();
        cfg.apply_file_text("# comment\nepochs = 3\n\nseed=7\ninfer_mode = force-embed\n", "test").unwrap();
        assert_eq!((cfg.train.epochs, cfg.toy_seed, cfg.model.seed, cfg.infer_mode), (3, 7, 7, InferenceMode::ForceEmbed));
        cfg.set("epochs", "5").unwrap();
        assert_eq!(cfg.train.epochs, 5);
        let err = cfg.apply_file_text("epochs 3", "f").unwrap_err();
        assert!(matches!(&err, CliError::Config { origin, .. } if origin == "f line 1"));
        assert!(cfg.set("nope", "1").unwrap_err().contains("nope"));
        assert!(cfg.set("epochs", "x").unwrap_err().contains("epochs"));
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.set("a_datasets", "1").unwrap();
        let e = cfg.validate().unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("a_datasets"));
        let mut cfg = RunConfig::default();
        cfg.set("holdout", "1.5").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("holdout"));
    }

    #[test]
    fn clap_surface() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        assert_eq!(run(["aqa", "frobnicate"]), 1);
        assert_eq!(run(["aqa", "--help"]), 0);
    }
}
