//! Dataset-level split into augmentation-requiring and embed-only datasets.

use crate::corpus::{AugTarget, Corpus};
use crate::evaluation::{run_eval, EvalError, EvalReport};
use crate::model::{ModelConfig, ModelState};
use crate::routing::{InferenceMode, DEFAULT_MAX_LEN};
use crate::training::{train, TrainConfig, TrainError, TrainMode};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub const DEFAULT_HOLDOUT: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum DivisionError {
    #[error("dataset `{0}` has an empty held-out split")]
    InsufficientHeldout(String),
    #[error("label names unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("no label for dataset `{0}`")]
    MissingLabel(String),
    #[error("label file line {line}: {msg}")]
    MalformedLabel { line: usize, msg: String },
    #[error("invalid division config: {0}")]
    InvalidConfig(String),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("evaluation: {0}")]
    Eval(#[from] EvalError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Requiring,
    NotRequiring,
}

/// NotRequiring iff `p1_noaug + epsilon >= p1_always`.
pub fn decide(p1_noaug: f64, p1_always: f64, epsilon: f64) -> Decision {
    if p1_noaug + epsilon >= p1_always {
        Decision::NotRequiring
    } else {
        Decision::Requiring
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivisionRow {
    pub name: String,
    pub p1_noaug: f64,
    pub p1_always: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivisionReport {
    pub epsilon: f64,
    pub rows: Vec<DivisionRow>,
}

impl DivisionReport {
    pub fn labels(&self) -> BTreeMap<String, bool> {
        self.rows.iter().map(|r| (r.name.clone(), r.decision == Decision::Requiring)).collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("epsilon: {}\n", self.epsilon);
        let _ = writeln!(out, "{:<28} {:>9} {:>9}  decision", "dataset", "P@1 none", "P@1 aug");
        for r in &self.rows {
            let _ = writeln!(out, "{:<28} {:>9.1} {:>9.1}  {:?}", r.name, 100.0 * r.p1_noaug, 100.0 * r.p1_always, r.decision);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("division report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivisionConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epsilon: f64,
    pub holdout: f64,
    pub max_len: usize,
}

impl Default for DivisionConfig {
    fn default() -> Self {
        Self { model: ModelConfig::default(), train: TrainConfig::default(), epsilon: 0.0, holdout: DEFAULT_HOLDOUT, max_len: DEFAULT_MAX_LEN }
    }
}

impl DivisionConfig {
    /// Toy-scale model and [`TrainConfig::toy`] recipe.
    pub fn toy(seed: u64) -> Self {
        Self { model: ModelConfig { hidden_dim: 32, seed, ..ModelConfig::default() }, train: TrainConfig::toy(seed), ..Self::default() }
    }
}

/// Everything a division run produces; the baselines are kept for reuse.
#[derive(Debug, Clone)]
pub struct DivisionOutcome {
    pub report: DivisionReport,
    pub corpus: Corpus,
    pub noaug: (ModelState, EvalReport),
    pub always: (ModelState, EvalReport),
}

/// Trains NoAug and AlwaysAug on the training split, compares held-out P@1
/// per dataset, and labels the corpus.
pub fn run_division(corpus: &Corpus, cfg: &DivisionConfig) -> Result<DivisionOutcome, DivisionError> {
    if !(cfg.epsilon >= 0.0) || !(cfg.holdout > 0.0 && cfg.holdout < 1.0) {
        return Err(DivisionError::InvalidConfig("epsilon must be non-negative and holdout in (0, 1)".into()));
    }
    let (train_split, held) = corpus.split_holdout(cfg.holdout);
    if let Some(d) = held.datasets.iter().find(|d| d.samples.is_empty()) {
        return Err(DivisionError::InsufficientHeldout(d.name.clone()));
    }
    let (noaug_state, _) = train(&train_split, TrainMode::NoAug, &cfg.model, &cfg.train)?;
    let (always_state, _) = train(&train_split, TrainMode::AlwaysAug, &cfg.model, &cfg.train)?;
    let (noaug_rep, _) = run_eval(&noaug_state, &held.datasets, InferenceMode::ForceEmbed, cfg.max_len)?;
    let (always_rep, _) = run_eval(&always_state, &held.datasets, InferenceMode::ForceAugment, cfg.max_len)?;
    let rows: Vec<DivisionRow> = noaug_rep
        .datasets
        .iter()
        .zip(&always_rep.datasets)
        .map(|(a, b)| DivisionRow { name: a.name.clone(), p1_noaug: a.p_at_1, p1_always: b.p_at_1, decision: decide(a.p_at_1, b.p_at_1, cfg.epsilon) })
        .collect();
    let report = DivisionReport { epsilon: cfg.epsilon, rows };
    let labelled = apply_manual_division(corpus, &report.labels())?;
    Ok(DivisionOutcome { report, corpus: labelled, noaug: (noaug_state, noaug_rep), always: (always_state, always_rep) })
}

/// Applies `name → requires augmentation`; embed-only datasets lose their targets.
pub fn apply_manual_division(corpus: &Corpus, labels: &BTreeMap<String, bool>) -> Result<Corpus, DivisionError> {
    if let Some(name) = labels.keys().find(|k| corpus.dataset(k).is_none()) {
        return Err(DivisionError::UnknownDataset(name.clone()));
    }
    let mut out = corpus.clone();
    for d in &mut out.datasets {
        let req = *labels.get(&d.name).ok_or_else(|| DivisionError::MissingLabel(d.name.clone()))?;
        d.aug_required = Some(req);
        if !req {
            d.samples.iter_mut().for_each(|s| s.aug_target = AugTarget::EmbedOnly);
        }
    }
    Ok(out)
}

/// Parses lines of `dataset_name true|false`; blank lines and `#` comments are skipped.
pub fn parse_labels(text: &str) -> Result<BTreeMap<String, bool>, DivisionError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| DivisionError::MalformedLabel { line: i + 1, msg: msg.into() };
        let mut parts = line.split_whitespace();
        let (Some(name), Some(flag), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected `dataset_name true|false`"));
        };
        let v = match flag {
            "true" => true,
            "false" => false,
            _ => return Err(bad("label must be `true` or `false`")),
        };
        if out.insert(name.to_string(), v).is_some() {
            return Err(bad("dataset labelled twice"));
        }
    }
    Ok(out)
}

pub fn labels_to_text(labels: &BTreeMap<String, bool>) -> String {
    labels.iter().map(|(k, v)| format!("{k} {v}\n")).collect()
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, bool>, DivisionError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DivisionError::Io { path: path.display().to_string(), source })?;
    parse_labels(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_toy_suite, ToySuiteConfig};

    #[test]
    fn rule_arithmetic() {
        assert_eq!(decide(0.70, 0.70, 0.0), Decision::NotRequiring);
        assert_eq!(decide(0.60, 0.66, 0.01), Decision::Requiring);
        assert_eq!(decide(0.60, 0.66, 0.07), Decision::NotRequiring);
        let mut flipped = false;
        for k in 0..=40 {
            let d = decide(k as f64 * 0.025, 0.55, 0.0);
            assert!(!(flipped && d == Decision::Requiring));
            flipped |= d == Decision::NotRequiring;
        }
        assert!(flipped);
    }

    fn corpus() -> Corpus {
        let mut c = generate_toy_suite(&ToySuiteConfig { samples_per_dataset: 16, keys_per_slot: 4, ..Default::default() }, 0).unwrap().corpus;
        for d in &mut c.datasets {
            d.samples.iter_mut().for_each(|s| s.aug_target = AugTarget::AugmentWith(vec![s.positive.text[0]]));
        }
        c
    }

    #[test]
    fn manual_labels() {
        let c = corpus();
        let mut labels: BTreeMap<String, bool> = c.datasets.iter().map(|d| (d.name.clone(), d.name.contains("_a"))).collect();
        let out = apply_manual_division(&c, &labels).unwrap();
        for d in &out.datasets {
            assert_eq!(d.aug_required, Some(d.name.contains("_a")));
            assert!(d.samples.iter().all(|s| s.aug_target.is_augment() == d.name.contains("_a")));
        }
        labels.insert("nope".into(), true);
        assert!(matches!(apply_manual_division(&c, &labels), Err(DivisionError::UnknownDataset(n)) if n == "nope"));
        labels.remove("nope");
        let first = c.datasets[0].name.clone();
        labels.remove(&first);
        assert!(matches!(apply_manual_division(&c, &labels), Err(DivisionError::MissingLabel(n)) if n == first));
    }

    #[test]
    fn label_file_format() {
        let parsed = parse_labels("ChartQA true\nDocVQA true\n\nVisDial false\n").unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parse_labels(&labels_to_text(&parsed)).unwrap(), parsed);
        assert!(matches!(parse_labels("a maybe"), Err(DivisionError::MalformedLabel { line: 1, .. })));
        assert!(matches!(parse_labels("a true\na false"), Err(DivisionError::MalformedLabel { line: 2, .. })));
    }

    #[test]
    fn empty_holdout_rejected() {
        let mut c = corpus();
        c.datasets[0].samples.truncate(2);
        let cfg = DivisionConfig { holdout: 0.2, ..Default::default() };
        assert!(matches!(run_division(&c, &cfg), Err(DivisionError::InsufficientHeldout(_))));
    }
}
