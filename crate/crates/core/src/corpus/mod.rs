//! Queries, documents, training samples and datasets.
//!
//! Every content item is a pair of token sequences (visual then text) with a
//! modality tag. A [`Dataset`] carries an optional augmentation-requirement
//! label that is unset until division runs.

mod io;
pub mod toy;

pub use io::{load_corpus, parse_corpus, save_corpus, to_jsonl};
pub use toy::{generate_toy_suite, Family, Sidecar, SidecarEntry, ToySuite, ToySuiteConfig};

use crate::vocab::{TokenId, Vocabulary, WordHasher};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Interleaved,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Content {
    pub text: Vec<TokenId>,
    pub visual: Vec<TokenId>,
    pub modality: Modality,
}

impl Content {
    pub fn text(tokens: Vec<TokenId>) -> Self {
        Self { text: tokens, visual: Vec::new(), modality: Modality::Text }
    }

    pub fn image(tokens: Vec<TokenId>) -> Self {
        Self { text: Vec::new(), visual: tokens, modality: Modality::Image }
    }

    pub fn interleaved(visual: Vec<TokenId>, text: Vec<TokenId>) -> Self {
        Self { text, visual, modality: Modality::Interleaved }
    }

    /// Model input order: visual tokens first, then text.
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.visual);
        out.extend_from_slice(&self.text);
        out
    }

    pub fn len(&self) -> usize {
        self.text.len() + self.visual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), RecordError> {
        match self.modality {
            Modality::Text if !self.visual.is_empty() || self.text.is_empty() => {
                return Err(RecordError::ModalityMismatch(self.modality))
            }
            Modality::Image if !self.text.is_empty() || self.visual.is_empty() => {
                return Err(RecordError::ModalityMismatch(self.modality))
            }
            Modality::Interleaved if self.text.is_empty() || self.visual.is_empty() => {
                return Err(RecordError::ModalityMismatch(self.modality))
            }
            _ => {}
        }
        for &t in &self.text {
            if !vocab.is_text(t) {
                return Err(RecordError::TokenOutOfRange { token: t, expected: "text" });
            }
        }
        for &t in &self.visual {
            if !vocab.is_visual(t) {
                return Err(RecordError::TokenOutOfRange { token: t, expected: "visual" });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AugTarget {
    AugmentWith(Vec<TokenId>),
    EmbedOnly,
}

impl AugTarget {
    pub fn is_augment(&self) -> bool {
        matches!(self, AugTarget::AugmentWith(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSample {
    pub id: String,
    pub query: Content,
    pub aug_target: AugTarget,
    pub positive: Content,
    pub hard_negatives: Vec<Content>,
}

impl TrainingSample {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), RecordError> {
        self.query.validate(vocab)?;
        self.positive.validate(vocab)?;
        for n in &self.hard_negatives {
            n.validate(vocab)?;
        }
        if let AugTarget::AugmentWith(g) = &self.aug_target {
            if g.is_empty() {
                return Err(RecordError::EmptyAugmentation);
            }
            for &t in g {
                if !vocab.is_text(t) {
                    return Err(RecordError::TokenOutOfRange { token: t, expected: "text" });
                }
            }
        }
        if self.hard_negatives.contains(&self.positive) {
            return Err(RecordError::NegativeEqualsPositive);
        }
        let mut seen = HashSet::new();
        if !self.hard_negatives.iter().all(|n| seen.insert(n)) {
            return Err(RecordError::DuplicateNegative);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<TrainingSample>,
    pub aug_required: Option<bool>,
}

impl Dataset {
    /// Splits off the last `fraction` of samples (by id order) as a held-out slice.
    pub fn split_holdout(&self, fraction: f64) -> (Dataset, Dataset) {
        let mut sorted: Vec<&TrainingSample> = self.samples.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let n = sorted.len();
        let held = ((n as f64) * fraction).round().clamp(0.0, n as f64) as usize;
        let cut = n - held;
        let part = |s: &[&TrainingSample]| Dataset {
            name: self.name.clone(),
            samples: s.iter().map(|x| (*x).clone()).collect(),
            aug_required: self.aug_required,
        };
        (part(&sorted[..cut]), part(&sorted[cut..]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub datasets: Vec<Dataset>,
    pub vocab: Vocabulary,
    /// Word→id scheme used to tokenize teacher answers.
    pub hasher: WordHasher,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordError {
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("token {token} is not a valid {expected} token")]
    TokenOutOfRange { token: TokenId, expected: &'static str },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("content tokens do not match modality {0:?}")]
    ModalityMismatch(Modality),
    #[error("augmentation payload is empty")]
    EmptyAugmentation,
    #[error("a hard negative equals the positive")]
    NegativeEqualsPositive,
    #[error("hard negatives are not distinct")]
    DuplicateNegative,
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("malformed record: {0}")]
    Malformed(String),
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: {kind}")]
    Record { line: usize, kind: RecordError },
    #[error("sample `{id}`: {kind}")]
    Sample { id: String, kind: RecordError },
    #[error("dataset `{name}` is empty (declared on line {line})")]
    EmptyDataset { name: String, line: usize },
    #[error("duplicate dataset name `{0}`")]
    DuplicateDataset(String),
    #[error(transparent)]
    Vocab(#[from] crate::vocab::VocabError),
    #[error("invalid toy-suite config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Corpus {
    pub fn new(datasets: Vec<Dataset>, vocab: Vocabulary, hasher: WordHasher) -> Result<Self, CorpusError> {
        let c = Self { datasets, vocab, hasher };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        self.vocab.validate()?;
        let mut names = HashSet::new();
        for d in &self.datasets {
            if !names.insert(d.name.as_str()) {
                return Err(CorpusError::DuplicateDataset(d.name.clone()));
            }
            if d.samples.is_empty() {
                return Err(CorpusError::EmptyDataset { name: d.name.clone(), line: 0 });
            }
            let mut ids = HashSet::new();
            for s in &d.samples {
                if !ids.insert(s.id.as_str()) {
                    return Err(CorpusError::Sample { id: s.id.clone(), kind: RecordError::DuplicateId(s.id.clone()) });
                }
                s.validate(&self.vocab).map_err(|kind| CorpusError::Sample { id: s.id.clone(), kind })?;
            }
        }
        Ok(())
    }

    pub fn dataset(&self, name: &str) -> Option<&Dataset> {
        self.datasets.iter().find(|d| d.name == name)
    }

    pub fn num_samples(&self) -> usize {
        self.datasets.iter().map(|d| d.samples.len()).sum()
    }

    /// Splits every dataset into (train, held-out) corpora.
    pub fn split_holdout(&self, fraction: f64) -> (Corpus, Corpus) {
        let (train, held): (Vec<_>, Vec<_>) = self.datasets.iter().map(|d| d.split_holdout(fraction)).unzip();
        (
            Corpus { datasets: train, vocab: self.vocab, hasher: self.hasher },
            Corpus { datasets: held, vocab: self.vocab, hasher: self.hasher },
        )
    }
}

/// Deduplicated union of all positives and hard negatives in first-appearance order.
pub fn build_candidate_pool(dataset: &Dataset) -> Vec<Content> {
    let mut seen: HashSet<&Content> = HashSet::new();
    let mut pool = Vec::new();
    for s in &dataset.samples {
        for c in std::iter::once(&s.positive).chain(&s.hard_negatives) {
            if seen.insert(c) {
                pool.push(c.clone());
            }
        }
    }
    pool
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, pos: Vec<TokenId>, neg: Vec<TokenId>) -> TrainingSample {
        TrainingSample {
            id: id.into(),
            query: Content::text(vec![10, 11]),
            aug_target: AugTarget::EmbedOnly,
            positive: Content::text(pos),
            hard_negatives: vec![Content::text(neg)],
        }
    }

    #[test]
    fn pool_dedups_shared_positive() {
        let d = Dataset {
            name: "d".into(),
            samples: vec![sample("a", vec![20], vec![21]), sample("b", vec![20], vec![22])],
            aug_required: None,
        };
        let pool = build_candidate_pool(&d);
        assert_eq!(pool.len(), 3);
        assert_eq!(pool.iter().filter(|c| c.text == vec![20]).count(), 1);
    }

    #[test]
    fn pool_counts_distinct_docs_in_order() {
        let d = Dataset {
            name: "d".into(),
            samples: vec![
                sample("a", vec![20], vec![21]),
                sample("b", vec![22], vec![23]),
                sample("c", vec![24], vec![25]),
            ],
            aug_required: None,
        };
        let pool = build_candidate_pool(&d);
        assert_eq!(pool.len(), 6);
        assert_eq!(pool[0], d.samples[0].positive);
        for s in &d.samples {
            assert!(pool.contains(&s.positive));
        }
    }

    #[test]
    fn modality_invariants() {
        let v = Vocabulary::default();
        assert!(Content::text(vec![10]).validate(&v).is_ok());
        assert!(Content::image(vec![400]).validate(&v).is_ok());
        assert!(Content::interleaved(vec![400], vec![10]).validate(&v).is_ok());
        assert!(Content::image(vec![10]).validate(&v).is_err());
        let bad = Content { text: vec![10], visual: vec![400], modality: Modality::Text };
        assert_eq!(bad.validate(&v), Err(RecordError::ModalityMismatch(Modality::Text)));
        assert!(Content::interleaved(vec![], vec![10]).validate(&v).is_err());
    }

    #[test]
    fn sample_rejects_negative_equal_to_positive() {
        let v = Vocabulary::default();
        let s = sample("a", vec![20], vec![20]);
        assert_eq!(s.validate(&v), Err(RecordError::NegativeEqualsPositive));
        let mut s = sample("a", vec![20], vec![21]);
        s.hard_negatives.push(Content::text(vec![21]));
        assert_eq!(s.validate(&v), Err(RecordError::DuplicateNegative));
        s.hard_negatives.pop();
        s.aug_target = AugTarget::AugmentWith(vec![crate::vocab::AUGMENT]);
        assert!(matches!(s.validate(&v), Err(RecordError::TokenOutOfRange { .. })));
    }

    #[test]
    fn holdout_takes_tail_by_id() {
        let samples = (0..10).rev().map(|i| sample(&format!("s{i:02}"), vec![20 + i], vec![40 + i])).collect();
        let d = Dataset { name: "d".into(), samples, aug_required: None };
        let (train, held) = d.split_holdout(0.2);
        assert_eq!(train.samples.len(), 8);
        assert_eq!(held.samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), vec!["s08", "s09"]);
    }
}
