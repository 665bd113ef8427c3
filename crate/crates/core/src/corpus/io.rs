//! Line-delimited dataset files.
//!
//! Line 1 is a header object `{"corpus": {...}}` carrying the vocabulary
//! layout, the answer hasher, and the ordered dataset list with labels.
//! Every following line is one sample record.

use super::{AugTarget, Content, Corpus, CorpusError, Dataset, Modality, RecordError, TrainingSample};
use crate::vocab::{TokenId, Vocabulary, WordHasher};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{HashMap, HashSet};
use std::path::Path;

const FORMAT: &str = "aqa-corpus";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    corpus: Header,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    vocab: Vocabulary,
    hasher: WordHasher,
    datasets: Vec<DatasetDecl>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetDecl {
    name: String,
    aug_required: Option<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContentRecord {
    text: Vec<TokenId>,
    visual: Vec<TokenId>,
    modality: Modality,
}

#[derive(Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum AugKind {
    Augment,
    Embed,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AugRecord {
    kind: AugKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<Vec<TokenId>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    dataset: String,
    query: ContentRecord,
    aug_target: AugRecord,
    positive: ContentRecord,
    negatives: Vec<ContentRecord>,
}

impl From<&Content> for ContentRecord {
    fn from(c: &Content) -> Self {
        Self { text: c.text.clone(), visual: c.visual.clone(), modality: c.modality }
    }
}

impl From<ContentRecord> for Content {
    fn from(c: ContentRecord) -> Self {
        Self { text: c.text, visual: c.visual, modality: c.modality }
    }
}

const CONTENT_FIELDS: [&str; 3] = ["text", "visual", "modality"];

fn check_fields(v: &Value) -> Result<(), RecordError> {
    let obj = v.as_object().ok_or_else(|| RecordError::Malformed("record is not an object".into()))?;
    for f in ["id", "dataset", "query", "aug_target", "positive", "negatives"] {
        if !obj.contains_key(f) {
            return Err(RecordError::MissingField(f.into()));
        }
    }
    let content = |name: &str, c: &Value| -> Result<(), RecordError> {
        let o = c.as_object().ok_or_else(|| RecordError::Malformed(format!("`{name}` is not an object")))?;
        for f in CONTENT_FIELDS {
            if !o.contains_key(f) {
                return Err(RecordError::MissingField(format!("{name}.{f}")));
            }
        }
        Ok(())
    };
    content("query", &obj["query"])?;
    content("positive", &obj["positive"])?;
    if let Some(negs) = obj["negatives"].as_array() {
        for (i, n) in negs.iter().enumerate() {
            content(&format!("negatives[{i}]"), n)?;
        }
    }
    match obj["aug_target"].get("kind") {
        None => return Err(RecordError::MissingField("aug_target.kind".into())),
        Some(k) if k == "augment" && obj["aug_target"].get("text").is_none() => {
            return Err(RecordError::MissingField("aug_target.text".into()))
        }
        _ => {}
    }
    Ok(())
}

fn parse_record(line: &str) -> Result<SampleRecord, RecordError> {
    let v: Value = serde_json::from_str(line).map_err(|e| RecordError::Malformed(e.to_string()))?;
    check_fields(&v)?;
    serde_json::from_value(v).map_err(|e| RecordError::Malformed(e.to_string()))
}

fn to_sample(r: SampleRecord) -> Result<TrainingSample, RecordError> {
    let aug_target = match (r.aug_target.kind, r.aug_target.text) {
        (AugKind::Augment, Some(t)) => AugTarget::AugmentWith(t),
        (AugKind::Augment, None) => return Err(RecordError::MissingField("aug_target.text".into())),
        (AugKind::Embed, None) => AugTarget::EmbedOnly,
        (AugKind::Embed, Some(_)) => return Err(RecordError::Malformed("embed target must not carry text".into())),
    };
    Ok(TrainingSample {
        id: r.id,
        query: r.query.into(),
        aug_target,
        positive: r.positive.into(),
        hard_negatives: r.negatives.into_iter().map(Into::into).collect(),
    })
}

/// Parses a corpus from its line-delimited text form.
pub fn parse_corpus(text: &str) -> Result<Corpus, CorpusError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines
        .next()
        .ok_or(CorpusError::Record { line: 1, kind: RecordError::MissingField("corpus".into()) })?;
    let header: HeaderLine = serde_json::from_str(first)
        .map_err(|e| CorpusError::Record { line: 1, kind: RecordError::Malformed(e.to_string()) })?;
    let header = header.corpus;
    if header.format != FORMAT || header.version != VERSION {
        return Err(CorpusError::Record {
            line: 1,
            kind: RecordError::Malformed(format!("unsupported format {} v{}", header.format, header.version)),
        });
    }
    header.vocab.validate()?;

    let mut datasets: Vec<Dataset> = Vec::new();
    let mut index = HashMap::new();
    for d in &header.datasets {
        if index.insert(d.name.clone(), datasets.len()).is_some() {
            return Err(CorpusError::DuplicateDataset(d.name.clone()));
        }
        datasets.push(Dataset { name: d.name.clone(), samples: Vec::new(), aug_required: d.aug_required });
    }
    let mut ids: Vec<HashSet<String>> = vec![HashSet::new(); datasets.len()];

    for (line, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let at = |kind| CorpusError::Record { line, kind };
        let rec = parse_record(raw).map_err(at)?;
        let di = *index.get(&rec.dataset).ok_or_else(|| at(RecordError::UnknownDataset(rec.dataset.clone())))?;
        if !ids[di].insert(rec.id.clone()) {
            return Err(at(RecordError::DuplicateId(rec.id)));
        }
        let sample = to_sample(rec).map_err(at)?;
        sample.validate(&header.vocab).map_err(at)?;
        datasets[di].samples.push(sample);
    }
    if let Some(d) = datasets.iter().find(|d| d.samples.is_empty()) {
        return Err(CorpusError::EmptyDataset { name: d.name.clone(), line: 1 });
    }
    Ok(Corpus { datasets, vocab: header.vocab, hasher: header.hasher })
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    parse_corpus(&text)
}

/// Serializes a corpus; output is byte-stable for equal corpora.
pub fn to_jsonl(corpus: &Corpus) -> String {
    let header = HeaderLine {
        corpus: Header {
            format: FORMAT.into(),
            version: VERSION,
            vocab: corpus.vocab,
            hasher: corpus.hasher,
            datasets: corpus
                .datasets
                .iter()
                .map(|d| DatasetDecl { name: d.name.clone(), aug_required: d.aug_required })
                .collect(),
        },
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for d in &corpus.datasets {
        for s in &d.samples {
            let aug_target = match &s.aug_target {
                AugTarget::AugmentWith(t) => AugRecord { kind: AugKind::Augment, text: Some(t.clone()) },
                AugTarget::EmbedOnly => AugRecord { kind: AugKind::Embed, text: None },
            };
            let rec = SampleRecord {
                id: s.id.clone(),
                dataset: d.name.clone(),
                query: (&s.query).into(),
                aug_target,
                positive: (&s.positive).into(),
                negatives: s.hard_negatives.iter().map(Into::into).collect(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
    }
    out
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    std::fs::write(path, to_jsonl(corpus)).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
}
