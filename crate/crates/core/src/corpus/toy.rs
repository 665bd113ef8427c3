//! Deterministic synthetic suite with known "augmentation helps / hurts" structure.
//!
//! Two dataset families are generated:
//!
//! * **A-family** – the query holds key tokens; the positive document holds the
//!   *answer* tokens that a per-dataset lookup assigns to those keys, mixed with
//!   unrelated answer words, and no query token at all. Hard negatives hold
//!   another key pair's answer plus a query distractor token, so raw overlap
//!   points the wrong way.
//! * **B-family** – the positive repeats the query's content tokens; the latent
//!   answer is planted in the hard negatives, so appending it to the query
//!   drags the anchor towards a negative.
//!
//! Ground-truth answers go to a [`Sidecar`] that is stored apart from the
//! samples; the trained model never reads it.

use super::{AugTarget, Content, Corpus, CorpusError, Dataset, TrainingSample};
use crate::vocab::{TokenId, Vocabulary, WordHasher};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::ops::Range;
use std::path::Path;

const VISUAL_DISTRACTORS: u32 = 8;
const B_VISUAL_POOL: u32 = 16;
const MIN_NOISE: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySuiteConfig {
    pub a_datasets: usize,
    pub b_datasets: usize,
    pub samples_per_dataset: usize,
    /// Hard negatives per sample (m).
    pub hard_negatives: usize,
    /// Distinct keys per lookup slot in each A-family dataset.
    pub keys_per_slot: usize,
    /// Size of each B-family dataset's latent answer set.
    pub answers_per_b_dataset: usize,
    /// Unrelated answer-lexicon tokens mixed into each A-family document.
    pub a_doc_distractors: usize,
    pub b_content_tokens: u32,
    pub answer_region: u32,
    pub vocab: Vocabulary,
}

impl Default for ToySuiteConfig {
    fn default() -> Self {
        Self {
            a_datasets: 2,
            b_datasets: 2,
            samples_per_dataset: 400,
            hard_negatives: 1,
            keys_per_slot: 24,
            answers_per_b_dataset: 24,
            a_doc_distractors: 1,
            b_content_tokens: 140,
            answer_region: 100,
            vocab: Vocabulary::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    /// Augmentation helps.
    A,
    /// Augmentation hurts.
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarEntry {
    pub id: String,
    pub dataset: String,
    pub family: Family,
    /// Whitespace-separated answer words.
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sidecar {
    pub entries: Vec<SidecarEntry>,
}

impl Sidecar {
    pub fn answer_map(&self) -> HashMap<String, String> {
        self.entries.iter().map(|e| (e.id.clone(), e.answer.clone())).collect()
    }

    pub fn get(&self, id: &str) -> Option<&SidecarEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Dataset name → family, in first-appearance order.
    pub fn families(&self) -> BTreeMap<String, Family> {
        self.entries.iter().map(|e| (e.dataset.clone(), e.family)).collect()
    }

    /// Ground-truth division labels: A-family datasets require augmentation.
    pub fn ground_truth_labels(&self) -> BTreeMap<String, bool> {
        self.families().into_iter().map(|(k, f)| (k, f == Family::A)).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("sidecar serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(line).map_err(|e| CorpusError::Record {
                line: i + 1,
                kind: super::RecordError::Malformed(e.to_string()),
            })?;
            entries.push(e);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone)]
pub struct ToySuite {
    pub corpus: Corpus,
    pub sidecar: Sidecar,
}

/// Sequential allocator over a token-id interval.
struct Blocks {
    next: u32,
    end: u32,
    what: &'static str,
}

impl Blocks {
    fn take(&mut self, n: u32) -> Result<Range<u32>, CorpusError> {
        if self.next + n > self.end {
            return Err(CorpusError::InvalidConfig(format!("not enough {} token ids for this suite", self.what)));
        }
        let r = self.next..self.next + n;
        self.next += n;
        Ok(r)
    }
}

fn invalid(msg: impl Into<String>) -> CorpusError {
    CorpusError::InvalidConfig(msg.into())
}

impl ToySuiteConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        validate(self)
    }
}

fn validate(cfg: &ToySuiteConfig) -> Result<(), CorpusError> {
    cfg.vocab.validate()?;
    if cfg.a_datasets < 2 {
        return Err(invalid("a_datasets must be at least 2"));
    }
    if cfg.b_datasets < 2 {
        return Err(invalid("b_datasets must be at least 2"));
    }
    if cfg.hard_negatives == 0 {
        return Err(invalid("hard_negatives must be at least 1"));
    }
    if cfg.samples_per_dataset * (1 + cfg.hard_negatives) < 8 {
        return Err(invalid("samples_per_dataset is too small for a candidate pool of 8"));
    }
    if cfg.keys_per_slot < 2 || cfg.keys_per_slot * cfg.keys_per_slot < cfg.samples_per_dataset {
        return Err(invalid("keys_per_slot^2 must cover samples_per_dataset"));
    }
    if cfg.answers_per_b_dataset == 0 {
        return Err(invalid("answers_per_b_dataset must be positive"));
    }
    Ok(())
}

/// Finds words whose hashed id lands in `region`, one word per id.
fn answer_lexicon(hasher: &WordHasher, region: Range<u32>) -> Vec<(String, TokenId)> {
    let mut taken = HashSet::new();
    let mut out = Vec::new();
    for k in 0..2_000_000u32 {
        let w = format!("w{k}");
        let id = hasher.token(&w);
        if region.contains(&id) && taken.insert(id) {
            out.push((w, id));
            if out.len() == region.len() {
                break;
            }
        }
    }
    out
}

fn pick<R: Rng>(rng: &mut R, r: &Range<u32>) -> TokenId {
    rng.random_range(r.clone())
}

pub fn generate_toy_suite(cfg: &ToySuiteConfig, seed: u64) -> Result<ToySuite, CorpusError> {
    validate(cfg)?;
    let vocab = cfg.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hasher = WordHasher::for_vocab(&vocab, seed);
    let n_sets = (cfg.a_datasets + cfg.b_datasets) as u32;
    let keys = cfg.keys_per_slot as u32;

    let tr = vocab.text_range();
    let mut text = Blocks { next: tr.start, end: tr.end, what: "text" };
    let instr = text.take(2 * n_sets)?;
    let n_interleaved_a = (cfg.a_datasets / 2) as u32;
    let a_text_keys = text.take(keys * n_interleaved_a)?;
    let b_content = text.take(cfg.b_content_tokens)?;
    let answers = text.take(cfg.answer_region)?;
    let noise = text.next..text.end;
    if noise.len() < MIN_NOISE as usize {
        return Err(invalid("vocabulary leaves too few noise tokens"));
    }
    if b_content.len() < 8 {
        return Err(invalid("b_content_tokens must be at least 8"));
    }
    let mut visual = Blocks { next: vocab.visual_lo, end: vocab.visual_hi, what: "visual" };

    let lexicon = answer_lexicon(&hasher, answers.clone());
    let need = (2 * cfg.keys_per_slot).max(cfg.answers_per_b_dataset);
    if lexicon.len() < need {
        return Err(invalid("answer_region too small for the requested lookups"));
    }
    let word_of: HashMap<TokenId, &str> = lexicon.iter().map(|(w, id)| (*id, w.as_str())).collect();
    let answer_words = |ids: &[TokenId]| ids.iter().map(|t| word_of[t]).collect::<Vec<_>>().join(" ");

    let mut datasets = Vec::new();
    let mut sidecar = Vec::new();
    let n = cfg.samples_per_dataset;

    for j in 0..cfg.a_datasets {
        let image = j % 2 == 0;
        let name = if image { format!("toy_a{j}_image") } else { format!("toy_a{j}_interleaved") };
        let ins = [instr.start + 2 * j as u32, instr.start + 2 * j as u32 + 1];
        let slot1: Vec<TokenId> = visual.take(keys)?.collect();
        let slot2: Vec<TokenId> = if image {
            visual.take(keys)?.collect()
        } else {
            let k = (j / 2) as u32;
            (a_text_keys.start + k * keys..a_text_keys.start + (k + 1) * keys).collect()
        };
        let distractors = visual.take(VISUAL_DISTRACTORS)?;
        let mut ans: Vec<TokenId> = lexicon.iter().map(|(_, id)| *id).collect();
        ans.shuffle(&mut rng);
        let (ans1, ans2) = (ans[..keys as usize].to_vec(), ans[keys as usize..2 * keys as usize].to_vec());

        let mut pairs: Vec<(usize, usize)> =
            (0..keys as usize).flat_map(|a| (0..keys as usize).map(move |b| (a, b))).collect();
        pairs.shuffle(&mut rng);
        let mut samples = Vec::with_capacity(n);
        for (i, &(i1, i2)) in pairs.iter().take(n).enumerate() {
            let d = pick(&mut rng, &distractors);
            let query = if image {
                Content::image(vec![slot1[i1], slot2[i2], d])
            } else {
                Content::interleaved(vec![slot1[i1], d], vec![ins[0], ins[1], slot2[i2]])
            };
            let (a1, a2) = (ans1[i1], ans2[i2]);
            let doc = |rng: &mut ChaCha8Rng, head: [TokenId; 2]| {
                let mut t = head.to_vec();
                while t.len() < 2 + cfg.a_doc_distractors {
                    let x = lexicon[rng.random_range(0..lexicon.len())].1;
                    if x != a1 && x != a2 && !t.contains(&x) {
                        t.push(x);
                    }
                }
                t.shuffle(rng);
                t
            };
            let positive = Content::text(doc(&mut rng, [a1, a2]));
            let mut negs: Vec<Content> = Vec::new();
            while negs.len() < cfg.hard_negatives {
                let (o1, o2) = (rng.random_range(0..keys as usize), rng.random_range(0..keys as usize));
                if (o1, o2) == (i1, i2) {
                    continue;
                }
                let neg = Content::interleaved(vec![d], doc(&mut rng, [ans1[o1], ans2[o2]]));
                if !negs.contains(&neg) {
                    negs.push(neg);
                }
            }
            let id = format!("{name}-{i:05}");
            sidecar.push(SidecarEntry { id: id.clone(), dataset: name.clone(), family: Family::A, answer: answer_words(&[a1, a2]) });
            samples.push(TrainingSample { id, query, aug_target: AugTarget::EmbedOnly, positive, hard_negatives: negs });
        }
        datasets.push(Dataset { name, samples, aug_required: None });
    }

    let b_visual = visual.take(B_VISUAL_POOL)?;
    for j in 0..cfg.b_datasets {
        let text_only = j % 2 == 0;
        let name = if text_only { format!("toy_b{j}_text") } else { format!("toy_b{j}_interleaved") };
        let base = instr.start + 2 * (cfg.a_datasets + j) as u32;
        let ins = [base, base + 1];
        let mut ans: Vec<TokenId> = lexicon.iter().map(|(_, id)| *id).collect();
        ans.shuffle(&mut rng);
        ans.truncate(cfg.answers_per_b_dataset);
        let g1: HashMap<TokenId, TokenId> = b_content.clone().map(|c| (c, ans[rng.random_range(0..ans.len())])).collect();
        let g2: HashMap<TokenId, TokenId> = b_content.clone().map(|c| (c, ans[rng.random_range(0..ans.len())])).collect();

        let mut used_pairs: HashSet<(TokenId, TokenId)> = HashSet::new();
        let mut samples = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while samples.len() < n {
            attempts += 1;
            if attempts > 1000 * n {
                return Err(invalid("b_content_tokens too small to keep B-family queries separable"));
            }
            let c: Vec<TokenId> = rand::seq::index::sample(&mut rng, b_content.len(), 3)
                .into_iter()
                .map(|k| b_content.start + k as u32)
                .collect();
            let key = |x: TokenId, y: TokenId| (x.min(y), x.max(y));
            let pairs = [key(c[0], c[1]), key(c[0], c[2]), key(c[1], c[2])];
            if pairs.iter().any(|p| used_pairs.contains(p)) {
                continue;
            }
            used_pairs.extend(pairs);
            let qtext = vec![ins[0], ins[1], c[0], c[1], c[2]];
            let ptext = vec![c[0], c[1], c[2]];
            let (query, positive) = if text_only {
                (Content::text(qtext), Content::text(ptext))
            } else {
                let v = pick(&mut rng, &b_visual);
                (Content::interleaved(vec![v], qtext), Content::interleaved(vec![v], ptext))
            };
            let (a1, a2) = (g1[&c[0]], g2[&c[1]]);
            let mut negs: Vec<Content> = Vec::new();
            while negs.len() < cfg.hard_negatives {
                let neg = Content::text(vec![a1, a2, c[0], pick(&mut rng, &noise)]);
                if !negs.contains(&neg) {
                    negs.push(neg);
                }
            }
            let i = samples.len();
            let id = format!("{name}-{i:05}");
            sidecar.push(SidecarEntry { id: id.clone(), dataset: name.clone(), family: Family::B, answer: answer_words(&[a1, a2]) });
            samples.push(TrainingSample { id, query, aug_target: AugTarget::EmbedOnly, positive, hard_negatives: negs });
        }
        datasets.push(Dataset { name, samples, aug_required: None });
    }

    let corpus = Corpus::new(datasets, vocab, hasher)?;
    Ok(ToySuite { corpus, sidecar: Sidecar { entries: sidecar } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_candidate_pool, to_jsonl, Modality};

    fn small() -> ToySuiteConfig {
        ToySuiteConfig { samples_per_dataset: 60, keys_per_slot: 8, ..Default::default() }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_toy_suite(&ToySuiteConfig::default(), 7).unwrap();
        let b = generate_toy_suite(&ToySuiteConfig::default(), 7).unwrap();
        assert_eq!(to_jsonl(&a.corpus), to_jsonl(&b.corpus));
        assert_eq!(a.sidecar.to_jsonl(), b.sidecar.to_jsonl());
        let c = generate_toy_suite(&ToySuiteConfig::default(), 8).unwrap();
        assert_ne!(to_jsonl(&a.corpus), to_jsonl(&c.corpus));
    }

    #[test]
    fn rejects_too_few_families() {
        let cfg = ToySuiteConfig { b_datasets: 1, ..small() };
        assert!(matches!(generate_toy_suite(&cfg, 1), Err(CorpusError::InvalidConfig(m)) if m.contains("b_datasets")));
        let cfg = ToySuiteConfig { hard_negatives: 0, ..small() };
        assert!(matches!(generate_toy_suite(&cfg, 1), Err(CorpusError::InvalidConfig(_))));
    }

    #[test]
    fn all_modalities_present() {
        let s = generate_toy_suite(&small(), 3).unwrap();
        let fam = s.sidecar.families();
        let mut seen_a = HashSet::new();
        let mut seen_b = HashSet::new();
        for d in &s.corpus.datasets {
            for x in &d.samples {
                match fam[&d.name] {
                    Family::A => seen_a.insert(x.query.modality),
                    Family::B => seen_b.insert(x.query.modality),
                };
            }
        }
        assert!(seen_a.contains(&Modality::Image) && seen_a.contains(&Modality::Interleaved));
        assert!(seen_b.contains(&Modality::Text));
    }

    #[test]
    fn a_family_positive_matches_answer_not_query() {
        let s = generate_toy_suite(&ToySuiteConfig::default(), 11).unwrap();
        let answers = s.sidecar.answer_map();
        let fam = s.sidecar.families();
        for d in s.corpus.datasets.iter().filter(|d| fam[&d.name] == Family::A) {
            for x in &d.samples {
                let ans: HashSet<TokenId> = s.corpus.hasher.tokenize(&answers[&x.id]).into_iter().collect();
                let q: HashSet<TokenId> = x.query.tokens().into_iter().collect();
                let p: HashSet<TokenId> = x.positive.tokens().into_iter().collect();
                assert!(p.intersection(&ans).count() >= 1, "{}", x.id);
                assert_eq!(p.iter().filter(|t| q.contains(t) && !ans.contains(t)).count(), 0, "{}", x.id);
            }
        }
    }

    #[test]
    fn b_family_positive_uniquely_nearest_by_overlap() {
        let s = generate_toy_suite(&ToySuiteConfig::default(), 11).unwrap();
        let fam = s.sidecar.families();
        let overlap = |a: &Content, b: &Content| {
            let q: HashSet<TokenId> = a.tokens().into_iter().collect();
            b.tokens().iter().collect::<HashSet<_>>().into_iter().filter(|t| q.contains(t)).count()
        };
        for d in s.corpus.datasets.iter().filter(|d| fam[&d.name] == Family::B) {
            let pool = build_candidate_pool(d);
            for x in &d.samples {
                let best = overlap(&x.query, &x.positive);
                for c in pool.iter().filter(|c| **c != x.positive) {
                    assert!(overlap(&x.query, c) < best, "{}: pool doc ties or beats positive", x.id);
                }
            }
        }
    }

    #[test]
    fn sidecar_round_trips_and_tokenizes_to_distinct_answers() {
        let s = generate_toy_suite(&small(), 5).unwrap();
        let back = Sidecar::parse(&s.sidecar.to_jsonl()).unwrap();
        assert_eq!(back, s.sidecar);
        assert_eq!(s.sidecar.entries.len(), s.corpus.num_samples());
        let gt = s.sidecar.ground_truth_labels();
        assert_eq!(gt.values().filter(|v| **v).count(), 2);
    }
}
