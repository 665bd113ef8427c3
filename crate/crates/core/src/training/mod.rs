//! Target construction, batch objective and the gradient-descent loop.

mod loss;

pub use loss::{combined_loss, contrastive_loss, contrastive_loss_grad, generation_loss, generation_loss_grad, ContrastiveGrads};

use crate::corpus::{AugTarget, Content, Corpus, TrainingSample};
use crate::model::{backward, forward_trace, init_model, logits_for, EmbeddingVec, ModelConfig, ModelError, ModelState, Trace, EMBED_NORM_FLOOR};
use crate::vocab::{TokenId, AUGMENT, EMBED, EOS, SEP};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha_rep: f64,
    pub alpha_gen: f64,
    pub batch_size: usize,
    /// Hard negatives used per sample.
    pub m: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.02, alpha_rep: 1.0, alpha_gen: 0.1, batch_size: 128, m: 1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(TrainError::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha_rep >= 0.0) || !(self.alpha_gen >= 0.0) {
            return Err(TrainError::InvalidConfig("alpha_rep and alpha_gen must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainMode {
    NoAug,
    AlwaysAug,
    Adaptive,
    HalfRandom(u64),
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::NoAug => "NoAug",
            TrainMode::AlwaysAug => "AlwaysAug",
            TrainMode::Adaptive => "Adaptive",
            TrainMode::HalfRandom(_) => "Half",
        }
    }
}

/// `[AUGMENT, g.., EOS]` or `[EMBED, EOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSeq(Vec<TokenId>);

impl TargetSeq {
    pub fn new(tokens: Vec<TokenId>) -> Result<Self, TrainError> {
        let ok = match tokens.as_slice() {
            [EMBED, EOS] => true,
            [AUGMENT, g @ .., EOS] => !g.is_empty() && g.iter().all(|&t| t != EOS && t != AUGMENT && t != EMBED),
            _ => false,
        };
        if !ok {
            return Err(TrainError::InvalidTarget(tokens));
        }
        Ok(Self(tokens))
    }

    pub fn augment(g: &[TokenId]) -> Result<Self, TrainError> {
        let mut t = Vec::with_capacity(g.len() + 2);
        t.push(AUGMENT);
        t.extend_from_slice(g);
        t.push(EOS);
        Self::new(t)
    }

    pub fn embed() -> Self {
        Self(vec![EMBED, EOS])
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_augment(&self) -> bool {
        self.0[0] == AUGMENT
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("sample `{0}` has no augmentation but the mode requires one")]
    MissingAugmentation(String),
    #[error("{logits} logit rows do not align with target of length {target}")]
    AlignmentMismatch { logits: usize, target: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("embedding norm {0} is not 1")]
    NonUnitNorm(f64),
    #[error("invalid target sequence {0:?}")]
    InvalidTarget(Vec<TokenId>),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn fnv1a(seed: u64, s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(s.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded per-sample coin used by [`TrainMode::HalfRandom`].
pub fn half_coin(seed: u64, sample_id: &str) -> bool {
    splitmix64(fnv1a(seed, sample_id)) >> 63 == 1
}

/// `None` for NoAug (no generation term).
pub fn build_target(sample: &TrainingSample, mode: TrainMode) -> Result<Option<TargetSeq>, TrainError> {
    let augment = |s: &TrainingSample| match &s.aug_target {
        AugTarget::AugmentWith(g) => TargetSeq::augment(g),
        AugTarget::EmbedOnly => Err(TrainError::MissingAugmentation(s.id.clone())),
    };
    match mode {
        TrainMode::NoAug => Ok(None),
        TrainMode::AlwaysAug => augment(sample).map(Some),
        TrainMode::Adaptive => match &sample.aug_target {
            AugTarget::AugmentWith(g) => TargetSeq::augment(g).map(Some),
            AugTarget::EmbedOnly => Ok(Some(TargetSeq::embed())),
        },
        TrainMode::HalfRandom(seed) => {
            if half_coin(seed, &sample.id) {
                augment(sample).map(Some)
            } else {
                Ok(Some(TargetSeq::embed()))
            }
        }
    }
}

/// `query SEP target`; the target already ends in EOS.
pub fn anchor_tokens(query: &Content, target: &[TokenId]) -> Vec<TokenId> {
    let mut t = query.tokens();
    t.push(SEP);
    t.extend_from_slice(target);
    t
}

/// Anchor used when there is no generation target: `query SEP EMBED EOS`.
pub fn plain_anchor_tokens(query: &Content) -> Vec<TokenId> {
    anchor_tokens(query, &[EMBED, EOS])
}

/// `content EOS`.
pub fn document_tokens(doc: &Content) -> Vec<TokenId> {
    let mut t = doc.tokens();
    t.push(EOS);
    t
}

pub fn embed_tokens(state: &ModelState, tokens: &[TokenId]) -> Result<EmbeddingVec, ModelError> {
    let mut dec = crate::model::Decoder::new(state);
    dec.push_all(tokens)?;
    EmbeddingVec::normalize(dec.hidden())
}

pub fn embed_document(state: &ModelState, doc: &Content) -> Result<EmbeddingVec, ModelError> {
    embed_tokens(state, &document_tokens(doc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    /// Also contrast the un-augmented query form of augmented samples.
    pub contrast_original: bool,
    pub batching: Batching,
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// `θ ← θ − lr·g`.
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptState {
    fn apply(&mut self, opt: Optimizer, lr: f64, params: &mut [f64], grad: &[f64]) {
        match opt {
            Optimizer::Sgd => params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g),
            Optimizer::Adam { beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                }
                self.t += 1;
                let (c1, c2) = (1.0 - beta1.powi(self.t), 1.0 - beta2.powi(self.t));
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// How samples are grouped into batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// One global shuffle over all datasets.
    Mixed,
    /// Every batch drawn from a single dataset.
    PerDataset,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig { batch_size: 16, ..LossConfig::default() },
            learning_rate: 1e-2,
            epochs: 12,
            seed: 0,
            contrast_original: false,
            batching: Batching::Mixed,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    /// Recipe that separates the toy suite's families within a CPU-minute budget.
    pub fn toy(seed: u64) -> Self {
        Self {
            loss: LossConfig { batch_size: 16, alpha_gen: 1.0, ..LossConfig::default() },
            learning_rate: 3e-3,
            epochs: 20,
            seed,
            optimizer: Optimizer::adam(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate()?;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::InvalidConfig(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub l_rep: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_gen: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("log record serializes") + "\n").collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
    }
}

/// Batch losses; `l_gen` is the mean over the batch of per-sample sums.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub l_rep: f64,
    pub l_gen: Option<f64>,
    pub total: f64,
}

struct Encoded {
    trace: Trace,
    raw_norm: f64,
    emb: EmbeddingVec,
}

fn encode(state: &ModelState, tokens: &[TokenId]) -> Result<Encoded, TrainError> {
    let trace = forward_trace(state, tokens)?;
    let last = trace.hidden.last().ok_or(ModelError::IndexOutOfRange { index: 0, len: 0 })?;
    let raw_norm = crate::model::norm(last);
    if !(raw_norm >= EMBED_NORM_FLOOR) {
        return Err(ModelError::DegenerateEmbedding { norm: raw_norm }.into());
    }
    let emb = EmbeddingVec::normalize(last)?;
    Ok(Encoded { trace, raw_norm, emb })
}

/// Gradient through `e = h / |h|` for an upstream gradient on `e`.
fn through_normalize(enc: &Encoded, g: &[f64], scale: f64) -> Vec<f64> {
    let e = enc.emb.values();
    let dot: f64 = e.iter().zip(g).map(|(a, b)| a * b).sum();
    e.iter().zip(g).map(|(ei, gi)| scale * (gi - ei * dot) / enc.raw_norm).collect()
}

/// Combined objective on one batch and its gradient (accumulated into `grad`).
pub fn batch_loss_and_grad(
    state: &ModelState,
    batch: &[&TrainingSample],
    mode: TrainMode,
    cfg: &LossConfig,
    contrast_original: bool,
    grad: &mut [f64],
) -> Result<BatchLoss, TrainError> {
    let n = batch.len();
    if n == 0 {
        return Err(TrainError::ShapeMismatch("empty batch".into()));
    }
    let mut targets = Vec::with_capacity(n);
    let mut anchors = Vec::with_capacity(n);
    let mut originals = Vec::new();
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for s in batch {
        if s.hard_negatives.len() < cfg.m {
            return Err(TrainError::ShapeMismatch(format!("sample `{}` has {} hard negatives, need {}", s.id, s.hard_negatives.len(), cfg.m)));
        }
        let target = build_target(s, mode)?;
        let toks = match &target {
            Some(t) => anchor_tokens(&s.query, t.tokens()),
            None => plain_anchor_tokens(&s.query),
        };
        anchors.push(encode(state, &toks)?);
        if contrast_original && target.as_ref().is_some_and(|t| t.is_augment()) {
            originals.push(encode(state, &plain_anchor_tokens(&s.query))?);
        }
        targets.push(target);
        positives.push(encode(state, &document_tokens(&s.positive))?);
        let negs = s.hard_negatives[..cfg.m].iter().map(|d| encode(state, &document_tokens(d))).collect::<Result<Vec<_>, _>>()?;
        negatives.push(negs);
    }

    let a_emb: Vec<EmbeddingVec> = anchors.iter().map(|e| e.emb.clone()).collect();
    let p_emb: Vec<EmbeddingVec> = positives.iter().map(|e| e.emb.clone()).collect();
    let n_emb: Vec<Vec<EmbeddingVec>> = negatives.iter().map(|g| g.iter().map(|e| e.emb.clone()).collect()).collect();
    let (mut l_rep, cg) = contrastive_loss_grad(&a_emb, &p_emb, &n_emb, cfg.tau)?;
    let mut doc_grads_p = cg.positives;
    let mut doc_grads_n = cg.negatives;

    if !originals.is_empty() {
        let idx: Vec<usize> = (0..n).filter(|&i| targets[i].as_ref().is_some_and(|t| t.is_augment())).collect();
        let o_emb: Vec<EmbeddingVec> = originals.iter().map(|e| e.emb.clone()).collect();
        let (l_o, og) = loss::contrastive_loss_grad_indexed(&o_emb, &idx, &p_emb, &n_emb, cfg.tau)?;
        l_rep += l_o;
        for (k, o) in originals.iter().enumerate() {
            let d = through_normalize(o, &og.anchors[k], cfg.alpha_rep);
            backward(state, &o.trace, &[(o.trace.len() - 1, d)], &[], grad);
        }
        add_rows(&mut doc_grads_p, &og.positives);
        for (dst, src) in doc_grads_n.iter_mut().zip(&og.negatives) {
            add_rows(dst, src);
        }
    }

    let mut gen_sum = 0.0;
    let mut any_gen = false;
    for (i, enc) in anchors.iter().enumerate() {
        let d_h = through_normalize(enc, &cg.anchors[i], cfg.alpha_rep);
        let last = enc.trace.len() - 1;
        let mut d_logits = Vec::new();
        if let Some(t) = &targets[i] {
            any_gen = true;
            let start = enc.trace.len() - t.len() - 1;
            let rows: Vec<Vec<f64>> = (start..start + t.len()).map(|p| logits_for(state, &enc.trace.hidden[p])).collect();
            let (l, g) = generation_loss_grad(&rows, t)?;
            gen_sum += l;
            if cfg.alpha_gen > 0.0 {
                let s = cfg.alpha_gen / n as f64;
                d_logits = g.into_iter().enumerate().map(|(k, row)| (start + k, row.into_iter().map(|v| v * s).collect())).collect();
            }
        }
        backward(state, &enc.trace, &[(last, d_h)], &d_logits, grad);
    }
    for (enc, g) in positives.iter().zip(&doc_grads_p) {
        let d = through_normalize(enc, g, cfg.alpha_rep);
        backward(state, &enc.trace, &[(enc.trace.len() - 1, d)], &[], grad);
    }
    for (group, gs) in negatives.iter().zip(&doc_grads_n) {
        for (enc, g) in group.iter().zip(gs) {
            let d = through_normalize(enc, g, cfg.alpha_rep);
            backward(state, &enc.trace, &[(enc.trace.len() - 1, d)], &[], grad);
        }
    }
    let l_gen = any_gen.then(|| gen_sum / n as f64);
    Ok(BatchLoss { l_rep, l_gen, total: combined_loss(l_rep, l_gen, cfg) })
}

fn add_rows(dst: &mut [Vec<f64>], src: &[Vec<f64>]) {
    for (d, s) in dst.iter_mut().zip(src) {
        d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
}

/// One epoch of batches. Per-dataset batching shuffles within each dataset and
/// then shuffles the batch order.
fn epoch_batches<'a>(groups: &[Vec<&'a TrainingSample>], batching: Batching, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<&'a TrainingSample>> {
    if batching == Batching::Mixed {
        let mut all: Vec<&TrainingSample> = groups.iter().flatten().copied().collect();
        all.shuffle(rng);
        return all.chunks(batch_size).map(|c| c.to_vec()).collect();
    }
    let mut batches = Vec::new();
    for g in groups {
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.shuffle(rng);
        batches.extend(order.chunks(batch_size).map(|c| c.iter().map(|&i| g[i]).collect::<Vec<_>>()));
    }
    batches.shuffle(rng);
    batches
}

/// Trains a fresh model on every sample of `corpus`.
pub fn train(corpus: &Corpus, mode: TrainMode, model: &ModelConfig, cfg: &TrainConfig) -> Result<(ModelState, TrainingLog), TrainError> {
    let state = init_model(model)?;
    train_from(state, corpus, mode, cfg)
}

pub fn train_from(mut state: ModelState, corpus: &Corpus, mode: TrainMode, cfg: &TrainConfig) -> Result<(ModelState, TrainingLog), TrainError> {
    cfg.validate()?;
    let groups: Vec<Vec<&TrainingSample>> = corpus.datasets.iter().filter(|d| !d.samples.is_empty()).map(|d| d.samples.iter().collect()).collect();
    if groups.is_empty() {
        return Err(TrainError::InvalidConfig("corpus has no samples".into()));
    }
    for s in groups.iter().flatten() {
        build_target(s, mode)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainingLog::default();
    let mut grad = vec![0.0; state.params.len()];
    let mut step = 0;
    let mut opt = OptState { m: Vec::new(), v: Vec::new(), t: 0 };
    for _ in 0..cfg.epochs {
        for batch in epoch_batches(&groups, cfg.batching, cfg.loss.batch_size, &mut rng) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let l = batch_loss_and_grad(&state, &batch, mode, &cfg.loss, cfg.contrast_original, &mut grad)?;
            if !l.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss { step });
            }
            opt.apply(cfg.optimizer, cfg.learning_rate, &mut state.params, &grad);
            log.records.push(LogRecord { step, l_rep: l.l_rep, l_gen: l.l_gen, total: l.total });
            step += 1;
        }
    }
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_toy_suite, ToySuiteConfig};

    fn sample(id: &str, aug: AugTarget) -> TrainingSample {
        TrainingSample {
            id: id.into(),
            query: Content::text(vec![10, 11]),
            aug_target: aug,
            positive: Content::text(vec![12]),
            hard_negatives: vec![Content::text(vec![13])],
        }
    }

    #[test]
    fn targets_per_mode() {
        let a = sample("a", AugTarget::AugmentWith(vec![17, 9]));
        let e = sample("e", AugTarget::EmbedOnly);
        assert_eq!(build_target(&a, TrainMode::Adaptive).unwrap().unwrap().tokens(), &[AUGMENT, 17, 9, EOS]);
        assert_eq!(build_target(&e, TrainMode::Adaptive).unwrap().unwrap().tokens(), &[EMBED, EOS]);
        assert!(build_target(&a, TrainMode::NoAug).unwrap().is_none());
        assert!(matches!(build_target(&e, TrainMode::AlwaysAug), Err(TrainError::MissingAugmentation(id)) if id == "e"));
        assert_eq!(build_target(&a, TrainMode::AlwaysAug).unwrap().unwrap().tokens(), &[AUGMENT, 17, 9, EOS]);
    }

    #[test]
    fn target_invariant_enforced() {
        assert!(TargetSeq::new(vec![AUGMENT, EOS]).is_err());
        assert!(TargetSeq::new(vec![EMBED, 7, EOS]).is_err());
        assert!(TargetSeq::new(vec![AUGMENT, 7]).is_err());
        assert!(TargetSeq::new(vec![AUGMENT, 7, EOS]).is_ok());
    }

    #[test]
    fn half_random_is_near_half() {
        let hits = (0..10_000).filter(|i| half_coin(3, &format!("s-{i:05}"))).count();
        // Binomial sd at n=10000 is 50, so ±200 is four sigma.
        assert!((4800..=5200).contains(&hits), "{hits}");
        let s = sample("x", AugTarget::AugmentWith(vec![20]));
        assert_eq!(build_target(&s, TrainMode::HalfRandom(3)).unwrap(), build_target(&s, TrainMode::HalfRandom(3)).unwrap());
    }

    #[test]
    fn sequence_shapes() {
        let q = Content::interleaved(vec![400], vec![7]);
        assert_eq!(anchor_tokens(&q, &[AUGMENT, 9, EOS]), vec![400, 7, SEP, AUGMENT, 9, EOS]);
        assert_eq!(plain_anchor_tokens(&q), vec![400, 7, SEP, EMBED, EOS]);
        assert_eq!(document_tokens(&q), vec![400, 7, EOS]);
    }

    fn small_suite() -> Corpus {
        let cfg = ToySuiteConfig { samples_per_dataset: 16, keys_per_slot: 4, ..Default::default() };
        let mut c = generate_toy_suite(&cfg, 1).unwrap().corpus;
        for d in &mut c.datasets {
            for s in &mut d.samples {
                s.aug_target = AugTarget::AugmentWith(vec![s.positive.text[0]]);
            }
        }
        c
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig { hidden_dim: 16, layers: 1, heads: 2, max_seq_len: 16, ..Default::default() }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let c = small_suite();
        let cfg = TrainConfig { epochs: 3, ..Default::default() };
        let (s1, log) = train(&c, TrainMode::Adaptive, &tiny_model(), &cfg).unwrap();
        let (s2, _) = train(&c, TrainMode::Adaptive, &tiny_model(), &cfg).unwrap();
        assert_eq!(s1.params, s2.params);
        let per_epoch = log.records.len() / 3;
        let first: f64 = log.records[..per_epoch].iter().map(|r| r.total).sum();
        let last: f64 = log.records[log.records.len() - per_epoch..].iter().map(|r| r.total).sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn noaug_log_has_no_generation_term() {
        let c = small_suite();
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        let (_, log) = train(&c, TrainMode::NoAug, &tiny_model(), &cfg).unwrap();
        assert!(log.records.iter().all(|r| r.l_gen.is_none() && r.total == r.l_rep));
        assert!(!log.to_jsonl().contains("l_gen"));
        let (_, log) = train(&c, TrainMode::AlwaysAug, &tiny_model(), &cfg).unwrap();
        assert!(log.records.iter().all(|r| r.l_gen.is_some()));
    }

    #[test]
    fn batch_gradient_matches_differences() {
        let c = small_suite();
        let mut state = init_model(&tiny_model()).unwrap();
        let batch: Vec<&TrainingSample> = c.datasets.iter().map(|d| &d.samples[0]).collect();
        let cfg = LossConfig { tau: 0.5, ..Default::default() };
        for contrast_original in [false, true] {
            let mut grad = vec![0.0; state.params.len()];
            batch_loss_and_grad(&state, &batch, TrainMode::Adaptive, &cfg, contrast_original, &mut grad).unwrap();
            let f = |s: &ModelState| {
                batch_loss_and_grad(s, &batch, TrainMode::Adaptive, &cfg, contrast_original, &mut vec![0.0; s.params.len()]).unwrap().total
            };
            let step = state.params.len() / 37;
            for i in (0..state.params.len()).step_by(step) {
                let orig = state.params[i];
                state.params[i] = orig + 1e-5;
                let fp = f(&state);
                state.params[i] = orig - 1e-5;
                let fm = f(&state);
                state.params[i] = orig;
                let fd = (fp - fm) / 2e-5;
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-7);
                assert!(err < 1e-4, "param {i}: {} vs {fd}", grad[i]);
            }
        }
    }
}
