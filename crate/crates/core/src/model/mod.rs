//! Tiny decoder-only transformer over the joint text/visual/control vocabulary.
//!
//! Pre-LayerNorm blocks with causal multi-head attention and a GELU MLP,
//! learned positional embeddings, a final LayerNorm, and an output head tied
//! to the token embedding. All parameters live in one flat `f64` buffer
//! addressed through a [`Layout`], which keeps gradient accumulation,
//! optimizer updates and checkpointing trivial.

mod backward;
mod checkpoint;
mod forward;

pub use backward::backward;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use forward::{forward, forward_trace, logits_for, Decoder, Trace};

use crate::vocab::{TokenId, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::ops::Range;

pub const MLP_RATIO: usize = 4;
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
/// Below this norm an embedding has no direction.
pub const EMBED_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub vocab: Vocabulary,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden_dim: 64, layers: 2, heads: 4, max_seq_len: 64, vocab: Vocabulary::default(), seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.hidden_dim == 0 || self.heads == 0 || self.layers == 0 || self.max_seq_len == 0 {
            return bad("hidden_dim, heads, layers and max_seq_len must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!("hidden_dim {} is not divisible by heads {}", self.hidden_dim, self.heads));
        }
        self.vocab.validate().map_err(|e| ModelError::InvalidConfig(e.to_string()))
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        MLP_RATIO * self.hidden_dim
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token {token} outside vocabulary of size {size}")]
    TokenOutOfRange { token: TokenId, size: u32 },
    #[error("index {index} out of range for {len} positions")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("embedding norm {norm:e} is below the floor")]
    DegenerateEmbedding { norm: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct LayerLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Where every named parameter sits in the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub(crate) tok_emb: Range<usize>,
    pub(crate) pos_emb: Range<usize>,
    pub(crate) layers: Vec<LayerLayout>,
    pub(crate) lnf_g: Range<usize>,
    pub(crate) lnf_b: Range<usize>,
    pub params: Vec<ParamInfo>,
    pub total: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut params = Vec::new();
        let mut total = 0usize;
        let mut add = |name: String, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let range = total..total + n;
            total += n;
            params.push(ParamInfo { name, shape, range: range.clone() });
            range
        };
        let (d, f, v) = (cfg.hidden_dim, cfg.mlp_dim(), cfg.vocab.size as usize);
        let tok_emb = add("tok_emb".into(), vec![v, d]);
        let pos_emb = add("pos_emb".into(), vec![cfg.max_seq_len, d]);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerLayout {
                ln1_g: add(p("ln1.gain"), vec![d]),
                ln1_b: add(p("ln1.bias"), vec![d]),
                wq: add(p("attn.wq"), vec![d, d]),
                bq: add(p("attn.bq"), vec![d]),
                wk: add(p("attn.wk"), vec![d, d]),
                bk: add(p("attn.bk"), vec![d]),
                wv: add(p("attn.wv"), vec![d, d]),
                bv: add(p("attn.bv"), vec![d]),
                wo: add(p("attn.wo"), vec![d, d]),
                bo: add(p("attn.bo"), vec![d]),
                ln2_g: add(p("ln2.gain"), vec![d]),
                ln2_b: add(p("ln2.bias"), vec![d]),
                w1: add(p("mlp.w1"), vec![d, f]),
                b1: add(p("mlp.b1"), vec![f]),
                w2: add(p("mlp.w2"), vec![f, d]),
                b2: add(p("mlp.b2"), vec![d]),
            });
        }
        let lnf_g = add("ln_f.gain".into(), vec![d]);
        let lnf_b = add("ln_f.bias".into(), vec![d]);
        Self { tok_emb, pos_emb, layers, lnf_g, lnf_b, params, total }
    }

    fn init_kinds(&self) -> impl Iterator<Item = (&ParamInfo, Init)> {
        self.params.iter().map(|p| {
            let kind = if p.name.ends_with(".gain") {
                Init::Ones
            } else if p.shape.len() == 1 {
                Init::Zeros
            } else {
                Init::Normal
            };
            (p, kind)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub(crate) layout: Layout,
}

impl ModelState {
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }

    pub(crate) fn p(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    /// Rebuilds a state from a config and an existing flat parameter buffer.
    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::InvalidConfig(format!("expected {} parameters, got {}", layout.total, params.len())));
        }
        Ok(Self { config, params, layout })
    }
}

/// Normal(0, 0.02) weights, zero biases, unit LayerNorm gains; deterministic in `cfg.seed`.
pub fn init_model(cfg: &ModelConfig) -> Result<ModelState, ModelError> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut params = vec![0.0; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for (info, kind) in layout.init_kinds() {
        let slot = &mut params[info.range.clone()];
        match kind {
            Init::Normal => slot.iter_mut().for_each(|x| *x = normal.sample(&mut rng)),
            Init::Zeros => {}
            Init::Ones => slot.fill(1.0),
        }
    }
    Ok(ModelState { config: cfg.clone(), params, layout })
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVec(Vec<f64>);

impl EmbeddingVec {
    /// Wraps values that are already unit-norm (within 1e-6).
    pub fn from_unit(values: Vec<f64>) -> Option<Self> {
        let n = norm(&values);
        ((n - 1.0).abs() <= 1e-6).then_some(Self(values))
    }

    /// Normalizes arbitrary values; fails below the norm floor.
    pub fn normalize(values: &[f64]) -> Result<Self, ModelError> {
        let n = norm(values);
        if !(n >= EMBED_NORM_FLOOR) {
            return Err(ModelError::DegenerateEmbedding { norm: n });
        }
        Ok(Self(values.iter().map(|x| x / n).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &EmbeddingVec) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// L2-normalized copy of the hidden row at `eos_position`.
pub fn extract_embedding(hidden: &[Vec<f64>], eos_position: usize) -> Result<EmbeddingVec, ModelError> {
    let row = hidden.get(eos_position).ok_or(ModelError::IndexOutOfRange { index: eos_position, len: hidden.len() })?;
    EmbeddingVec::normalize(row)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, layers: usize, heads: usize) -> ModelConfig {
        ModelConfig { hidden_dim: d, layers, heads, ..Default::default() }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&ModelConfig::default()).unwrap();
        let b = init_model(&ModelConfig::default()).unwrap();
        assert_eq!(a.params, b.params);
        let c = init_model(&ModelConfig { seed: 1, ..Default::default() }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn heads_must_divide_hidden() {
        assert!(matches!(init_model(&cfg(64, 2, 5)), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn parameter_count_matches_shape_enumeration() {
        let c = cfg(64, 2, 4);
        let m = init_model(&c).unwrap();
        let (d, l, v, s) = (64usize, 2usize, 512usize, c.max_seq_len);
        let f = 4 * d;
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let closed = v * d + s * d + l * per_layer + 2 * d;
        assert_eq!(m.param_count(), closed);
        let enumerated: usize = m.layout().params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        assert_eq!(enumerated, closed);
    }

    #[test]
    fn init_statistics() {
        let m = init_model(&ModelConfig::default()).unwrap();
        let lay = m.layout();
        let emb = m.p(&lay.tok_emb);
        let mean = emb.iter().sum::<f64>() / emb.len() as f64;
        let sd = (emb.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / emb.len() as f64).sqrt();
        assert!((sd - INIT_STD).abs() < 1e-3, "sd {sd}");
        assert!(m.p(&lay.layers[0].bq).iter().all(|x| *x == 0.0));
        assert!(m.p(&lay.lnf_g).iter().all(|x| *x == 1.0));
    }

    #[test]
    fn embedding_extraction() {
        let e = extract_embedding(&[vec![0.0, 0.0], vec![3.0, 4.0]], 1).unwrap();
        assert_eq!(e.values(), &[0.6, 0.8]);
        assert!(matches!(extract_embedding(&[vec![0.0, 0.0]], 0), Err(ModelError::DegenerateEmbedding { .. })));
        assert!(matches!(extract_embedding(&[vec![1.0]], 3), Err(ModelError::IndexOutOfRange { index: 3, len: 1 })));
    }

    #[test]
    fn random_rows_normalize_to_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 3.0).unwrap();
        for _ in 0..100 {
            let row: Vec<f64> = (0..16).map(|_| normal.sample(&mut rng)).collect();
            let e = EmbeddingVec::normalize(&row).unwrap();
            assert!((norm(e.values()) - 1.0).abs() < 1e-12);
        }
    }
}
