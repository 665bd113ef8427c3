//! Position-by-position forward pass over a key/value cache.
//!
//! Full-sequence forward and incremental decoding share [`step`], so a prefix
//! processed during generation yields exactly the numbers a fresh full pass
//! would.

use super::{LayerLayout, ModelError, ModelState, LN_EPS};
use crate::vocab::TokenId;

pub(crate) struct LayerRec {
    pub xhat1: Vec<f64>,
    pub rstd1: f64,
    pub a: Vec<f64>,
    pub q: Vec<f64>,
    /// Attention weights, `heads × (pos + 1)`.
    pub probs: Vec<f64>,
    pub o: Vec<f64>,
    pub xhat2: Vec<f64>,
    pub rstd2: f64,
    pub c: Vec<f64>,
    pub z: Vec<f64>,
    pub gz: Vec<f64>,
}

pub(crate) struct PosRec {
    pub layers: Vec<LayerRec>,
    pub xhatf: Vec<f64>,
    pub rstdf: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct KvCache {
    /// Per layer, `len × hidden_dim` row-major.
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub len: usize,
}

impl KvCache {
    fn new(layers: usize) -> Self {
        Self { k: vec![Vec::new(); layers], v: vec![Vec::new(); layers], len: 0 }
    }
}

pub(crate) fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
    let out = xhat.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b).collect();
    (out, xhat, rstd)
}

/// `x · W + b` with `W` stored row-major as `[x.len(), out]`.
pub(crate) fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let mut y = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        let row = &w[i * out..(i + 1) * out];
        for (yj, wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
    y
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh())
}

pub(crate) fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + GELU_A * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
}

fn check_token(state: &ModelState, token: TokenId) -> Result<(), ModelError> {
    if token >= state.config.vocab.size {
        return Err(ModelError::TokenOutOfRange { token, size: state.config.vocab.size });
    }
    Ok(())
}

fn attend(state: &ModelState, cache: &KvCache, layer: usize, q: &[f64], t: usize) -> (Vec<f64>, Vec<f64>) {
    let d = state.config.hidden_dim;
    let dh = state.config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (kc, vc) = (&cache.k[layer], &cache.v[layer]);
    let mut o = vec![0.0; d];
    let mut probs = vec![0.0; state.config.heads * (t + 1)];
    for h in 0..state.config.heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let p = &mut probs[h * (t + 1)..(h + 1) * (t + 1)];
        for (u, pu) in p.iter_mut().enumerate() {
            let ku = &kc[u * d + h * dh..u * d + (h + 1) * dh];
            *pu = qh.iter().zip(ku).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for pu in p.iter_mut() {
            *pu = (*pu - m).exp();
            s += *pu;
        }
        let oh = &mut o[h * dh..(h + 1) * dh];
        for (u, pu) in p.iter_mut().enumerate() {
            *pu /= s;
            let vu = &vc[u * d + h * dh..u * d + (h + 1) * dh];
            for (oj, vj) in oh.iter_mut().zip(vu) {
                *oj += *pu * vj;
            }
        }
    }
    (o, probs)
}

/// Processes one position, appending its keys/values to `cache`; returns the final hidden row.
pub(crate) fn step(
    state: &ModelState,
    cache: &mut KvCache,
    token: TokenId,
    rec: Option<&mut Vec<PosRec>>,
) -> Result<Vec<f64>, ModelError> {
    check_token(state, token)?;
    let cfg = &state.config;
    let t = cache.len;
    if t >= cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong { len: t + 1, max: cfg.max_seq_len });
    }
    let d = cfg.hidden_dim;
    let lay = &state.layout;
    let emb = &state.p(&lay.tok_emb)[token as usize * d..(token as usize + 1) * d];
    let pos = &state.p(&lay.pos_emb)[t * d..(t + 1) * d];
    let mut x: Vec<f64> = emb.iter().zip(pos).map(|(a, b)| a + b).collect();

    let keep = rec.is_some();
    let mut layer_recs = Vec::new();
    for (l, ll) in lay.layers.iter().enumerate() {
        let LayerLayout { ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2 } = ll;
        let (a, xhat1, rstd1) = layer_norm(&x, state.p(ln1_g), state.p(ln1_b));
        let q = linear(&a, state.p(wq), state.p(bq));
        let k = linear(&a, state.p(wk), state.p(bk));
        let v = linear(&a, state.p(wv), state.p(bv));
        cache.k[l].extend_from_slice(&k);
        cache.v[l].extend_from_slice(&v);
        let (o, probs) = attend(state, cache, l, &q, t);
        let attn = linear(&o, state.p(wo), state.p(bo));
        x.iter_mut().zip(&attn).for_each(|(xi, ai)| *xi += ai);

        let (c, xhat2, rstd2) = layer_norm(&x, state.p(ln2_g), state.p(ln2_b));
        let z = linear(&c, state.p(w1), state.p(b1));
        let gz: Vec<f64> = z.iter().map(|v| gelu(*v)).collect();
        let m = linear(&gz, state.p(w2), state.p(b2));
        x.iter_mut().zip(&m).for_each(|(xi, mi)| *xi += mi);
        if keep {
            layer_recs.push(LayerRec { xhat1, rstd1, a, q, probs, o, xhat2, rstd2, c, z, gz });
        }
    }
    let (y, xhatf, rstdf) = layer_norm(&x, state.p(&lay.lnf_g), state.p(&lay.lnf_b));
    cache.len += 1;
    if let Some(recs) = rec {
        recs.push(PosRec { layers: layer_recs, xhatf, rstdf });
    }
    Ok(y)
}

/// Next-token logits for one hidden row through the tied output head.
pub fn logits_for(state: &ModelState, hidden: &[f64]) -> Vec<f64> {
    let d = state.config.hidden_dim;
    state
        .p(&state.layout.tok_emb)
        .chunks_exact(d)
        .map(|e| e.iter().zip(hidden).map(|(a, b)| a * b).sum())
        .collect()
}

/// Activations of a full forward pass, kept for backpropagation.
pub struct Trace {
    pub tokens: Vec<TokenId>,
    /// Final hidden row per position (after the last LayerNorm).
    pub hidden: Vec<Vec<f64>>,
    pub(crate) recs: Vec<PosRec>,
    pub(crate) cache: KvCache,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn forward_trace(state: &ModelState, tokens: &[TokenId]) -> Result<Trace, ModelError> {
    if tokens.len() > state.config.max_seq_len {
        return Err(ModelError::SequenceTooLong { len: tokens.len(), max: state.config.max_seq_len });
    }
    let mut cache = KvCache::new(state.config.layers);
    let mut recs = Vec::with_capacity(tokens.len());
    let mut hidden = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        hidden.push(step(state, &mut cache, tok, Some(&mut recs))?);
    }
    Ok(Trace { tokens: tokens.to_vec(), hidden, recs, cache })
}

/// Per-position hidden rows `(len, hidden_dim)` and logits `(len, vocab_size)`.
pub fn forward(state: &ModelState, tokens: &[TokenId]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), ModelError> {
    if tokens.len() > state.config.max_seq_len {
        return Err(ModelError::SequenceTooLong { len: tokens.len(), max: state.config.max_seq_len });
    }
    let mut dec = Decoder::new(state);
    let mut hidden = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        hidden.push(dec.push(tok)?.to_vec());
    }
    let logits = hidden.iter().map(|h| logits_for(state, h)).collect();
    Ok((hidden, logits))
}

/// Incremental decoder: each pushed token is processed exactly once.
pub struct Decoder<'a> {
    state: &'a ModelState,
    cache: KvCache,
    last: Vec<f64>,
    processed: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(state: &'a ModelState) -> Self {
        Self { state, cache: KvCache::new(state.config.layers), last: Vec::new(), processed: 0 }
    }

    pub fn push(&mut self, token: TokenId) -> Result<&[f64], ModelError> {
        self.last = step(self.state, &mut self.cache, token, None)?;
        self.processed += 1;
        Ok(&self.last)
    }

    pub fn push_all(&mut self, tokens: &[TokenId]) -> Result<&[f64], ModelError> {
        for &t in tokens {
            self.push(t)?;
        }
        Ok(&self.last)
    }

    /// Hidden row of the most recent position.
    pub fn hidden(&self) -> &[f64] {
        &self.last
    }

    /// Next-token logits after the most recent position.
    pub fn logits(&self) -> Vec<f64> {
        logits_for(self.state, &self.last)
    }

    /// Number of positions run through the network so far.
    pub fn positions_processed(&self) -> usize {
        self.processed
    }

    pub fn len(&self) -> usize {
        self.cache.len
    }

    pub fn is_empty(&self) -> bool {
        self.cache.len == 0
    }
}

#[cfg(test)]
mod tests {
    use super::super::{init_model, softmax, ModelConfig};
    use super::*;

    fn small() -> ModelState {
        init_model(&ModelConfig { hidden_dim: 16, layers: 2, heads: 2, max_seq_len: 16, seed: 3, ..Default::default() }).unwrap()
    }

    #[test]
    fn shapes_and_normalization() {
        let m = small();
        let (h, l) = forward(&m, &[5, 9, 400, 1]).unwrap();
        assert_eq!((h.len(), h[0].len()), (4, 16));
        assert_eq!((l.len(), l[0].len()), (4, 512));
        for row in &l {
            assert!((softmax(row).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn appending_a_token_leaves_earlier_positions_unchanged() {
        let m = small();
        let (h1, l1) = forward(&m, &[5, 9, 400]).unwrap();
        let (h2, l2) = forward(&m, &[5, 9, 400, 77]).unwrap();
        for t in 0..3 {
            for (a, b) in l1[t].iter().zip(&l2[t]) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(h1[t], h2[t]);
        }
    }

    #[test]
    fn trace_agrees_with_forward() {
        let m = small();
        let toks = [5, 9, 400, 77, 1];
        let (h, _) = forward(&m, &toks).unwrap();
        assert_eq!(forward_trace(&m, &toks).unwrap().hidden, h);
    }

    #[test]
    fn errors() {
        let m = small();
        assert!(matches!(forward(&m, &[512]), Err(ModelError::TokenOutOfRange { token: 512, .. })));
        let long = vec![7; 17];
        assert!(matches!(forward(&m, &long), Err(ModelError::SequenceTooLong { len: 17, max: 16 })));
        let mut dec = Decoder::new(&m);
        dec.push_all(&[7; 16]).unwrap();
        assert!(matches!(dec.push(7), Err(ModelError::SequenceTooLong { .. })));
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for z in [-3.0, -0.5, 0.0, 0.3, 2.0] {
            let fd = (gelu(z + 1e-6) - gelu(z - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(z)).abs() < 1e-8);
        }
    }
}
