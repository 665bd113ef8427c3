//! First-token routing, greedy augmentation and one-pass generate-then-embed.

use crate::corpus::Content;
use crate::model::{softmax, Decoder, EmbeddingVec, ModelError, ModelState};
use crate::vocab::{TokenId, Vocabulary, AUGMENT, EMBED, EOS, SEP};
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InferenceMode {
    Adaptive,
    ForceEmbed,
    ForceAugment,
}

impl InferenceMode {
    pub fn name(&self) -> &'static str {
        match self {
            InferenceMode::Adaptive => "Adaptive",
            InferenceMode::ForceEmbed => "ForceEmbed",
            InferenceMode::ForceAugment => "ForceAugment",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Augment,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub decision: Decision,
    /// Absent for forced modes.
    pub confidence: Option<f64>,
    /// Includes the control token, excludes EOS.
    pub generated: Vec<TokenId>,
    pub token_count: usize,
    pub gen_latency_ms: f64,
    pub truncated: bool,
    /// Positions run through the network for this query, final EOS included.
    pub positions: usize,
}

/// Decision and confidence from the logits at the SEP position.
///
/// The argmax is taken over the two control tokens only; ties go to Embed.
/// Confidence is the full-vocabulary probability of the chosen token.
pub fn route_from_logits(logits: &[f64]) -> (Decision, f64) {
    let p = softmax(logits);
    if logits[AUGMENT as usize] > logits[EMBED as usize] {
        (Decision::Augment, p[AUGMENT as usize])
    } else {
        (Decision::Embed, p[EMBED as usize])
    }
}

fn prefix<'a>(state: &'a ModelState, query: &Content) -> Result<Decoder<'a>, ModelError> {
    let mut dec = Decoder::new(state);
    dec.push_all(&query.tokens())?;
    dec.push(SEP)?;
    Ok(dec)
}

pub fn route_first_token(state: &ModelState, query: &Content) -> Result<(Decision, f64), ModelError> {
    Ok(route_from_logits(&prefix(state, query)?.logits()))
}

/// Greedy continuation from a decoder that has just consumed AUGMENT.
/// Returns the extra tokens and whether `max_len` cut generation short.
fn greedy(dec: &mut Decoder, max_len: usize) -> Result<(Vec<TokenId>, bool), ModelError> {
    let mut out = Vec::new();
    // AUGMENT already counts towards max_len.
    while out.len() + 1 < max_len {
        let logits = dec.logits();
        let next = logits
            .iter()
            .enumerate()
            .filter(|(t, _)| *t as TokenId == EOS || !Vocabulary::is_special(*t as TokenId))
            .fold((EOS, f64::NEG_INFINITY), |best, (t, &l)| if l > best.1 { (t as TokenId, l) } else { best });
        if next.0 == EOS {
            return Ok((out, false));
        }
        dec.push(next.0)?;
        out.push(next.0);
    }
    Ok((out, true))
}

fn effective_max_len(state: &ModelState, query: &Content, max_len: usize) -> usize {
    // Room for query, SEP, the generated tokens and the closing EOS.
    max_len.min(state.config.max_seq_len.saturating_sub(query.len() + 2)).max(1)
}

/// Greedy augmentation after `(query, SEP, AUGMENT)`: AUGMENT first, EOS excluded.
pub fn generate_augmentation(state: &ModelState, query: &Content, max_len: usize) -> Result<(Vec<TokenId>, bool), ModelError> {
    let mut dec = prefix(state, query)?;
    dec.push(AUGMENT)?;
    let (rest, truncated) = greedy(&mut dec, effective_max_len(state, query, max_len))?;
    let mut g = vec![AUGMENT];
    g.extend(rest);
    Ok((g, truncated))
}

/// Routes (or follows the forced mode), generates if augmenting, and embeds
/// the EOS row of `(query, SEP, generated.., EOS)` on the same decoder.
pub fn embed_adaptive(
    state: &ModelState,
    query: &Content,
    mode: InferenceMode,
    max_len: usize,
) -> Result<(EmbeddingVec, RoutingTrace), ModelError> {
    let start = Instant::now();
    let mut dec = prefix(state, query)?;
    let (decision, confidence) = match mode {
        InferenceMode::Adaptive => {
            let (d, c) = route_from_logits(&dec.logits());
            (d, Some(c))
        }
        InferenceMode::ForceEmbed => (Decision::Embed, None),
        InferenceMode::ForceAugment => (Decision::Augment, None),
    };
    let (generated, truncated) = match decision {
        Decision::Embed => {
            dec.push(EMBED)?;
            (vec![EMBED], false)
        }
        Decision::Augment => {
            dec.push(AUGMENT)?;
            let (rest, truncated) = greedy(&mut dec, effective_max_len(state, query, max_len))?;
            let mut g = vec![AUGMENT];
            g.extend(rest);
            (g, truncated)
        }
    };
    let gen_latency_ms = start.elapsed().as_secs_f64() * 1e3;
    dec.push(EOS)?;
    let emb = EmbeddingVec::normalize(dec.hidden())?;
    let trace = RoutingTrace {
        decision,
        confidence,
        token_count: generated.len(),
        generated,
        gen_latency_ms,
        truncated,
        positions: dec.positions_processed(),
    };
    Ok((emb, trace))
}

/// One line of the trace stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub query_id: String,
    pub decision: Decision,
    pub confidence: Option<f64>,
    pub token_count: usize,
    pub gen_latency_ms: f64,
    pub truncated: bool,
}

impl TraceRecord {
    pub fn new(query_id: impl Into<String>, t: &RoutingTrace) -> Self {
        Self {
            query_id: query_id.into(),
            decision: t.decision,
            confidence: t.confidence,
            token_count: t.token_count,
            gen_latency_ms: t.gen_latency_ms,
            truncated: t.truncated,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_model, ModelConfig};
    use crate::training::{embed_tokens, plain_anchor_tokens};

    fn model() -> ModelState {
        init_model(&ModelConfig { hidden_dim: 16, layers: 1, heads: 2, max_seq_len: 40, seed: 5, ..Default::default() }).unwrap()
    }

    /// Makes the output head favor `tok` at every position by aligning its
    /// embedding row with the final LayerNorm bias.
    fn favor(state: &mut ModelState, tok: TokenId, strength: f64) {
        let d = state.config.hidden_dim;
        let lnf_b = state.layout().lnf_b.clone();
        let emb = state.layout().tok_emb.clone();
        for i in 0..d {
            let v = if i % 2 == 0 { 1.0 } else { -1.0 };
            state.params[lnf_b.start + i] = v;
            state.params[emb.start + tok as usize * d + i] = strength * v;
        }
    }

    fn logits_with(pa: f64, pe: f64) -> Vec<f64> {
        // Remaining mass 1 - pa - pe spread over the other 510 tokens.
        let rest = (1.0 - pa - pe) / 510.0;
        let mut l = vec![rest.ln(); 512];
        l[AUGMENT as usize] = pa.ln();
        l[EMBED as usize] = pe.ln();
        l
    }

    #[test]
    fn route_definition_and_tie() {
        let (d, c) = route_from_logits(&logits_with(0.80, 0.05));
        assert_eq!(d, Decision::Augment);
        assert!((c - 0.80).abs() < 1e-12);
        let (d, c) = route_from_logits(&logits_with(0.3, 0.3));
        assert_eq!(d, Decision::Embed);
        assert!((c - 0.3).abs() < 1e-12);
        let shifted: Vec<f64> = logits_with(0.80, 0.05).iter().map(|x| x + 7.5).collect();
        let (d2, c2) = route_from_logits(&shifted);
        assert_eq!(d2, Decision::Augment);
        assert!((c2 - 0.80).abs() < 1e-12);
    }

    #[test]
    fn eos_favoring_model_stops_immediately() {
        let mut s = model();
        favor(&mut s, EOS, 50.0);
        let (g, truncated) = generate_augmentation(&s, &Content::text(vec![9, 10]), 8).unwrap();
        assert_eq!(g, vec![AUGMENT]);
        assert!(!truncated);
    }

    #[test]
    fn cap_sets_truncation_and_masks_controls() {
        let mut s = model();
        favor(&mut s, EMBED, 50.0);
        favor(&mut s, 77, 40.0);
        let (g, truncated) = generate_augmentation(&s, &Content::text(vec![9, 10]), 4).unwrap();
        assert_eq!(g, vec![AUGMENT, 77, 77, 77]);
        assert!(truncated);
        assert_eq!(generate_augmentation(&s, &Content::text(vec![9, 10]), 4).unwrap().0, g);
    }

    #[test]
    fn force_embed_contract_and_path_equivalence() {
        let s = model();
        let q = Content::interleaved(vec![400, 401], vec![20, 21]);
        let (e, t) = embed_adaptive(&s, &q, InferenceMode::ForceEmbed, 8).unwrap();
        assert_eq!((t.token_count, t.generated.clone(), t.confidence), (1, vec![EMBED], None));
        assert_eq!(e, embed_tokens(&s, &plain_anchor_tokens(&q)).unwrap());
        let (ea, ta) = embed_adaptive(&s, &q, InferenceMode::Adaptive, 8).unwrap();
        if ta.decision == Decision::Embed {
            assert_eq!(ea, e);
        } else {
            assert_eq!(ea, embed_adaptive(&s, &q, InferenceMode::ForceAugment, 8).unwrap().0);
        }
    }

    #[test]
    fn one_pass_position_budget() {
        let mut s = model();
        favor(&mut s, 77, 40.0);
        let q = Content::text((20..30).collect());
        let (e, t) = embed_adaptive(&s, &q, InferenceMode::ForceAugment, 5).unwrap();
        assert_eq!(t.token_count, 5);
        assert!(t.positions <= q.len() + t.token_count + 2);
        assert_eq!(t.positions, 17);
        // Same numbers as a fresh full pass over the final sequence.
        let mut seq = q.tokens();
        seq.push(SEP);
        seq.extend(&t.generated);
        seq.push(EOS);
        let (hidden, _) = forward(&s, &seq).unwrap();
        assert_eq!(e, EmbeddingVec::normalize(hidden.last().unwrap()).unwrap());
    }

    #[test]
    fn generation_respects_context_window() {
        let mut s = model();
        favor(&mut s, 77, 40.0);
        let q = Content::text((20..50).collect());
        let (_, t) = embed_adaptive(&s, &q, InferenceMode::ForceAugment, 32).unwrap();
        assert!(t.truncated);
        assert_eq!(t.positions, s.config.max_seq_len);
    }
}
