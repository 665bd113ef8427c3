//! Generation, contrastive and combined objectives with their gradients.

use super::{LossConfig, TargetSeq, TrainError};
use crate::model::{log_sum_exp, softmax, EmbeddingVec};

const UNIT_TOL: f64 = 1e-6;

/// `−Σ_t log softmax(logits_t)[target_t]` over target positions only.
///
/// `logits[t]` must be the distribution that predicts `target[t]`.
pub fn generation_loss(logits: &[Vec<f64>], target: &TargetSeq) -> Result<f64, TrainError> {
    check_alignment(logits, target)?;
    Ok(logits.iter().zip(target.tokens()).map(|(row, &g)| log_sum_exp(row) - row[g as usize]).sum())
}

/// Loss plus `∂L/∂logits` (softmax minus one-hot per row).
pub fn generation_loss_grad(logits: &[Vec<f64>], target: &TargetSeq) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    check_alignment(logits, target)?;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &g) in logits.iter().zip(target.tokens()) {
        loss += log_sum_exp(row) - row[g as usize];
        let mut p = softmax(row);
        p[g as usize] -= 1.0;
        grads.push(p);
    }
    Ok((loss, grads))
}

fn check_alignment(logits: &[Vec<f64>], target: &TargetSeq) -> Result<(), TrainError> {
    if logits.len() != target.len() {
        return Err(TrainError::AlignmentMismatch { logits: logits.len(), target: target.len() });
    }
    if let Some((row, &g)) = logits.iter().zip(target.tokens()).find(|(row, &g)| g as usize >= row.len()) {
        return Err(TrainError::AlignmentMismatch { logits: row.len(), target: g as usize });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrads {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<Vec<f64>>>,
}

fn check_batch(anchors: &[EmbeddingVec], positives: &[EmbeddingVec], negatives: &[Vec<EmbeddingVec>]) -> Result<usize, TrainError> {
    let n = positives.len();
    if anchors.is_empty() || n == 0 || negatives.len() != n {
        return Err(TrainError::ShapeMismatch(format!("{} anchors, {n} positives, {} negative groups", anchors.len(), negatives.len())));
    }
    let m = negatives[0].len();
    if negatives.iter().any(|g| g.len() != m) {
        return Err(TrainError::ShapeMismatch("negative groups differ in size".into()));
    }
    let dim = anchors[0].dim();
    let all = anchors.iter().chain(positives).chain(negatives.iter().flatten());
    for e in all {
        if e.dim() != dim {
            return Err(TrainError::ShapeMismatch(format!("embedding dim {} != {dim}", e.dim())));
        }
        let norm = e.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(TrainError::NonUnitNorm(norm));
        }
    }
    Ok(m)
}

/// In-batch InfoNCE with hard negatives.
///
/// For anchor `i` the denominator runs over every positive and every hard
/// negative in the batch, with `φ(x, y) = exp(cos(x, y) / τ)`.
pub fn contrastive_loss(
    anchors: &[EmbeddingVec],
    positives: &[EmbeddingVec],
    negatives: &[Vec<EmbeddingVec>],
    tau: f64,
) -> Result<f64, TrainError> {
    contrastive_loss_grad(anchors, positives, negatives, tau).map(|(l, _)| l)
}

pub fn contrastive_loss_grad(
    anchors: &[EmbeddingVec],
    positives: &[EmbeddingVec],
    negatives: &[Vec<EmbeddingVec>],
    tau: f64,
) -> Result<(f64, ContrastiveGrads), TrainError> {
    if anchors.len() != positives.len() {
        return Err(TrainError::ShapeMismatch(format!("{} anchors, {} positives", anchors.len(), positives.len())));
    }
    let idx: Vec<usize> = (0..anchors.len()).collect();
    contrastive_loss_grad_indexed(anchors, &idx, positives, negatives, tau)
}

/// Same objective with anchor `i` paired to `positives[pos_index[i]]`; the
/// candidate set is still every positive and every negative.
pub(crate) fn contrastive_loss_grad_indexed(
    anchors: &[EmbeddingVec],
    pos_index: &[usize],
    positives: &[EmbeddingVec],
    negatives: &[Vec<EmbeddingVec>],
    tau: f64,
) -> Result<(f64, ContrastiveGrads), TrainError> {
    if !(tau > 0.0) {
        return Err(TrainError::InvalidConfig(format!("tau must be positive, got {tau}")));
    }
    let m = check_batch(anchors, positives, negatives)?;
    let n = positives.len();
    if pos_index.len() != anchors.len() || pos_index.iter().any(|&p| p >= n) {
        return Err(TrainError::ShapeMismatch("positive index out of range".into()));
    }
    let dim = anchors[0].dim();
    let candidates: Vec<&EmbeddingVec> = positives.iter().chain(negatives.iter().flatten()).collect();
    let mut grads = ContrastiveGrads {
        anchors: vec![vec![0.0; dim]; anchors.len()],
        positives: vec![vec![0.0; dim]; n],
        negatives: vec![vec![vec![0.0; dim]; m]; n],
    };
    let mut loss = 0.0;
    let inv_n = 1.0 / anchors.len() as f64;
    for (i, a) in anchors.iter().enumerate() {
        let own = pos_index[i];
        let scores: Vec<f64> = candidates.iter().map(|c| a.dot(c) / tau).collect();
        let lse = log_sum_exp(&scores);
        loss += lse - scores[own];
        for (c, s) in scores.iter().enumerate() {
            let w = ((s - lse).exp() - if c == own { 1.0 } else { 0.0 }) * inv_n / tau;
            let cand = candidates[c].values();
            for k in 0..dim {
                grads.anchors[i][k] += w * cand[k];
            }
            let slot = if c < n { &mut grads.positives[c] } else { &mut grads.negatives[(c - n) / m][(c - n) % m] };
            for k in 0..dim {
                slot[k] += w * a.values()[k];
            }
        }
    }
    Ok((loss * inv_n, grads))
}

/// `α_rep·l_rep + α_gen·l_gen`; an absent generation term contributes nothing.
pub fn combined_loss(l_rep: f64, l_gen: Option<f64>, cfg: &LossConfig) -> f64 {
    cfg.alpha_rep * l_rep + l_gen.map_or(0.0, |g| cfg.alpha_gen * g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{AUGMENT, EOS};

    fn unit(v: &[f64]) -> EmbeddingVec {
        EmbeddingVec::normalize(v).unwrap()
    }

    #[test]
    fn uniform_logits_cost_log_vocab_per_token() {
        let t = TargetSeq::new(vec![AUGMENT, 17, 9, 30, EOS]).unwrap();
        let logits = vec![vec![0.0; 256]; 5];
        let l = generation_loss(&logits, &t).unwrap();
        assert!((l - 5.0 * 256f64.ln()).abs() < 1e-12);
        assert!((l - 27.7259).abs() < 1e-4);
    }

    #[test]
    fn confident_logits_cost_nearly_nothing() {
        let t = TargetSeq::new(vec![AUGMENT, 17, EOS]).unwrap();
        let logits: Vec<Vec<f64>> = t
            .tokens()
            .iter()
            .map(|&g| {
                let mut r = vec![0.0; 64];
                r[g as usize] = 30.0;
                r
            })
            .collect();
        assert!(generation_loss(&logits, &t).unwrap() < 1e-9);
    }

    #[test]
    fn misaligned_rows_error() {
        let t = TargetSeq::new(vec![AUGMENT, 17, EOS]).unwrap();
        assert!(matches!(generation_loss(&[vec![0.0; 32]], &t), Err(TrainError::AlignmentMismatch { .. })));
    }

    #[test]
    fn symmetric_pair_is_ln2() {
        let a = unit(&[1.0, 0.0, 0.0]);
        let p = unit(&[0.0, 1.0, 0.0]);
        let n = unit(&[0.0, 0.0, 1.0]);
        let l = contrastive_loss(&[a], &[p], &[vec![n]], 0.02).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn lone_positive_is_zero() {
        let a = unit(&[1.0, 2.0]);
        let l = contrastive_loss(std::slice::from_ref(&a), &[unit(&[3.0, -1.0])], &[vec![]], 0.02).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn shape_and_norm_checks() {
        let a = unit(&[1.0, 0.0]);
        assert!(matches!(contrastive_loss(std::slice::from_ref(&a), &[], &[vec![]], 0.1), Err(TrainError::ShapeMismatch(_))));
        let p = EmbeddingVec::from_unit(vec![1.0, 0.0]).unwrap();
        assert!(contrastive_loss(std::slice::from_ref(&a), &[p], &[vec![]], 0.1).is_ok());
        assert!(matches!(contrastive_loss(std::slice::from_ref(&a), &[unit(&[1.0, 0.0, 0.0])], &[vec![]], 0.1), Err(TrainError::ShapeMismatch(_))));
        assert!(EmbeddingVec::from_unit(vec![2.0, 0.0]).is_none());
    }

    #[test]
    fn combined_arithmetic() {
        let cfg = LossConfig::default();
        assert!((combined_loss(0.5, Some(2.0), &cfg) - 0.7).abs() < 1e-12);
        let no_gen = LossConfig { alpha_gen: 0.0, ..cfg };
        assert_eq!(combined_loss(0.5, Some(2.0), &no_gen), 0.5);
        assert_eq!(combined_loss(0.5, None, &cfg), 0.5);
    }

    #[test]
    fn contrastive_grad_matches_difference_on_embeddings() {
        // Scores are linear in the anchor; differences are taken without renormalizing.
        let raw = [[0.3, -0.2, 0.9], [0.1, 0.8, -0.4], [-0.5, 0.2, 0.1], [0.7, 0.7, 0.1]];
        let e: Vec<EmbeddingVec> = raw.iter().map(|r| unit(r)).collect();
        let (_, g) = contrastive_loss_grad(&e[..2], &e[2..4], &[vec![], vec![]], 0.5).unwrap();
        let f = |a0: &[f64]| {
            let scores: Vec<f64> = [&e[2], &e[3]].iter().map(|c| a0.iter().zip(c.values()).map(|(x, y)| x * y).sum::<f64>() / 0.5).collect();
            (log_sum_exp(&scores) - scores[0]) / 2.0
        };
        for k in 0..3 {
            let mut p = e[0].values().to_vec();
            let mut q = p.clone();
            p[k] += 1e-6;
            q[k] -= 1e-6;
            let fd = (f(&p) - f(&q)) / 2e-6;
            assert!((fd - g.anchors[0][k]).abs() < 1e-8);
        }
    }
}
