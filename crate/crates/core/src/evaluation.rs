//! Top-1 retrieval over per-dataset candidate pools and metric aggregation.

use crate::corpus::{build_candidate_pool, Dataset};
use crate::model::{EmbeddingVec, ModelError, ModelState};
use crate::routing::{embed_adaptive, Decision, InferenceMode, RoutingTrace};
use crate::training::embed_document;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("report has no datasets")]
    EmptyReport,
    #[error("positive of `{0}` is missing from its candidate pool")]
    PositiveNotInPool(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse report {path}: {msg}")]
    Parse { path: String, msg: String },
}

/// Index of the highest dot product; the lowest index wins ties.
pub fn retrieve_top1(query: &EmbeddingVec, pool: &[EmbeddingVec]) -> Result<usize, EvalError> {
    let mut best = (None, f64::NEG_INFINITY);
    for (i, d) in pool.iter().enumerate() {
        let s = query.dot(d);
        if best.0.is_none() || s > best.1 {
            best = (Some(i), s);
        }
    }
    best.0.ok_or(EvalError::EmptyPool)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub dataset: String,
    /// Index into the dataset's candidate pool.
    pub top1_doc: usize,
    pub correct: bool,
    pub trace: RoutingTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRow {
    pub name: String,
    pub queries: usize,
    pub p_at_1: f64,
    pub latency_ms: f64,
    pub avg_tokens: f64,
    pub embed_pct: f64,
    pub cf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub mode: InferenceMode,
    pub datasets: Vec<MetricRow>,
    pub overall: MetricRow,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| mean(v.into_iter()))
}

fn row(name: &str, results: &[RetrievalResult]) -> MetricRow {
    MetricRow {
        name: name.into(),
        queries: results.len(),
        p_at_1: mean(results.iter().map(|r| r.correct as u8 as f64)),
        latency_ms: mean(results.iter().map(|r| r.trace.gen_latency_ms)),
        avg_tokens: mean(results.iter().map(|r| r.trace.token_count as f64)),
        embed_pct: mean(results.iter().map(|r| (r.trace.decision == Decision::Embed) as u8 as f64)),
        cf: mean_opt(results.iter().map(|r| r.trace.confidence)),
    }
}

/// Overall row weighting every dataset equally.
fn overall(rows: &[MetricRow]) -> MetricRow {
    MetricRow {
        name: "overall".into(),
        queries: rows.iter().map(|r| r.queries).sum(),
        p_at_1: mean(rows.iter().map(|r| r.p_at_1)),
        latency_ms: mean(rows.iter().map(|r| r.latency_ms)),
        avg_tokens: mean(rows.iter().map(|r| r.avg_tokens)),
        embed_pct: mean(rows.iter().map(|r| r.embed_pct)),
        cf: mean_opt(rows.iter().map(|r| r.cf)),
    }
}

/// Embeds every document of the dataset's pool once.
pub fn embed_pool(state: &ModelState, dataset: &Dataset) -> Result<Vec<EmbeddingVec>, EvalError> {
    build_candidate_pool(dataset).iter().map(|d| embed_document(state, d).map_err(EvalError::from)).collect()
}

pub fn evaluate_dataset(state: &ModelState, dataset: &Dataset, mode: InferenceMode, max_len: usize) -> Result<Vec<RetrievalResult>, EvalError> {
    let pool = build_candidate_pool(dataset);
    if pool.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let pool_embs = embed_pool(state, dataset)?;
    let mut out = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let gold = pool.iter().position(|d| *d == s.positive).ok_or_else(|| EvalError::PositiveNotInPool(s.id.clone()))?;
        let (q, trace) = embed_adaptive(state, &s.query, mode, max_len)?;
        let top = retrieve_top1(&q, &pool_embs)?;
        out.push(RetrievalResult { query_id: s.id.clone(), dataset: dataset.name.clone(), top1_doc: top, correct: top == gold, trace });
    }
    Ok(out)
}

/// Report plus per-query details.
pub fn run_eval(
    state: &ModelState,
    datasets: &[Dataset],
    mode: InferenceMode,
    max_len: usize,
) -> Result<(EvalReport, Vec<RetrievalResult>), EvalError> {
    if datasets.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let mut rows = Vec::with_capacity(datasets.len());
    let mut details = Vec::new();
    for d in datasets {
        let res = evaluate_dataset(state, d, mode, max_len)?;
        rows.push(row(&d.name, &res));
        details.extend(res);
    }
    let overall = overall(&rows);
    Ok((EvalReport { mode, datasets: rows, overall }, details))
}

fn fmt_cf(cf: Option<f64>) -> String {
    cf.map_or_else(|| "-".into(), |c| format!("{:.1}", 100.0 * c))
}

fn table_line(out: &mut String, label: &str, r: &MetricRow) {
    let _ = writeln!(
        out,
        "{:<28} {:>7} {:>7.1} {:>11.3} {:>9.2} {:>8.1} {:>6}",
        label,
        r.queries,
        100.0 * r.p_at_1,
        r.latency_ms,
        r.avg_tokens,
        100.0 * r.embed_pct,
        fmt_cf(r.cf)
    );
}

const HEADER: &str = "queries     P@1  latency_ms  # of Ts   /embed%     CF";

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("mode: {}\n{:<28} {HEADER}\n", self.mode.name(), "dataset");
        for r in &self.datasets {
            table_line(&mut out, &r.name, r);
        }
        table_line(&mut out, &self.overall.name, &self.overall);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Parse { path: "<memory>".into(), msg: e.to_string() })
    }
}

fn write(path: &Path, text: &str) -> Result<(), EvalError> {
    std::fs::write(path, text).map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

/// Writes `<stem>.txt` (aligned table) and `<stem>.json`; returns both paths.
pub fn emit_report(report: &EvalReport, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf), EvalError> {
    if report.datasets.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    let stem = stem.as_ref();
    let (txt, json) = (stem.with_extension("txt"), stem.with_extension("json"));
    write(&txt, &report.to_table())?;
    write(&json, &report.to_json())?;
    Ok((txt, json))
}

pub fn load_report(path: impl AsRef<Path>) -> Result<EvalReport, EvalError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Parse { path: path.display().to_string(), msg: e.to_string() })
}

/// Side-by-side overall rows of several runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonRow {
    pub label: String,
    pub report: EvalReport,
}

impl ComparisonReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<28} {HEADER}\n", "model");
        for r in &self.rows {
            table_line(&mut out, &r.label, &r.report.overall);
        }
        if let Some(first) = self.rows.first() {
            out.push_str("\nP@1 per dataset\n");
            let _ = write!(out, "{:<28}", "model");
            for d in &first.report.datasets {
                let _ = write!(out, " {:>24}", d.name);
            }
            out.push('\n');
            for r in &self.rows {
                let _ = write!(out, "{:<28}", r.label);
                for d in &r.report.datasets {
                    let _ = write!(out, " {:>24.1}", 100.0 * d.p_at_1);
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn emit(&self, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf), EvalError> {
        if self.rows.is_empty() {
            return Err(EvalError::EmptyReport);
        }
        let stem = stem.as_ref();
        let (txt, json) = (stem.with_extension("txt"), stem.with_extension("json"));
        write(&txt, &self.to_table())?;
        write(&json, &self.to_json())?;
        Ok((txt, json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AugTarget, Content, TrainingSample};
    use crate::model::{init_model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> EmbeddingVec {
        EmbeddingVec::normalize(v).unwrap()
    }

    #[test]
    fn top1_rules() {
        let q = unit(&[0.6, 0.8]);
        let pool = vec![unit(&[1.0, 0.0]), q.clone(), unit(&[0.0, 1.0])];
        assert_eq!(retrieve_top1(&q, &pool).unwrap(), 1);
        let tied = vec![unit(&[0.0, 1.0]), unit(&[1.0, 0.0]), unit(&[1.0, 0.0])];
        assert_eq!(retrieve_top1(&unit(&[1.0, 0.0]), &tied).unwrap(), 1);
        assert!(matches!(retrieve_top1(&q, &[]), Err(EvalError::EmptyPool)));
    }

    #[test]
    fn top1_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut v = || unit(&(0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
            let q = v();
            let pool: Vec<EmbeddingVec> = (0..16).map(|_| v()).collect();
            let scores: Vec<f64> = pool.iter().map(|d| d.values().iter().zip(q.values()).map(|(a, b)| a * b).sum()).collect();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let oracle = scores.iter().position(|&s| s == best).unwrap();
            assert_eq!(retrieve_top1(&q, &pool).unwrap(), oracle);
        }
    }

    fn trace(decision: Decision, tokens: usize, conf: Option<f64>) -> RoutingTrace {
        RoutingTrace { decision, confidence: conf, generated: vec![], token_count: tokens, gen_latency_ms: 1.0, truncated: false, positions: 0 }
    }

    #[test]
    fn counting_metrics() {
        let results: Vec<RetrievalResult> = (0..10)
            .map(|i| RetrievalResult {
                query_id: format!("q{i}"),
                dataset: "d".into(),
                top1_doc: 0,
                correct: true,
                trace: if i < 6 { trace(Decision::Embed, 1, Some(0.9)) } else { trace(Decision::Augment, 4, Some(0.7)) },
            })
            .collect();
        let r = row("d", &results);
        assert!((r.embed_pct - 0.6).abs() < 1e-12);
        assert_eq!(r.p_at_1, 1.0);
        assert!((r.avg_tokens - 2.2).abs() < 1e-12);
        assert!((r.cf.unwrap() - 0.82).abs() < 1e-12);
        let o = overall(&[r.clone(), MetricRow { p_at_1: 0.0, cf: None, ..r.clone() }]);
        assert_eq!(o.p_at_1, 0.5);
        assert_eq!(o.cf, r.cf);
    }

    fn dataset() -> Dataset {
        let samples = (0..4)
            .map(|i| TrainingSample {
                id: format!("s{i}"),
                query: Content::text(vec![10 + i, 11]),
                aug_target: AugTarget::EmbedOnly,
                positive: Content::text(vec![20 + i]),
                hard_negatives: vec![Content::text(vec![30 + i])],
            })
            .collect();
        Dataset { name: "d".into(), samples, aug_required: None }
    }

    #[test]
    fn force_embed_run_and_cached_pool() {
        let s = init_model(&ModelConfig { hidden_dim: 16, layers: 1, heads: 2, max_seq_len: 40, ..Default::default() }).unwrap();
        let d = dataset();
        let (rep, details) = run_eval(&s, std::slice::from_ref(&d), InferenceMode::ForceEmbed, 8).unwrap();
        assert_eq!(rep.overall.avg_tokens, 1.0);
        assert_eq!(rep.overall.embed_pct, 1.0);
        assert_eq!(rep.overall.cf, None);
        assert_eq!(details.len(), 4);
        let cached = embed_pool(&s, &d).unwrap();
        let fresh: Vec<EmbeddingVec> = build_candidate_pool(&d).iter().map(|c| embed_document(&s, c).unwrap()).collect();
        assert_eq!(cached, fresh);
        assert!(rep.to_table().lines().last().unwrap().trim_end().ends_with('-'));
    }

    #[test]
    fn emit_round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let r = MetricRow { name: "d".into(), queries: 3, p_at_1: 1.0 / 3.0, latency_ms: 0.125, avg_tokens: 1.0, embed_pct: 1.0, cf: Some(0.7) };
        let rep = EvalReport { mode: InferenceMode::Adaptive, datasets: vec![r.clone()], overall: overall(&[r]) };
        let (_, json) = emit_report(&rep, dir.path().join("eval")).unwrap();
        assert_eq!(load_report(json).unwrap(), rep);
        let empty = EvalReport { datasets: vec![], ..rep };
        assert!(matches!(emit_report(&empty, dir.path().join("x")), Err(EvalError::EmptyReport)));
        assert!(matches!(run_eval(&init_model(&ModelConfig::default()).unwrap(), &[], InferenceMode::Adaptive, 4), Err(EvalError::EmptyReport)));
    }
}
