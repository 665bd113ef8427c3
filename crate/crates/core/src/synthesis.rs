//! Teacher-driven augmentation synthesis.
//!
//! Each query is rendered into the reasoning/answer prompt, sent to a teacher
//! (an HTTP endpoint or the deterministic [`MockTeacher`]), and the first
//! `<answer>` span of the reply becomes the augmentation.

use crate::corpus::{AugTarget, Content, Dataset};
use crate::vocab::WordHasher;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::time::{Duration, Instant};

pub const PROMPT_TEMPLATE: &str = "The User asks a question (with an image), and the Assistant solves it.\n\
The assistant first thinks about the reasoning process in the mind and then provides the user with the answer.\n\
The reasoning process and answer are enclosed within <think> </think> and <answer> </answer> tags, respectively, \
i.e., <think> reasoning process here </think> <answer> answer here </answer>.\n\
User: {question}. Assistant:";

const PLACEHOLDER: &str = "{question}";
const OPEN: &str = "<answer>";
const CLOSE: &str = "</answer>";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SynthesisError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("teacher output has no well-formed <answer> span: {0:?}")]
    MalformedTeacherOutput(String),
    #[error("teacher unavailable: {0}")]
    TeacherUnavailable(String),
    #[error("dataset `{0}` is labelled as not requiring augmentation")]
    NotAugmentationRequired(String),
    #[error("no ground-truth answer for sample `{0}`")]
    MissingSidecar(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText {
    pub body: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherResponse {
    pub raw: String,
    pub latency_ms: f64,
}

pub fn render_prompt(question: &str) -> Result<PromptText, SynthesisError> {
    if question.is_empty() {
        return Err(SynthesisError::EmptyQuestion);
    }
    Ok(PromptText { body: PROMPT_TEMPLATE.replacen(PLACEHOLDER, question, 1) })
}

/// Returns the trimmed content of the first well-formed `<answer>...</answer>` span.
///
/// A span is well-formed when its content contains no further opening tag, so
/// for `<answer>a<answer>b</answer>` the inner span `b` is taken. Empty spans
/// are not usable answers.
pub fn extract_answer(resp: &TeacherResponse) -> Result<String, SynthesisError> {
    extract_answer_text(&resp.raw)
}

pub fn extract_answer_text(raw: &str) -> Result<String, SynthesisError> {
    let malformed = || SynthesisError::MalformedTeacherOutput(raw.chars().take(200).collect());
    let mut from = 0;
    while let Some(open) = raw[from..].find(OPEN).map(|i| from + i) {
        let body_start = open + OPEN.len();
        let close = raw[body_start..].find(CLOSE).map(|i| body_start + i).ok_or_else(malformed)?;
        let body = &raw[body_start..close];
        if let Some(inner) = body.rfind(OPEN) {
            let inner = body[inner + OPEN.len()..].trim();
            if !inner.is_empty() {
                return Ok(inner.to_string());
            }
        } else if !body.trim().is_empty() {
            return Ok(body.trim().to_string());
        }
        from = close + CLOSE.len();
    }
    Err(malformed())
}

/// Deterministic stand-in for the teacher: echoes the ground-truth answer.
pub fn mock_teacher(prompt: &PromptText, sidecar_answer: &str) -> TeacherResponse {
    let n = prompt.body.len();
    TeacherResponse {
        raw: format!("<think>The prompt has {n} characters; recall the stored answer.</think> <answer>{sidecar_answer}</answer>"),
        latency_ms: 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TeacherRequest {
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
    #[serde(skip)]
    pub sample_id: String,
}

pub trait Teacher {
    fn complete(&self, req: &TeacherRequest) -> Result<TeacherResponse, SynthesisError>;
}

#[derive(Debug, Clone, Default)]
pub struct MockTeacher {
    answers: HashMap<String, String>,
}

impl MockTeacher {
    pub fn new(answers: HashMap<String, String>) -> Self {
        Self { answers }
    }
}

impl Teacher for MockTeacher {
    fn complete(&self, req: &TeacherRequest) -> Result<TeacherResponse, SynthesisError> {
        let answer = self.answers.get(&req.sample_id).ok_or_else(|| SynthesisError::MissingSidecar(req.sample_id.clone()))?;
        Ok(mock_teacher(&PromptText { body: req.prompt.clone() }, answer))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DecodingParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

/// Teacher reached over HTTP: `POST {prompt, image_b64?}` → `{text}`.
#[derive(Debug, Clone)]
pub struct HttpTeacher {
    pub url: String,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
    pub decoding: DecodingParams,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_b64: Option<&'a str>,
    #[serde(flatten)]
    decoding: &'a DecodingParams,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

impl HttpTeacher {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: Duration::from_secs(30),
            retries: 3,
            backoff: Duration::from_millis(200),
            decoding: DecodingParams::default(),
        }
    }
}

impl Teacher for HttpTeacher {
    fn complete(&self, req: &TeacherRequest) -> Result<TeacherResponse, SynthesisError> {
        let config = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build();
        let agent = ureq::Agent::new_with_config(config);
        let body = WireRequest { prompt: &req.prompt, image_b64: req.image_b64.as_deref(), decoding: &self.decoding };
        let mut last = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            let start = Instant::now();
            match agent.post(&self.url).send_json(&body) {
                Ok(mut resp) => {
                    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
                    return match resp.body_mut().read_json::<WireResponse>() {
                        Ok(w) if !w.text.is_empty() => Ok(TeacherResponse { raw: w.text, latency_ms }),
                        Ok(_) => Err(SynthesisError::MalformedTeacherOutput(String::new())),
                        Err(e) => Err(SynthesisError::MalformedTeacherOutput(e.to_string())),
                    };
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(SynthesisError::TeacherUnavailable(format!("{} after {} retries: {last}", self.url, self.retries)))
    }
}

/// Plain-text rendering of a toy query: text ids as `t<id>`, one `<image>` marker for visual content.
pub fn question_text(query: &Content) -> String {
    let mut parts = Vec::new();
    if !query.visual.is_empty() {
        parts.push("<image>".to_string());
    }
    parts.extend(query.text.iter().map(|t| format!("t{t}")));
    parts.join(" ")
}

/// Visual tokens packed as little-endian u32 and base64-encoded.
pub fn image_payload(query: &Content) -> Option<String> {
    if query.visual.is_empty() {
        return None;
    }
    let bytes: Vec<u8> = query.visual.iter().flat_map(|t| t.to_le_bytes()).collect();
    Some(base64::engine::general_purpose::STANDARD.encode(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisFailure {
    pub dataset: String,
    pub sample_id: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct SynthesisOutcome {
    pub datasets: Vec<Dataset>,
    pub failures: Vec<SynthesisFailure>,
}

/// Fills `AugmentWith` targets from teacher answers.
///
/// Datasets already labelled `aug_required = false` are rejected; unlabelled
/// datasets are accepted so that synthesis can run before division. A sample
/// whose teacher reply is unusable keeps its previous target and is listed in
/// `failures`. An unreachable teacher aborts the whole run.
pub fn synthesize_augmentations(
    datasets: &[Dataset],
    hasher: &WordHasher,
    teacher: &dyn Teacher,
) -> Result<SynthesisOutcome, SynthesisError> {
    if let Some(d) = datasets.iter().find(|d| d.aug_required == Some(false)) {
        return Err(SynthesisError::NotAugmentationRequired(d.name.clone()));
    }
    let mut out = Vec::with_capacity(datasets.len());
    let mut failures = Vec::new();
    for d in datasets {
        let mut d = d.clone();
        for s in &mut d.samples {
            let fail = |e: SynthesisError| SynthesisFailure { dataset: d.name.clone(), sample_id: s.id.clone(), error: e.to_string() };
            let prompt = match render_prompt(&question_text(&s.query)) {
                Ok(p) => p,
                Err(e) => {
                    failures.push(fail(e));
                    continue;
                }
            };
            let req = TeacherRequest { prompt: prompt.body, image_b64: image_payload(&s.query), sample_id: s.id.clone() };
            let answer = match teacher.complete(&req) {
                Ok(resp) => extract_answer(&resp),
                Err(e @ SynthesisError::TeacherUnavailable(_)) => return Err(e),
                Err(e) => Err(e),
            };
            match answer.map(|a| hasher.tokenize(&a)) {
                Ok(tokens) if !tokens.is_empty() => s.aug_target = AugTarget::AugmentWith(tokens),
                Ok(_) => failures.push(fail(SynthesisError::MalformedTeacherOutput(String::new()))),
                Err(e) => failures.push(fail(e)),
            }
        }
        out.push(d);
    }
    Ok(SynthesisOutcome { datasets: out, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_toy_suite, ToySuiteConfig};

    #[test]
    fn prompt_tail_and_length() {
        let p = render_prompt("Is the boat on the right?").unwrap();
        assert!(p.body.ends_with("User: Is the boat on the right?. Assistant:"));
        assert_eq!(p.body.len(), PROMPT_TEMPLATE.len() - PLACEHOLDER.len() + "Is the boat on the right?".len());
        for tag in ["<think>", "</think>", "<answer>", "</answer>"] {
            assert!(p.body.contains(tag));
        }
        assert_eq!(render_prompt(""), Err(SynthesisError::EmptyQuestion));
    }

    #[test]
    fn placeholder_in_question_is_preserved() {
        let p = render_prompt("what is {question}").unwrap();
        assert!(p.body.ends_with("User: what is {question}. Assistant:"));
    }

    #[test]
    fn extract_basic_cases() {
        assert_eq!(extract_answer_text("<think>x</think> <answer>Paris</answer>").unwrap(), "Paris");
        assert!(matches!(extract_answer_text("<think>x</think> no tags"), Err(SynthesisError::MalformedTeacherOutput(_))));
        assert_eq!(extract_answer_text("<answer>a</answer><answer>b</answer>").unwrap(), "a");
    }

    #[test]
    fn mock_composes_to_identity() {
        let p = render_prompt("q").unwrap();
        let r = mock_teacher(&p, "red dress");
        assert!(r.raw.contains("<answer>red dress</answer>"));
        assert_eq!(r, mock_teacher(&p, "red dress"));
        assert_eq!(extract_answer(&r).unwrap(), "red dress");
    }

    struct Flaky(MockTeacher, String);
    impl Teacher for Flaky {
        fn complete(&self, req: &TeacherRequest) -> Result<TeacherResponse, SynthesisError> {
            if req.sample_id == self.1 {
                return Ok(TeacherResponse { raw: "<think>oops</think>".into(), latency_ms: 0.0 });
            }
            self.0.complete(req)
        }
    }

    #[test]
    fn malformed_reply_is_isolated() {
        let suite = generate_toy_suite(&ToySuiteConfig { samples_per_dataset: 20, keys_per_slot: 5, ..Default::default() }, 1).unwrap();
        let mut d = suite.corpus.datasets[0].clone();
        d.samples.truncate(5);
        let bad = d.samples[2].id.clone();
        let teacher = Flaky(MockTeacher::new(suite.sidecar.answer_map()), bad.clone());
        let out = synthesize_augmentations(std::slice::from_ref(&d), &suite.corpus.hasher, &teacher).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].sample_id, bad);
        let filled = out.datasets[0].samples.iter().filter(|s| s.aug_target.is_augment()).count();
        assert_eq!(filled, 4);
        for (a, b) in out.datasets[0].samples.iter().zip(&d.samples) {
            assert_eq!((&a.query, &a.positive, &a.hard_negatives), (&b.query, &b.positive, &b.hard_negatives));
        }
    }

    #[test]
    fn refuses_datasets_labelled_not_required() {
        let suite = generate_toy_suite(&ToySuiteConfig { samples_per_dataset: 20, keys_per_slot: 5, ..Default::default() }, 1).unwrap();
        let mut d = suite.corpus.datasets[0].clone();
        d.aug_required = Some(false);
        let t = MockTeacher::new(suite.sidecar.answer_map());
        assert!(matches!(
            synthesize_augmentations(&[d], &suite.corpus.hasher, &t),
            Err(SynthesisError::NotAugmentationRequired(_))
        ));
    }

    #[test]
    fn image_payload_only_for_visual_queries() {
        assert!(image_payload(&Content::text(vec![9])).is_none());
        let p = image_payload(&Content::image(vec![400, 401])).unwrap();
        let bytes = base64::engine::general_purpose::STANDARD.decode(p).unwrap();
        assert_eq!(bytes.len(), 8);
        assert_eq!(question_text(&Content::interleaved(vec![400], vec![7, 8])), "<image> t7 t8");
    }
}
