//! Multimodal scorer clients: the trait, the HTTP binding and the
//! retry/scoring loop. Every external call is recorded; failures become
//! score-less records rather than dropped work.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScorerKind {
    Gpt4oRubric,
    Vqa,
    Detector,
}

/// One scoring call's outcome. `score` is absent when the reply carried
/// no parseable number; `raw_response` always keeps the reply verbatim.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub prompt_id: String,
    pub image_ref: PathBuf,
    pub scorer: ScorerKind,
    pub score: Option<f64>,
    pub raw_response: String,
    pub attempts: u32,
    pub error: Option<String>,
}

/// A multimodal completion endpoint that grades one image against an
/// instruction and returns its raw textual reply.
pub trait ScorerClient: Sync {
    fn score_image(&self, image: &Path, instruction: &str) -> Result<String, String>;
    fn kind(&self) -> ScorerKind {
        ScorerKind::Gpt4oRubric
    }
}

/// One image to score with its prompt id and rubric instruction.
#[derive(Debug, Clone)]
pub struct ScoringJob {
    pub prompt_id: String,
    pub image: PathBuf,
    pub instruction: String,
}

/// Bounded exponential backoff for scorer calls.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// First number in a reply, clamped to the rubric range.
fn parse_score(raw: &str) -> Option<f64> {
    let mut start = None;
    for (i, c) in raw.char_indices() {
        if c.is_ascii_digit() {
            start = Some(i);
            break;
        }
    }
    let start = start?;
    let tail = &raw[start..];
    let end = tail
        .char_indices()
        .find(|(_, c)| !(c.is_ascii_digit() || *c == '.'))
        .map(|(i, _)| i)
        .unwrap_or(tail.len());
    let value: f64 = tail[..end].trim_end_matches('.').parse().ok()?;
    (0.0..=100.0).contains(&value).then_some(value)
}

fn score_one(job: &ScoringJob, client: &dyn ScorerClient, retry: RetryPolicy) -> ScoreRecord {
    let mut attempts = 0;
    let mut last_error = String::new();
    while attempts < retry.max_attempts.max(1) {
        attempts += 1;
        match client.score_image(&job.image, &job.instruction) {
            Ok(raw) => {
                let score = parse_score(&raw);
                return ScoreRecord {
                    prompt_id: job.prompt_id.clone(),
                    image_ref: job.image.clone(),
                    scorer: client.kind(),
                    score,
                    error: score.is_none().then(|| "malformed score".to_string()),
                    raw_response: raw,
                    attempts,
                };
            }
            Err(e) => {
                last_error = e;
                if attempts < retry.max_attempts {
                    std::thread::sleep(retry.base_delay * 2u32.pow(attempts - 1));
                }
            }
        }
    }
    ScoreRecord {
        prompt_id: job.prompt_id.clone(),
        image_ref: job.image.clone(),
        scorer: client.kind(),
        score: None,
        raw_response: String::new(),
        attempts,
        error: Some(last_error),
    }
}

/// Scores every job with at most `concurrency` in-flight calls. Returns
/// exactly one record per job, in job order.
pub fn score_images(
    jobs: &[ScoringJob],
    client: &dyn ScorerClient,
    concurrency: usize,
    retry: RetryPolicy,
) -> Vec<ScoreRecord> {
    let workers = concurrency.clamp(1, jobs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<ScoreRecord>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let record = score_one(&jobs[i], client, retry);
                results.lock().expect("poisoned results")[i] = Some(record);
            });
        }
    });
    results
        .into_inner()
        .expect("poisoned results")
        .into_iter()
        .map(|r| r.expect("every job produced a record"))
        .collect()
}

/// Default environment variable carrying the scorer credential.
pub const SCORER_TOKEN_ENV: &str = "TOME_SCORER_TOKEN";

#[derive(Serialize)]
struct ScoreRequest<'a> {
    image_base64: String,
    instruction: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    response: String,
}

/// HTTPS multimodal-completion client: posts the base64 image plus the
/// rubric instruction, expects `{"response": "<text>"}` back. The bearer
/// credential comes from an environment variable.
pub struct HttpScorer {
    client: reqwest::blocking::Client,
    endpoint: String,
    token: Option<String>,
}

impl HttpScorer {
    pub fn new(endpoint: &str, token_env: &str) -> Result<Self, EvalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| EvalError::ScorerUnavailable(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: endpoint.to_string(),
            token: std::env::var(token_env).ok(),
        })
    }
}

impl ScorerClient for HttpScorer {
    fn score_image(&self, image: &Path, instruction: &str) -> Result<String, String> {
        let bytes = std::fs::read(image).map_err(|e| format!("{}: {e}", image.display()))?;
        let request = ScoreRequest {
            image_base64: base64::engine::general_purpose::STANDARD.encode(bytes),
            instruction,
        };
        let mut builder = self.client.post(&self.endpoint).json(&request);
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(|e| e.to_string())?;
        if !response.status().is_success() {
            return Err(format!("status {}", response.status()));
        }
        let body: ScoreResponse = response.json().map_err(|e| e.to_string())?;
        Ok(body.response)
    }
}
