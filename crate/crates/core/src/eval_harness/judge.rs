use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{LynxError, Result};
use crate::media::frame_paths;

pub const URL_ENV: &str = "LYNX_JUDGE_URL";
pub const TOKEN_ENV: &str = "LYNX_JUDGE_TOKEN";

pub const DIMENSIONS: [&str; 4] = ["prompt_alignment", "aesthetic", "motion_naturalness", "video_quality"];

/// Default rubric. `{prompt}`, `{case_id}`, `{num_frames}` and
/// `{dimensions}` are substituted before sending.
pub const DEFAULT_RUBRIC: &str = "You are rating a generated video of a person.\n\
Text prompt: {prompt}\n\
Case: {case_id} ({num_frames} frames attached in order)\n\
Score each dimension from 0 (worst) to 1 (best): {dimensions}.\n\
- prompt_alignment: how well the content follows the prompt.\n\
- aesthetic: composition, lighting and visual appeal.\n\
- motion_naturalness: plausibility and smoothness of movement.\n\
- video_quality: sharpness, artifacts and temporal stability.\n\
Reply with JSON only: {\"scores\": {\"prompt_alignment\": x, \"aesthetic\": x, \"motion_naturalness\": x, \"video_quality\": x}}";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeScores {
    pub prompt_alignment: f64,
    pub aesthetic: f64,
    pub motion_naturalness: f64,
    pub video_quality: f64,
}

impl JudgeScores {
    pub fn as_array(&self) -> [f64; 4] {
        [self.prompt_alignment, self.aesthetic, self.motion_naturalness, self.video_quality]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            prompt_alignment: a[0],
            aesthetic: a[1],
            motion_naturalness: a[2],
            video_quality: a[3],
        }
    }
}

/// Parses `{"scores": {...}}`; every dimension must be a number in `[0, 1]`
/// and no other score keys are accepted.
pub fn parse_scores(body: &str) -> Result<JudgeScores> {
    let v: Value = serde_json::from_str(body).map_err(|e| LynxError::JudgeResponse(format!("not JSON: {e}")))?;
    let scores = v
        .get("scores")
        .and_then(Value::as_object)
        .ok_or_else(|| LynxError::JudgeResponse("missing `scores` object".into()))?;
    if let Some(k) = scores.keys().find(|k| !DIMENSIONS.contains(&k.as_str())) {
        return Err(LynxError::JudgeResponse(format!("unknown score field `{k}`")));
    }
    let mut out = [0.0; 4];
    for (slot, dim) in out.iter_mut().zip(DIMENSIONS) {
        let x = scores
            .get(dim)
            .ok_or_else(|| LynxError::JudgeResponse(format!("missing score field `{dim}`")))?
            .as_f64()
            .ok_or_else(|| LynxError::JudgeResponse(format!("score field `{dim}` is not a number")))?;
        if !(0.0..=1.0).contains(&x) {
            return Err(LynxError::JudgeResponse(format!("score field `{dim}` = {x} is outside [0, 1]")));
        }
        *slot = x;
    }
    Ok(JudgeScores::from_array(out))
}

pub fn render_rubric(template: &str, case_id: &str, prompt: &str, num_frames: usize) -> String {
    template
        .replace("{prompt}", prompt)
        .replace("{case_id}", case_id)
        .replace("{num_frames}", &num_frames.to_string())
        .replace("{dimensions}", &DIMENSIONS.join(", "))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
    /// Retries after the first attempt.
    pub max_retries: usize,
    pub backoff: Duration,
    pub max_in_flight: usize,
}

impl JudgeConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            token: None,
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff: Duration::from_millis(500),
            max_in_flight: 4,
        }
    }

    /// Endpoint and bearer token from `LYNX_JUDGE_URL` / `LYNX_JUDGE_TOKEN`.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(URL_ENV).map_err(|_| LynxError::config(URL_ENV, "environment variable is not set"))?;
        let mut c = Self::new(url);
        c.token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub scores: JudgeScores,
    pub attempts: usize,
}

#[derive(Debug)]
pub struct JudgeClient {
    config: JudgeConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(String),
}

impl JudgeClient {
    pub fn new(config: JudgeConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &JudgeConfig {
        &self.config
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let mut req = self.agent.post(&self.config.url);
        if let Some(t) = &self.config.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        match req.send_json(body) {
            Err(e) => Attempt::Retry(e.to_string()),
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp.body_mut().read_to_string();
                match (status, text) {
                    (200..=299, Ok(t)) => Attempt::Done(t),
                    (200..=299, Err(e)) => Attempt::Retry(e.to_string()),
                    (429 | 500..=599, _) => Attempt::Retry(format!("HTTP {status}")),
                    (_, t) => Attempt::Fatal(format!("HTTP {status}: {}", t.unwrap_or_default())),
                }
            }
        }
    }

    /// Sends one request body, retrying transport failures, 429 and 5xx with
    /// doubling backoff. A response that fails to parse is never retried.
    pub fn send(&self, body: &Value) -> Result<JudgeOutcome> {
        let mut last = String::new();
        for attempt in 1..=self.config.max_retries + 1 {
            if attempt > 1 {
                let wait = self.config.backoff * 2u32.pow((attempt - 2) as u32);
                log::warn!("judge retry {} after {last}; waiting {wait:?}", attempt - 1);
                std::thread::sleep(wait);
            }
            match self.attempt(body) {
                Attempt::Done(text) => {
                    return Ok(JudgeOutcome {
                        scores: parse_scores(&text)?,
                        attempts: attempt,
                    })
                }
                Attempt::Retry(m) => last = m,
                Attempt::Fatal(m) => {
                    return Err(LynxError::JudgeTransport {
                        attempts: attempt,
                        message: m,
                    })
                }
            }
        }
        Err(LynxError::JudgeTransport {
            attempts: self.config.max_retries + 1,
            message: last,
        })
    }
}

/// Request body for one case. Frames are listed as paths in order.
pub fn request_body(case_id: &str, prompt: &str, frames: &[String], rubric: &str) -> Value {
    json!({
        "case_id": case_id,
        "prompt": prompt,
        "rubric": render_rubric(rubric, case_id, prompt, frames.len()),
        "dimensions": DIMENSIONS,
        "frames": frames,
    })
}

pub fn judge_case(video: &Path, case_id: &str, prompt: &str, client: &JudgeClient, rubric: &str) -> Result<JudgeOutcome> {
    let frames: Vec<String> = if video.is_dir() {
        frame_paths(video)?.iter().map(|p| p.display().to_string()).collect()
    } else {
        vec![video.display().to_string()]
    };
    client.send(&request_body(case_id, prompt, &frames, rubric))
}

pub struct JudgeJob<'a> {
    pub case_id: &'a str,
    pub prompt: &'a str,
    pub video: &'a Path,
}

/// Judges every job with at most `max_in_flight` requests outstanding.
/// Results come back in job order.
pub fn judge_all(jobs: &[JudgeJob<'_>], client: &JudgeClient, rubric: &str) -> Vec<Result<JudgeOutcome>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<JudgeOutcome>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let workers = client.config.max_in_flight.clamp(1, jobs.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let r = judge_case(job.video, job.case_id, job.prompt, client, rubric);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect()
}
