//! Candidate generation: a remote completion client, a deterministic mock,
//! and a wrapper adding retries, rate limits, a spend cap and a transcript.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::{self, HttpFailure};
use crate::lang::{LexTokenizer, Tokenizer};
use crate::retry::{Attempt, RetryPolicy};

pub const DEFAULT_TEMPERATURE: f64 = 0.8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("token spend cap reached ({spent} of {cap})")]
    BudgetExceeded { spent: u64, cap: u64 },
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("permanent failure: {0}")]
    Permanent(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("environment variable {0} is not set")]
    MissingEnv(&'static str),
    #[error("transcript: {0}")]
    Transcript(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt_text: String,
    pub sample_count: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub stop_sequences: Vec<String>,
    pub model_id: String,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.sample_count == 0 {
            return Err(GenError::InvalidRequest("sample count must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(GenError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GenError::InvalidRequest("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub text: String,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub example_id: String,
    pub sample_index: usize,
    pub text: String,
    pub finish_reason: FinishReason,
}

/// One completion call. Implementations must be safe to share across threads.
pub trait GenerationClient: Send + Sync {
    fn id(&self) -> String;

    fn complete(&self, example_id: &str, request: &GenerationRequest) -> Result<Vec<Choice>, GenError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    #[serde(skip)]
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub requests_per_minute: Option<u32>,
    /// Prompt plus completion tokens allowed over the generator's lifetime.
    pub token_cap: Option<u64>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { retry: RetryPolicy::default(), max_in_flight: 4, requests_per_minute: None, token_cap: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationOutcome {
    pub candidates: Vec<Candidate>,
    pub attempts: u32,
}

struct Limiter {
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    released: Condvar,
    per_minute: Option<u32>,
    starts: Mutex<VecDeque<Instant>>,
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.released.notify_one();
    }
}

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max_in_flight {
            n = self.released.wait(n).unwrap();
        }
        *n += 1;
        drop(n);
        if let Some(rpm) = self.per_minute.filter(|&r| r > 0) {
            let window = Duration::from_secs(60);
            loop {
                let mut starts = self.starts.lock().unwrap();
                let now = Instant::now();
                while starts.front().is_some_and(|t| now.duration_since(*t) >= window) {
                    starts.pop_front();
                }
                if starts.len() < rpm as usize {
                    starts.push_back(now);
                    break;
                }
                let wait = window - now.duration_since(starts[0]);
                drop(starts);
                thread::sleep(wait);
            }
        }
        Permit(self)
    }
}

/// Shared front end for any [`GenerationClient`].
pub struct Generator<'c> {
    client: &'c dyn GenerationClient,
    config: GeneratorConfig,
    limiter: Limiter,
    spent: AtomicU64,
    transcript: Option<Mutex<File>>,
    tokenizer: LexTokenizer,
}

impl<'c> Generator<'c> {
    pub fn new(client: &'c dyn GenerationClient, config: GeneratorConfig) -> Self {
        let limiter = Limiter {
            max_in_flight: config.max_in_flight.max(1),
            in_flight: Mutex::new(0),
            released: Condvar::new(),
            per_minute: config.requests_per_minute,
            starts: Mutex::new(VecDeque::new()),
        };
        Generator { client, config, limiter, spent: AtomicU64::new(0), transcript: None, tokenizer: LexTokenizer }
    }

    /// Appends every request and response to `path` as JSON lines.
    pub fn with_transcript(mut self, path: &Path) -> Result<Self, GenError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| GenError::Transcript(e.to_string()))?;
        self.transcript = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn tokens_spent(&self) -> u64 {
        self.spent.load(Ordering::SeqCst)
    }

    fn log(&self, entry: serde_json::Value) {
        if let Some(t) = &self.transcript {
            let mut f = t.lock().unwrap();
            if let Err(e) = writeln!(f, "{entry}") {
                log::warn!("transcript write failed: {e}");
            }
        }
    }

    /// Exactly `sample_count` candidates. Hard failures other than
    /// authentication and the spend cap become `Error` candidates.
    pub fn generate(&self, example_id: &str, request: &GenerationRequest) -> Result<GenerationOutcome, GenError> {
        request.validate()?;
        if let Some(cap) = self.config.token_cap {
            let spent = self.tokens_spent();
            if spent >= cap {
                return Err(GenError::BudgetExceeded { spent, cap });
            }
        }
        let prompt_cost = self.tokenizer.count(&request.prompt_text) as u64;
        let (result, attempts) = self.config.retry.run(|attempt| {
            let _permit = self.limiter.acquire();
            let res = self.client.complete(example_id, request);
            self.log(json!({
                "example_id": example_id,
                "attempt": attempt,
                "client": self.client.id(),
                "request": request,
                "response": res.as_ref().ok(),
                "error": res.as_ref().err().map(|e| e.to_string()),
            }));
            res.map_err(|e| match e {
                GenError::Transient(_) => Attempt::Transient(e),
                other => Attempt::Fatal(other),
            })
        });
        let mut choices = match result {
            Ok(c) => c,
            Err(e @ (GenError::Auth(_) | GenError::InvalidRequest(_))) => return Err(e),
            Err(e) => {
                log::warn!("{example_id}: generation failed after {attempts} attempts: {e}");
                Vec::new()
            }
        };
        let completion: u64 = choices.iter().map(|c| self.tokenizer.count(&c.text) as u64).sum();
        self.spent.fetch_add(prompt_cost + completion, Ordering::SeqCst);
        choices.truncate(request.sample_count);
        let candidates = (0..request.sample_count)
            .map(|i| match choices.get(i) {
                Some(c) => Candidate {
                    example_id: example_id.to_string(),
                    sample_index: i,
                    text: c.text.clone(),
                    finish_reason: c.finish_reason,
                },
                None => Candidate {
                    example_id: example_id.to_string(),
                    sample_index: i,
                    text: String::new(),
                    finish_reason: FinishReason::Error,
                },
            })
            .collect();
        Ok(GenerationOutcome { candidates, attempts })
    }
}

#[derive(Debug, Clone)]
pub struct RemoteGenConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl RemoteGenConfig {
    pub fn from_env() -> Result<Self, GenError> {
        let endpoint = std::env::var("GEN_ENDPOINT").map_err(|_| GenError::MissingEnv("GEN_ENDPOINT"))?;
        Ok(RemoteGenConfig {
            endpoint,
            api_key: std::env::var("GEN_API_KEY").ok(),
            timeout: Duration::from_secs(300),
        })
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    n: usize,
    temperature: f64,
    max_tokens: usize,
    stop: &'a [String],
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

/// HTTP completion client.
pub struct RemoteGenerator {
    config: RemoteGenConfig,
    agent: ureq::Agent,
}

impl RemoteGenerator {
    pub fn new(config: RemoteGenConfig) -> Self {
        let agent = http::agent(config.timeout);
        RemoteGenerator { config, agent }
    }
}

impl GenerationClient for RemoteGenerator {
    fn id(&self) -> String {
        format!("remote:{}", self.config.endpoint)
    }

    fn complete(&self, _example_id: &str, request: &GenerationRequest) -> Result<Vec<Choice>, GenError> {
        let body = WireRequest {
            model: &request.model_id,
            prompt: &request.prompt_text,
            n: request.sample_count,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            stop: &request.stop_sequences,
        };
        let resp: WireResponse =
            http::post_json(&self.agent, &self.config.endpoint, self.config.api_key.as_deref(), &body)
                .map_err(|f| match f {
                    HttpFailure::Auth(m) => GenError::Auth(m),
                    HttpFailure::Transient(m) => GenError::Transient(m),
                    HttpFailure::Permanent(m) => GenError::Permanent(m),
                })?;
        Ok(resp
            .choices
            .into_iter()
            .map(|c| Choice {
                text: c.text,
                finish_reason: match c.finish_reason.as_deref() {
                    Some("length") => FinishReason::Length,
                    Some("error") => FinishReason::Error,
                    _ => FinishReason::Stop,
                },
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "index")]
pub enum PlantMode {
    /// Hash-derived filler only.
    #[default]
    Random,
    /// Sample `i` is the ground-truth body; the rest is filler.
    GroundTruthAt(usize),
    /// Every sample fails to parse.
    AllBroken,
    /// Every sample refers to an undefined name.
    UnknownIdentifier,
}

/// Deterministic offline generator.
#[derive(Debug, Clone, Default)]
pub struct MockGenerator {
    pub seed: u64,
    pub default_mode: PlantMode,
    /// Per-example override of `default_mode`.
    pub schedule: BTreeMap<String, PlantMode>,
    pub ground_truth: BTreeMap<String, String>,
}

fn mix(seed: u64, prompt: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(prompt.as_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

pub fn filler_text(h: u64) -> String {
    let n = h >> 8;
    match h % 4 {
        0 => format!("fun x -> x + {}", n % 1_000_003),
        1 => format!("let rec go (n:nat) : nat = if n = 0 then {} else go (n - 1) in go {}", n % 997, n % 89),
        2 => format!("fun x y -> if x > y then {} else y", n % 65_521),
        _ => format!("match {} with | 0 -> () | _ -> ()", n % 10_007),
    }
}

pub fn broken_text(h: u64) -> String {
    format!("let = ( {} in", h % 1_000_003)
}

pub fn unknown_identifier_text(h: u64) -> String {
    format!("undefined_helper_{:08x} ()", h as u32)
}

impl MockGenerator {
    pub fn mode_for(&self, example_id: &str) -> PlantMode {
        self.schedule.get(example_id).copied().unwrap_or(self.default_mode)
    }

    /// The `k` texts for one prompt.
    pub fn texts(&self, example_id: &str, prompt: &str, k: usize) -> Vec<String> {
        let mode = self.mode_for(example_id);
        (0..k)
            .map(|i| {
                let h = mix(self.seed, prompt, i);
                match mode {
                    PlantMode::GroundTruthAt(at) if at == i => match self.ground_truth.get(example_id) {
                        Some(g) => g.clone(),
                        None => filler_text(h),
                    },
                    PlantMode::AllBroken => broken_text(h),
                    PlantMode::UnknownIdentifier => unknown_identifier_text(h),
                    _ => filler_text(h),
                }
            })
            .collect()
    }
}

impl GenerationClient for MockGenerator {
    fn id(&self) -> String {
        format!("mock:{}", self.seed)
    }

    fn complete(&self, example_id: &str, request: &GenerationRequest) -> Result<Vec<Choice>, GenError> {
        Ok(self
            .texts(example_id, &request.prompt_text, request.sample_count)
            .into_iter()
            .map(|text| Choice { text, finish_reason: FinishReason::Stop })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::TestServer;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    fn request(prompt: &str, k: usize) -> GenerationRequest {
        GenerationRequest {
            prompt_text: prompt.into(),
            sample_count: k,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: 64,
            stop_sequences: vec![],
            model_id: "m".into(),
        }
    }

    fn fast() -> GeneratorConfig {
        GeneratorConfig {
            retry: RetryPolicy { max_attempts: 5, base_delay: Duration::from_millis(1), factor: 2.0 },
            ..GeneratorConfig::default()
        }
    }

    fn mock(mode: PlantMode) -> MockGenerator {
        MockGenerator {
            seed: 7,
            default_mode: mode,
            schedule: BTreeMap::new(),
            ground_truth: BTreeMap::from([("e".to_string(), "add x x".to_string())]),
        }
    }

    #[test]
    fn mock_is_deterministic_and_indexed() {
        let m = mock(PlantMode::Random);
        let g = Generator::new(&m, fast());
        let a = g.generate("e", &request("p", 3)).unwrap();
        let b = g.generate("e", &request("p", 3)).unwrap();
        assert_eq!(a, b);
        let idx: Vec<usize> = a.candidates.iter().map(|c| c.sample_index).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        assert_eq!(a.attempts, 1);
    }

    #[test]
    fn plant_modes() {
        let gt = mock(PlantMode::GroundTruthAt(0)).texts("e", "p", 4);
        assert_eq!(gt[0], "add x x");
        assert!(gt[1..].iter().all(|t| t != "add x x"));
        assert!(mock(PlantMode::AllBroken).texts("e", "p", 10).iter().all(|t| t != "add x x"));
        assert!(mock(PlantMode::UnknownIdentifier).texts("e", "p", 2)[0].starts_with("undefined_helper_"));
        let mut m = mock(PlantMode::Random);
        m.schedule.insert("e".into(), PlantMode::GroundTruthAt(2));
        assert_eq!(m.texts("e", "p", 3)[2], "add x x");
        assert_ne!(m.texts("other", "p", 3)[2], "add x x");
    }

    #[test]
    fn different_prompts_give_different_texts() {
        let m = mock(PlantMode::Random);
        let prompts: Vec<String> = (0..200).map(|i| format!("prompt {i}")).collect();
        let texts: std::collections::BTreeSet<String> =
            prompts.iter().map(|p| m.texts("x", p, 1).remove(0)).collect();
        assert_eq!(texts.len(), prompts.len());
    }

    /// Fails transiently a fixed number of times, then answers.
    struct Flaky {
        failures: AtomicUsize,
        calls: AtomicUsize,
        fatal: Option<GenError>,
        short: bool,
    }

    impl GenerationClient for Flaky {
        fn id(&self) -> String {
            "flaky".into()
        }
        fn complete(&self, _: &str, req: &GenerationRequest) -> Result<Vec<Choice>, GenError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if let Some(e) = &self.fatal {
                return Err(e.clone());
            }
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(GenError::Transient("503".into()));
            }
            let n = if self.short { req.sample_count - 1 } else { req.sample_count };
            Ok((0..n).map(|i| Choice { text: format!("t{i}"), finish_reason: FinishReason::Stop }).collect())
        }
    }

    fn flaky(failures: usize) -> Flaky {
        Flaky { failures: AtomicUsize::new(failures), calls: AtomicUsize::new(0), fatal: None, short: false }
    }

    #[test]
    fn transient_failures_are_retried() {
        let f = flaky(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let g = Generator::new(&f, fast()).with_transcript(&path).unwrap();
        let out = g.generate("e", &request("p", 2)).unwrap();
        assert_eq!(out.attempts, 3);
        assert!(out.candidates.iter().all(|c| c.finish_reason == FinishReason::Stop));
        let lines = std::fs::read_to_string(&path).unwrap();
        assert_eq!(lines.lines().count(), 3);
        let last: serde_json::Value = serde_json::from_str(lines.lines().last().unwrap()).unwrap();
        assert_eq!(last["attempt"], 3);
        assert_eq!(last["response"][0]["text"], "t0");
    }

    #[test]
    fn exhausted_retries_pad_with_error_candidates() {
        let f = flaky(100);
        let g = Generator::new(&f, fast());
        let out = g.generate("e", &request("p", 3)).unwrap();
        assert_eq!(out.attempts, 5);
        assert_eq!(f.calls.load(Ordering::SeqCst), 5);
        assert_eq!(out.candidates.len(), 3);
        assert!(out.candidates.iter().all(|c| c.finish_reason == FinishReason::Error));
    }

    #[test]
    fn short_responses_are_padded() {
        let f = Flaky { short: true, ..flaky(0) };
        let out = Generator::new(&f, fast()).generate("e", &request("p", 3)).unwrap();
        assert_eq!(out.candidates[2].finish_reason, FinishReason::Error);
        assert_eq!(out.candidates[1].text, "t1");
    }

    #[test]
    fn auth_errors_are_not_retried() {
        let f = Flaky { fatal: Some(GenError::Auth("401".into())), ..flaky(0) };
        let err = Generator::new(&f, fast()).generate("e", &request("p", 1)).unwrap_err();
        assert!(matches!(err, GenError::Auth(_)));
        assert_eq!(f.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn spend_cap_stops_generation() {
        let m = mock(PlantMode::Random);
        let g = Generator::new(&m, GeneratorConfig { token_cap: Some(10), ..fast() });
        g.generate("e", &request("a b c d e f g h i j k l", 1)).unwrap();
        assert!(g.tokens_spent() >= 12);
        assert!(matches!(g.generate("e", &request("p", 1)), Err(GenError::BudgetExceeded { cap: 10, .. })));
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let m = mock(PlantMode::Random);
        let g = Generator::new(&m, fast());
        assert!(matches!(g.generate("e", &request("p", 0)), Err(GenError::InvalidRequest(_))));
    }

    struct Slow {
        current: AtomicUsize,
        peak: AtomicUsize,
    }

    impl GenerationClient for Slow {
        fn id(&self) -> String {
            "slow".into()
        }
        fn complete(&self, _: &str, req: &GenerationRequest) -> Result<Vec<Choice>, GenError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            thread::sleep(Duration::from_millis(20));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(vec![Choice { text: "x".into(), finish_reason: FinishReason::Stop }; req.sample_count])
        }
    }

    #[test]
    fn in_flight_limit_holds() {
        let slow = Slow { current: AtomicUsize::new(0), peak: AtomicUsize::new(0) };
        let g = Arc::new(Generator::new(&slow, GeneratorConfig { max_in_flight: 2, ..fast() }));
        thread::scope(|s| {
            for i in 0..8 {
                let g = g.clone();
                s.spawn(move || g.generate(&format!("e{i}"), &request("p", 1)).unwrap());
            }
        });
        assert_eq!(slow.peak.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn remote_wire_format() {
        let server = TestServer::start(|req| {
            assert_eq!(req.path, "/v1");
            assert_eq!(req.header("authorization").as_deref(), Some("Bearer k"));
            let body: serde_json::Value = serde_json::from_str(&req.body).unwrap();
            assert_eq!(body["n"], 2);
            assert_eq!(body["model"], "m");
            assert_eq!(body["temperature"], 0.8);
            (200, r#"{"choices":[{"text":"a","finish_reason":"stop"},{"text":"b","finish_reason":"length"}]}"#.into())
        });
        let client = RemoteGenerator::new(RemoteGenConfig {
            endpoint: server.url(),
            api_key: Some("k".into()),
            timeout: Duration::from_secs(5),
        });
        let out = Generator::new(&client, fast()).generate("e", &request("p", 2)).unwrap();
        assert_eq!(out.candidates[0].text, "a");
        assert_eq!(out.candidates[1].finish_reason, FinishReason::Length);
    }

    #[test]
    fn remote_status_mapping() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let server = TestServer::start(move |_| {
            if c.fetch_add(1, Ordering::SeqCst) < 1 {
                (503, "{}".into())
            } else {
                (403, "{}".into())
            }
        });
        let client = RemoteGenerator::new(RemoteGenConfig {
            endpoint: server.url(),
            api_key: None,
            timeout: Duration::from_secs(5),
        });
        let err = Generator::new(&client, fast()).generate("e", &request("p", 1)).unwrap_err();
        assert!(matches!(err, GenError::Auth(_)));
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }
}
