//! Uniform completion interface over remote chat-completion endpoints and
//! deterministic scripted policies.
//!
//! Scripted policies exist as test oracles: given (policy, seed, prompt
//! digest) the output is a pure function, so two runs over the same prompt
//! set produce byte-identical response logs.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conditions::{ConditionKind, RenderedPrompt};
use crate::parse::Choice;

/// Connection and decoding settings for one remote model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model_name: String,
    /// Greedy decoding for replication runs.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Token-bucket rate limit, requests per second.
    #[serde(default = "default_rps")]
    pub requests_per_second: f64,
    /// Name of the environment variable holding the API credential.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
}

fn default_max_tokens() -> u32 {
    400
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_concurrency() -> usize {
    4
}
fn default_rps() -> f64 {
    2.0
}
fn default_key_env() -> String {
    "OPENROUTER_API_KEY".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Sleep before retry k uses `backoff_ms[k-1]`, clamped to the last entry.
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: vec![500, 1000, 2000],
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(300..=500).contains(&self.max_output_tokens) {
            return Err(BackendError::Config(format!(
                "max_output_tokens {} outside [300, 500]",
                self.max_output_tokens
            )));
        }
        if self.max_concurrency == 0 {
            return Err(BackendError::Config("max_concurrency must be >= 1".to_string()));
        }
        if self.retry.max_attempts == 0 {
            return Err(BackendError::Config("retry.max_attempts must be >= 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid backend config: {0}")]
    Config(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        matches!(self, BackendError::Timeout | BackendError::Transport(_))
    }
}

/// What kind of text is being requested. Scripted cell policies key their
/// behavior off the condition carried here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestTag {
    Cell(ConditionKind),
    /// Judge/labeling/probe traffic with no experimental condition.
    Freeform,
}

/// A backend-agnostic completion request.
#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub system: Option<String>,
    pub user: String,
    pub tag: RequestTag,
    /// Content digest; scripted policies derive their randomness from it.
    pub digest: String,
}

impl CompletionRequest {
    pub fn from_prompt(prompt: &RenderedPrompt) -> Self {
        CompletionRequest {
            system: prompt.system_text.clone(),
            user: prompt.user_text.clone(),
            tag: RequestTag::Cell(prompt.condition),
            digest: prompt.content_digest.clone(),
        }
    }

    pub fn freeform(system: Option<String>, user: String) -> Self {
        let digest = {
            let mut hasher = Sha256::new();
            hasher.update(user.as_bytes());
            hasher
                .finalize()
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect::<String>()
        };
        CompletionRequest {
            system,
            user,
            tag: RequestTag::Freeform,
            digest,
        }
    }
}

/// Anything that can answer a completion request. Implemented by [`Backend`]
/// and by test stubs.
pub trait Completion: Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

/// Health-check result from a single minimal round trip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthReport {
    pub healthy: bool,
    pub latency_ms: u64,
    pub structured_output_ok: bool,
    pub detail: String,
}

/// Deterministic test-oracle policies.
///
/// `ContentJudge` answers correctly with probability `competence` regardless
/// of framing. `Deferential` matches `ContentJudge` on C1 cells but always
/// affirms the speaker (Answer 1) on C2 cells. Freeform requests get a fixed
/// Answer-1 object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ScriptedPolicy {
    AlwaysAnswer1,
    AlwaysAnswer2,
    ContentJudge { competence: f64, seed: u64 },
    Deferential { competence: f64, seed: u64 },
}

/// Uniform draw in [0, 1) derived from (seed, digest, condition), so the
/// same cell always gets the same draw.
fn deterministic_draw(seed: u64, digest: &str, condition: ConditionKind) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(digest.as_bytes());
    hasher.update([condition as u8]);
    let bytes = hasher.finalize();
    let mut rng_seed = [0u8; 8];
    rng_seed.copy_from_slice(&bytes[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(rng_seed));
    rng.random::<f64>()
}

fn judgment_text(choice: Choice, reasoning: &str) -> String {
    format!(
        "{{\"chosen_answer\":\"{}\",\"reasoning\":\"{}\"}}",
        choice.as_str(),
        reasoning
    )
}

#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    pub policy: ScriptedPolicy,
}

impl ScriptedBackend {
    pub fn new(policy: ScriptedPolicy) -> Self {
        ScriptedBackend { policy }
    }

    fn choose(&self, request: &CompletionRequest) -> Choice {
        let condition = match request.tag {
            RequestTag::Cell(c) => c,
            RequestTag::Freeform => return Choice::Answer1,
        };
        match &self.policy {
            ScriptedPolicy::AlwaysAnswer1 => Choice::Answer1,
            ScriptedPolicy::AlwaysAnswer2 => Choice::Answer2,
            ScriptedPolicy::ContentJudge { competence, seed } => {
                let correct = condition.expected_choice();
                if deterministic_draw(*seed, &request.digest, condition) < *competence {
                    correct
                } else {
                    correct.other()
                }
            }
            ScriptedPolicy::Deferential { competence, seed } => {
                if condition.is_c2() {
                    Choice::Answer1
                } else {
                    let correct = condition.expected_choice();
                    if deterministic_draw(*seed, &request.digest, condition) < *competence {
                        correct
                    } else {
                        correct.other()
                    }
                }
            }
        }
    }
}

impl Completion for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let choice = self.choose(request);
        Ok(judgment_text(choice, "scripted policy response"))
    }
}

/// Returns a fixed body for every request. Handy as a scripted judge.
#[derive(Debug, Clone)]
pub struct StaticBackend {
    pub body: String,
}

impl Completion for StaticBackend {
    fn complete(&self, _request: &CompletionRequest) -> Result<String, BackendError> {
        Ok(self.body.clone())
    }
}

struct TokenBucket {
    capacity: f64,
    tokens: f64,
    refill_per_sec: f64,
    last: Instant,
}

impl TokenBucket {
    fn new(rps: f64) -> Self {
        let capacity = rps.max(1.0);
        TokenBucket {
            capacity,
            tokens: capacity,
            refill_per_sec: rps.max(f64::MIN_POSITIVE),
            last: Instant::now(),
        }
    }

    /// Take a token, or report how long to wait for one.
    fn acquire(&mut self) -> Option<Duration> {
        let now = Instant::now();
        let elapsed = now.duration_since(self.last).as_secs_f64();
        self.last = now;
        self.tokens = (self.tokens + elapsed * self.refill_per_sec).min(self.capacity);
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            None
        } else {
            let missing = 1.0 - self.tokens;
            Some(Duration::from_secs_f64(missing / self.refill_per_sec))
        }
    }
}

/// Chat-completions client: messages array in, single text reply out.
pub struct HttpBackend {
    config: BackendConfig,
    client: reqwest::blocking::Client,
    bucket: Mutex<TokenBucket>,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReply,
}

#[derive(Deserialize)]
struct WireReply {
    content: String,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let bucket = Mutex::new(TokenBucket::new(config.requests_per_second));
        Ok(HttpBackend { config, client, bucket })
    }

    fn wait_for_token(&self) {
        loop {
            let wait = self.bucket.lock().expect("bucket poisoned").acquire();
            match wait {
                None => return,
                Some(d) => std::thread::sleep(d),
            }
        }
    }

    fn send_once(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.wait_for_token();
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(WireMessage {
                role: "system",
                content: system,
            });
        }
        messages.push(WireMessage {
            role: "user",
            content: &request.user,
        });
        let body = WireRequest {
            model: &self.config.model_name,
            messages,
            temperature: self.config.temperature,
            max_tokens: self.config.max_output_tokens,
        };
        let mut builder = self.client.post(&self.config.endpoint).json(&body);
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(BackendError::Auth(format!("status {status}")));
        }
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(BackendError::Transport(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Protocol(format!("status {status}")));
        }
        let parsed: WireResponse = response
            .json()
            .map_err(|e| BackendError::Protocol(format!("bad response body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::Protocol("response has no choices".to_string()))
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let schedule = &self.config.retry.backoff_ms;
        let ms = schedule
            .get(attempt as usize - 1)
            .or(schedule.last())
            .copied()
            .unwrap_or(0);
        Duration::from_millis(ms)
    }
}

impl HttpBackend {
    /// Retries transient transport failures per the retry policy; auth and
    /// protocol errors are terminal. Returns the attempt count alongside the
    /// text for the response log.
    fn complete_tracking(&self, request: &CompletionRequest) -> Result<(String, u32), (BackendError, u32)> {
        let mut last = None;
        for attempt in 1..=self.config.retry.max_attempts {
            match self.send_once(request) {
                Ok(text) => return Ok((text, attempt)),
                Err(e) if e.retryable() && attempt < self.config.retry.max_attempts => {
                    std::thread::sleep(self.backoff(attempt));
                    last = Some(e);
                }
                Err(e) => return Err((e, attempt)),
            }
        }
        let attempts = self.config.retry.max_attempts;
        Err((
            last.unwrap_or(BackendError::Transport("no attempts made".to_string())),
            attempts,
        ))
    }
}

impl Completion for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.complete_tracking(request).map(|(text, _)| text).map_err(|(e, _)| e)
    }
}

/// How a model entry in the run config is backed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendSpec {
    Scripted(ScriptedPolicy),
    Http(BackendConfig),
    Static { body: String },
}

/// A constructed backend ready to serve completions.
pub enum Backend {
    Scripted(ScriptedBackend),
    Http(HttpBackend),
    Static(StaticBackend),
}

impl Backend {
    pub fn from_spec(spec: &BackendSpec) -> Result<Self, BackendError> {
        Ok(match spec {
            BackendSpec::Scripted(policy) => Backend::Scripted(ScriptedBackend::new(policy.clone())),
            BackendSpec::Http(config) => Backend::Http(HttpBackend::new(config.clone())?),
            BackendSpec::Static { body } => Backend::Static(StaticBackend { body: body.clone() }),
        })
    }

    pub fn max_concurrency(&self) -> usize {
        match self {
            Backend::Http(h) => h.config.max_concurrency,
            _ => 8,
        }
    }

    /// Like [`Completion::complete`], also reporting how many attempts the
    /// request took (scripted backends always take one).
    pub fn complete_with_attempts(&self, request: &CompletionRequest) -> Result<(String, u32), (BackendError, u32)> {
        match self {
            Backend::Scripted(b) => b.complete(request).map(|t| (t, 1)).map_err(|e| (e, 1)),
            Backend::Static(b) => b.complete(request).map(|t| (t, 1)).map_err(|e| (e, 1)),
            Backend::Http(b) => b.complete_tracking(request),
        }
    }

    /// Single minimal round trip verifying reachability, latency, and
    /// structured-output compliance. Scripted backends are always healthy at
    /// zero latency.
    pub fn probe(&self) -> Result<HealthReport, BackendError> {
        match self {
            Backend::Scripted(_) | Backend::Static(_) => Ok(HealthReport {
                healthy: true,
                latency_ms: 0,
                structured_output_ok: true,
                detail: "scripted backend".to_string(),
            }),
            Backend::Http(http) => {
                let request = CompletionRequest::freeform(
                    None,
                    concat!(
                        "Reply with exactly one JSON object. No extra text. ",
                        "The JSON object must have two keys: \"chosen_answer\" and \"reasoning\". ",
                        "\"chosen_answer\" must be \"1\"."
                    )
                    .to_string(),
                );
                let start = Instant::now();
                let text = http.complete(&request)?;
                let latency_ms = start.elapsed().as_millis() as u64;
                let structured_output_ok = crate::parse::parse_judgment(&text).is_ok();
                Ok(HealthReport {
                    healthy: true,
                    latency_ms,
                    structured_output_ok,
                    detail: format!("model {}", http.config.model_name),
                })
            }
        }
    }
}

impl Completion for Backend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        match self {
            Backend::Scripted(b) => b.complete(request),
            Backend::Http(b) => b.complete(request),
            Backend::Static(b) => b.complete(request),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::{render_benchmark_c1, render_benchmark_c2, PromptVariant};
    use crate::dataset::UnifiedItem;
    use crate::parse::parse_judgment;

    fn item(id: &str) -> UnifiedItem {
        UnifiedItem {
            id: id.to_string(),
            domain: "truthfulqa".to_string(),
            question: format!("question {id}"),
            correct_answer: "yes".to_string(),
            incorrect_answer: "no".to_string(),
            metadata: Default::default(),
        }
    }

    fn cell(policy: ScriptedPolicy, prompt: &RenderedPrompt) -> Choice {
        let backend = ScriptedBackend::new(policy);
        let text = backend.complete(&CompletionRequest::from_prompt(prompt)).unwrap();
        parse_judgment(&text).unwrap().choice
    }

    #[test]
    fn always_policies_ignore_framing() {
        let p = render_benchmark_c1(&item("a"), true);
        assert_eq!(cell(ScriptedPolicy::AlwaysAnswer1, &p), Choice::Answer1);
        assert_eq!(cell(ScriptedPolicy::AlwaysAnswer2, &p), Choice::Answer2);
    }

    #[test]
    fn deferential_is_perfect_on_c1_with_full_competence() {
        let policy = ScriptedPolicy::Deferential { competence: 1.0, seed: 9 };
        let c1_false = render_benchmark_c1(&item("a"), false);
        assert_eq!(cell(policy.clone(), &c1_false), Choice::Answer2);
        let c1_true = render_benchmark_c1(&item("a"), true);
        assert_eq!(cell(policy, &c1_true), Choice::Answer1);
    }

    #[test]
    fn deferential_always_affirms_speakers() {
        let baseline = PromptVariant::baseline();
        for competence in [0.0, 0.3, 1.0] {
            let policy = ScriptedPolicy::Deferential { competence, seed: 5 };
            let c2i = render_benchmark_c2(&item("b"), false, &baseline);
            assert_eq!(cell(policy.clone(), &c2i), Choice::Answer1);
            let c2c = render_benchmark_c2(&item("b"), true, &baseline);
            assert_eq!(cell(policy, &c2c), Choice::Answer1);
        }
    }

    #[test]
    fn scripted_outputs_are_deterministic() {
        let policy = ScriptedPolicy::ContentJudge { competence: 0.5, seed: 3 };
        let backend = ScriptedBackend::new(policy);
        for i in 0..50 {
            let p = render_benchmark_c1(&item(&format!("q{i}")), i % 2 == 0);
            let request = CompletionRequest::from_prompt(&p);
            let first = backend.complete(&request).unwrap();
            let second = backend.complete(&request).unwrap();
            assert_eq!(first, second);
        }
    }

    #[test]
    fn content_judge_hits_competence_rate() {
        let policy = ScriptedPolicy::ContentJudge { competence: 0.7, seed: 11 };
        let backend = ScriptedBackend::new(policy);
        let mut correct = 0;
        let total = 2000;
        for i in 0..total {
            let truthful = i % 2 == 0;
            let p = render_benchmark_c1(&item(&format!("q{i}")), truthful);
            let text = backend.complete(&CompletionRequest::from_prompt(&p)).unwrap();
            let choice = parse_judgment(&text).unwrap().choice;
            if choice == p.condition.expected_choice() {
                correct += 1;
            }
        }
        let rate = correct as f64 / total as f64;
        assert!((rate - 0.7).abs() < 0.05, "rate {rate}");
    }

    #[test]
    fn scripted_probe_is_healthy() {
        let backend = Backend::from_spec(&BackendSpec::Scripted(ScriptedPolicy::AlwaysAnswer1)).unwrap();
        let report = backend.probe().unwrap();
        assert!(report.healthy);
        assert_eq!(report.latency_ms, 0);
        assert!(report.structured_output_ok);
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        let config = BackendConfig {
            endpoint: "http://127.0.0.1:9/v1/chat/completions".to_string(),
            model_name: "none".to_string(),
            temperature: 0.0,
            max_output_tokens: 300,
            timeout_secs: 2,
            max_concurrency: 1,
            retry: RetryPolicy {
                max_attempts: 1,
                backoff_ms: vec![1],
            },
            requests_per_second: 1000.0,
            api_key_env: "UNSET_TEST_KEY".to_string(),
        };
        let backend = Backend::from_spec(&BackendSpec::Http(config)).unwrap();
        match backend.probe() {
            Err(BackendError::Transport(_)) | Err(BackendError::Timeout) => {}
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn config_bounds_are_enforced() {
        let mut config = BackendConfig {
            endpoint: "http://localhost".to_string(),
            model_name: "m".to_string(),
            temperature: 0.0,
            max_output_tokens: 299,
            timeout_secs: 1,
            max_concurrency: 1,
            retry: RetryPolicy::default(),
            requests_per_second: 1.0,
            api_key_env: default_key_env(),
        };
        assert!(config.validate().is_err());
        config.max_output_tokens = 300;
        assert!(config.validate().is_ok());
        config.max_output_tokens = 501;
        assert!(config.validate().is_err());
    }
}
