//! Client contract for an external text-generation service.
//!
//! Wire format: `POST <url>` with JSON `{prompt, max_tokens, temperature}`,
//! reply `{text}`. The same JSON-over-HTTP discipline (retries, per-attempt
//! timeout, in-flight cap) backs the remote classifier.

use std::fmt;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const ENV_URL: &str = "CHIRPE_LLM_URL";
pub const ENV_KEY: &str = "CHIRPE_LLM_KEY";
pub const ENV_TIMEOUT: &str = "CHIRPE_LLM_TIMEOUT_S";

pub const DEFAULT_MAX_RETRIES: u32 = 2;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;
pub const DEFAULT_MAX_WORDS: u32 = 512;
pub const DEFAULT_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("authentication rejected (HTTP {0})")]
    AuthError(u16),
    #[error("transport failure: {0}")]
    TransportError(String),
    #[error("rate limited")]
    RateLimited,
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("gateway not configured: {0}")]
    NotConfigured(String),
}

impl GatewayError {
    /// Failures worth another attempt.
    pub fn is_transient(&self) -> bool {
        matches!(self, Self::Timeout | Self::TransportError(_) | Self::RateLimited)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub prompt: String,
    pub max_words: u32,
    pub temperature: f64,
}

impl GenRequest {
    pub fn new(prompt: impl Into<String>, settings: &GenSettings) -> Result<Self, GatewayError> {
        let req = Self {
            prompt: prompt.into(),
            max_words: settings.max_words,
            temperature: settings.temperature,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if self.max_words == 0 {
            return Err(GatewayError::InvalidRequest("max_words must be positive".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn to_wire(&self) -> Value {
        json!({
            "prompt": self.prompt,
            "max_tokens": self.max_words,
            "temperature": self.temperature,
        })
    }
}

/// Sampling settings; sampling temperature 0 and a 512-word cap unless configured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenSettings {
    pub max_words: u32,
    pub temperature: f64,
}

impl Default for GenSettings {
    fn default() -> Self {
        Self {
            max_words: DEFAULT_MAX_WORDS,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

/// Empty `text` is a valid reply; callers decide what it means.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenResponse {
    pub text: String,
    pub latency_ms: u64,
}

pub trait TextGenerator: Send + Sync {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, GatewayError>;
}

/// Returns the prompt unchanged.
#[derive(Debug, Default, Clone, Copy)]
pub struct EchoGenerator;

impl TextGenerator for EchoGenerator {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, GatewayError> {
        req.validate()?;
        Ok(GenResponse {
            text: req.prompt.clone(),
            latency_ms: 0,
        })
    }
}

/// Always fails with the given error.
#[derive(Debug, Clone)]
pub struct FailingGenerator(pub GatewayError);

impl TextGenerator for FailingGenerator {
    fn generate(&self, _req: &GenRequest) -> Result<GenResponse, GatewayError> {
        Err(self.0.clone())
    }
}

/// Replies with a fixed list of responses in order, recording every request.
#[derive(Debug, Default)]
pub struct ScriptedGenerator {
    replies: Mutex<std::collections::VecDeque<Result<String, GatewayError>>>,
    requests: Mutex<Vec<GenRequest>>,
}

impl ScriptedGenerator {
    pub fn new(replies: impl IntoIterator<Item = Result<String, GatewayError>>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
            requests: Mutex::default(),
        }
    }

    pub fn requests(&self) -> Vec<GenRequest> {
        self.requests.lock().expect("poisoned").clone()
    }
}

impl TextGenerator for ScriptedGenerator {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, GatewayError> {
        self.requests.lock().expect("poisoned").push(req.clone());
        let next = self.replies.lock().expect("poisoned").pop_front();
        match next {
            Some(Ok(text)) => Ok(GenResponse { text, latency_ms: 0 }),
            Some(Err(e)) => Err(e),
            None => Err(GatewayError::TransportError("script exhausted".into())),
        }
    }
}

/// API credential. Never printed by `Debug`/`Display`.
#[derive(Clone, PartialEq, Eq)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Self {
        Self(key.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(<redacted>)")
    }
}

impl fmt::Display for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("<redacted>")
    }
}

/// Exponential backoff: attempt `r` (1-based retry) waits `base * factor^(r-1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: DEFAULT_MAX_RETRIES,
            base_delay: Duration::from_millis(500),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = self.factor.max(1.0 + f64::EPSILON);
        self.base_delay.mul_f64(factor.powi(retry.saturating_sub(1) as i32))
    }

    /// Runs `attempt` up to `max_retries + 1` times, sleeping between transient
    /// failures. `attempt` receives the zero-based attempt number.
    pub fn run<T>(
        &self,
        sleep: &dyn Fn(Duration),
        mut attempt: impl FnMut(u32) -> Result<T, GatewayError>,
    ) -> Result<T, GatewayError> {
        let mut n = 0;
        loop {
            match attempt(n) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && n < self.max_retries => {
                    n += 1;
                    let d = self.delay(n);
                    tracing::warn!(attempt = n, delay_ms = d.as_millis() as u64, error = %e, "retrying");
                    sleep(d);
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Counting semaphore bounding concurrent wire requests.
#[derive(Debug)]
pub struct InflightLimiter {
    max: usize,
    current: Mutex<usize>,
    cv: Condvar,
}

pub struct InflightGuard<'a>(&'a InflightLimiter);

impl InflightLimiter {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            current: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InflightGuard<'_> {
        let mut n = self.current.lock().expect("poisoned");
        while *n >= self.max {
            n = self.cv.wait(n).expect("poisoned");
        }
        *n += 1;
        InflightGuard(self)
    }

    pub fn in_flight(&self) -> usize {
        *self.current.lock().expect("poisoned")
    }
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        *self.0.current.lock().expect("poisoned") -= 1;
        self.0.cv.notify_one();
    }
}

/// One JSON POST.
pub trait JsonTransport: Send + Sync {
    fn post_json(&self, url: &str, key: Option<&ApiKey>, body: &Value, timeout: Duration) -> Result<Value, GatewayError>;
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl JsonTransport for HttpTransport {
    fn post_json(&self, url: &str, key: Option<&ApiKey>, body: &Value, _timeout: Duration) -> Result<Value, GatewayError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(k) = key {
            req = req.header("Authorization", format!("Bearer {}", k.expose()));
        }
        let mut resp = req.send_json(body).map_err(map_ureq_error)?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => resp
                .body_mut()
                .read_json::<Value>()
                .map_err(|e| GatewayError::ProtocolError(format!("reply is not JSON: {e}"))),
            401 | 403 => Err(GatewayError::AuthError(status)),
            429 => Err(GatewayError::RateLimited),
            408 | 504 => Err(GatewayError::Timeout),
            500..=599 => Err(GatewayError::TransportError(format!("HTTP {status}"))),
            _ => Err(GatewayError::ProtocolError(format!("unexpected HTTP {status}"))),
        }
    }
}

fn map_ureq_error(e: ureq::Error) -> GatewayError {
    match e {
        ureq::Error::Timeout(_) => GatewayError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => GatewayError::Timeout,
        other => GatewayError::TransportError(other.to_string()),
    }
}

/// Endpoint settings. Precedence between environment and files is resolved by the caller.
#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub url: String,
    pub key: Option<ApiKey>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl GatewayConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            key: None,
            timeout: DEFAULT_TIMEOUT,
            retry: RetryPolicy::default(),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }

    /// Reads `CHIRPE_LLM_URL`, `CHIRPE_LLM_KEY` and `CHIRPE_LLM_TIMEOUT_S`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let url = std::env::var(ENV_URL).map_err(|_| GatewayError::NotConfigured(format!("{ENV_URL} unset")))?;
        let mut cfg = Self::new(url);
        cfg.key = std::env::var(ENV_KEY).ok().filter(|k| !k.is_empty()).map(ApiKey::new);
        if let Ok(t) = std::env::var(ENV_TIMEOUT) {
            let secs: f64 = t
                .parse()
                .map_err(|_| GatewayError::NotConfigured(format!("{ENV_TIMEOUT}={t:?} is not a number")))?;
            cfg.timeout = Duration::from_secs_f64(secs);
        }
        Ok(cfg)
    }
}

/// JSON endpoint client with retries, per-attempt timeout and an in-flight cap.
pub struct JsonClient {
    config: GatewayConfig,
    transport: Box<dyn JsonTransport>,
    limiter: InflightLimiter,
    sleep: Box<dyn Fn(Duration) + Send + Sync>,
}

impl JsonClient {
    pub fn new(config: GatewayConfig) -> Self {
        let transport = Box::new(HttpTransport::new(config.timeout));
        Self::with_transport(config, transport)
    }

    pub fn with_transport(config: GatewayConfig, transport: Box<dyn JsonTransport>) -> Self {
        let limiter = InflightLimiter::new(config.max_in_flight);
        Self {
            config,
            transport,
            limiter,
            sleep: Box::new(std::thread::sleep),
        }
    }

    /// Replaces the backoff sleeper (tests use a no-op or a recorder).
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn call(&self, body: &Value) -> Result<Value, GatewayError> {
        self.config.retry.run(self.sleep.as_ref(), |_| {
            let _slot = self.limiter.acquire();
            self.transport
                .post_json(&self.config.url, self.config.key.as_ref(), body, self.config.timeout)
        })
    }
}

/// Text generation over [`JsonClient`].
pub struct HttpGenerator {
    client: JsonClient,
}

impl HttpGenerator {
    pub fn new(client: JsonClient) -> Self {
        Self { client }
    }
}

impl TextGenerator for HttpGenerator {
    fn generate(&self, req: &GenRequest) -> Result<GenResponse, GatewayError> {
        req.validate()?;
        let started = Instant::now();
        let reply = self.client.call(&req.to_wire())?;
        let text = reply
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| GatewayError::ProtocolError("reply lacks string field `text`".into()))?
            .to_string();
        Ok(GenResponse {
            text,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}
