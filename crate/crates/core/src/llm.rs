//! Blocking chat-completion client for OpenAI-compatible endpoints.
//!
//! Every call carries a seed of `base_seed + call_counter`; the caller
//! advances the counter after each call, so a run's call sequence is
//! reproducible against a seed-respecting backend while successive calls
//! still differ.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::model::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
    pub base_seed: u64,
    pub call_counter: u64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.9,
            max_new_tokens: 2048,
            base_seed: 0,
            call_counter: 0,
        }
    }
}

impl SamplingParams {
    pub fn effective_seed(&self) -> u64 {
        self.base_seed.wrapping_add(self.call_counter)
    }

    pub fn with_counter(mut self, call_counter: u64) -> Self {
        self.call_counter = call_counter;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ConfigError::invalid("sampling.temperature", "must be a non-negative number"));
        }
        if !(0.0..=1.0).contains(&self.top_p) {
            return Err(ConfigError::invalid("sampling.top_p", "must be in [0, 1]"));
        }
        if self.max_new_tokens == 0 {
            return Err(ConfigError::invalid("sampling.max_new_tokens", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct LlmEndpoint {
    pub base_url: String,
    pub model_name: String,
    pub api_key: Option<String>,
    pub request_timeout: Duration,
    pub max_retries: u32,
}

impl fmt::Debug for LlmEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmEndpoint")
            .field("base_url", &self.base_url)
            .field("model_name", &self.model_name)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("request_timeout", &self.request_timeout)
            .field("max_retries", &self.max_retries)
            .finish()
    }
}

impl LlmEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key: None,
            request_timeout: Duration::from_secs(600),
            max_retries: 3,
        }
    }

    /// `{base_url}/chat/completions`, tolerating a trailing slash.
    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }

    pub fn validate(&self, field: &str) -> Result<(), ConfigError> {
        if self.base_url.trim().is_empty() {
            return Err(ConfigError::invalid(format!("{field}.base_url"), "must not be empty"));
        }
        if self.model_name.trim().is_empty() {
            return Err(ConfigError::invalid(format!("{field}.model"), "must not be empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Request body of `POST /chat/completions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub seed: u64,
}

impl ChatRequest {
    pub fn new(endpoint: &LlmEndpoint, system: &str, user: &str, params: &SamplingParams) -> Self {
        let mut messages = Vec::with_capacity(2);
        if !system.is_empty() {
            messages.push(ChatMessage {
                role: "system".into(),
                content: system.to_string(),
            });
        }
        messages.push(ChatMessage {
            role: "user".into(),
            content: user.to_string(),
        });
        Self {
            model: endpoint.model_name.clone(),
            messages,
            temperature: params.temperature,
            top_p: params.top_p,
            max_tokens: params.max_new_tokens,
            seed: params.effective_seed(),
        }
    }
}

/// Failure of a single request attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFault {
    /// Worth retrying: connection problems, timeouts, 408, 429, 5xx.
    Transient(String),
    Permanent(String),
}

impl fmt::Display for TransportFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransportFault::Transient(m) | TransportFault::Permanent(m) => f.write_str(m),
        }
    }
}

/// Sends one chat request and returns the assistant message text.
pub trait ChatTransport: Send + Sync {
    fn send(&self, endpoint: &LlmEndpoint, request: &ChatRequest) -> Result<String, TransportFault>;
}

/// Extracts `choices[0].message.content` from a response body.
pub fn parse_completion(body: &str) -> Result<String, TransportFault> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| TransportFault::Permanent(format!("malformed completion body: {e}")))?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| TransportFault::Permanent("completion has no choices".into()))?;
    match choice.get("message").and_then(|m| m.get("content")) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Null) | None => Ok(String::new()),
        Some(other) => Err(TransportFault::Permanent(format!(
            "unexpected message content: {other}"
        ))),
    }
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(request_timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(request_timeout))
            .http_status_as_error(false)
            .build();
        Self {
            agent: config.into(),
        }
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, endpoint: &LlmEndpoint, request: &ChatRequest) -> Result<String, TransportFault> {
        let mut req = self.agent.post(endpoint.completions_url());
        if let Some(key) = &endpoint.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let response = req
            .send_json(request)
            .map_err(|e| TransportFault::Transient(format!("request failed: {e}")))?;
        let status = response.status().as_u16();
        let body = response
            .into_body()
            .read_to_string()
            .map_err(|e| TransportFault::Transient(format!("reading response failed: {e}")))?;
        match status {
            200..=299 => parse_completion(&body),
            408 | 429 | 500..=599 => Err(TransportFault::Transient(format!("HTTP {status}: {}", snippet(&body)))),
            _ => Err(TransportFault::Permanent(format!("HTTP {status}: {}", snippet(&body)))),
        }
    }
}

fn snippet(body: &str) -> &str {
    match body.char_indices().nth(300) {
        Some((i, _)) => &body[..i],
        None => body,
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LlmError {
    #[error("llm transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("llm returned an empty completion")]
    EmptyResponse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backoff {
    pub initial: Duration,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial: Duration::from_millis(500),
            max: Duration::from_secs(30),
        }
    }
}

impl Backoff {
    /// Delay before retry number `retry` (0-based): `initial * 2^retry`, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(31)).unwrap_or(u32::MAX);
        self.initial.saturating_mul(factor).min(self.max)
    }
}

pub struct LlmClient<T: ChatTransport = HttpTransport> {
    endpoint: LlmEndpoint,
    transport: T,
    backoff: Backoff,
    debug_log: Option<Mutex<File>>,
}

impl LlmClient<HttpTransport> {
    pub fn http(endpoint: LlmEndpoint) -> Self {
        let transport = HttpTransport::new(endpoint.request_timeout);
        Self::new(endpoint, transport)
    }
}

impl<T: ChatTransport> LlmClient<T> {
    pub fn new(endpoint: LlmEndpoint, transport: T) -> Self {
        Self {
            endpoint,
            transport,
            backoff: Backoff::default(),
            debug_log: None,
        }
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    /// Mirrors every request and response as one JSON line in `path`.
    pub fn with_debug_log(mut self, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.debug_log = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn endpoint(&self) -> &LlmEndpoint {
        &self.endpoint
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    /// Sends one completion request, retrying transient faults up to
    /// `max_retries` times with exponential backoff.
    pub fn complete(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        params: &SamplingParams,
    ) -> Result<String, LlmError> {
        let request = ChatRequest::new(&self.endpoint, system_prompt, user_prompt, params);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let result = self.transport.send(&self.endpoint, &request);
            self.mirror(&request, &result);
            match result {
                Ok(text) if text.is_empty() => return Err(LlmError::EmptyResponse),
                Ok(text) => return Ok(text),
                Err(TransportFault::Transient(message)) if attempt <= self.endpoint.max_retries => {
                    let delay = self.backoff.delay(attempt - 1);
                    log::warn!("llm request attempt {attempt} failed ({message}); retrying in {delay:?}");
                    thread::sleep(delay);
                }
                Err(fault) => {
                    return Err(LlmError::Transport {
                        attempts: attempt,
                        message: fault.to_string(),
                    })
                }
            }
        }
    }

    fn mirror(&self, request: &ChatRequest, result: &Result<String, TransportFault>) {
        let Some(log) = &self.debug_log else {
            return;
        };
        let entry = match result {
            Ok(text) => json!({ "request": request, "response": text }),
            Err(fault) => json!({ "request": request, "error": fault.to_string() }),
        };
        if let Ok(mut file) = log.lock() {
            let _ = writeln!(file, "{entry}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_sampling_regime() {
        let p = SamplingParams::default();
        assert_eq!((p.temperature, p.top_p, p.max_new_tokens), (0.7, 0.9, 2048));
        assert!(p.validate().is_ok());
    }

    #[test]
    fn effective_seed_adds_counter() {
        let p = SamplingParams { base_seed: 43, ..Default::default() }.with_counter(5);
        assert_eq!(p.effective_seed(), 48);
    }

    #[test]
    fn rejects_bad_sampling() {
        let bad_p = SamplingParams { top_p: 1.5, ..Default::default() };
        assert!(bad_p.validate().is_err());
        let bad_t = SamplingParams { temperature: -0.1, ..Default::default() };
        assert!(bad_t.validate().is_err());
        let bad_n = SamplingParams { max_new_tokens: 0, ..Default::default() };
        assert!(bad_n.validate().is_err());
    }

    #[test]
    fn request_body_shape() {
        let ep = LlmEndpoint::new("http://localhost:8000/v1/", "qwen");
        let req = ChatRequest::new(&ep, "sys", "hello", &SamplingParams { base_seed: 1, ..Default::default() }.with_counter(2));
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(v["model"], "qwen");
        assert_eq!(v["messages"][0]["role"], "system");
        assert_eq!(v["messages"][1]["content"], "hello");
        assert_eq!(v["seed"], 3);
        assert_eq!(v["max_tokens"], 2048);
        assert_eq!(ep.completions_url(), "http://localhost:8000/v1/chat/completions");
    }

    #[test]
    fn parses_completion_bodies() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#;
        assert_eq!(parse_completion(ok).unwrap(), "hi");
        let null = r#"{"choices":[{"message":{"role":"assistant","content":null}}]}"#;
        assert_eq!(parse_completion(null).unwrap(), "");
        assert!(parse_completion(r#"{"choices":[]}"#).is_err());
        assert!(parse_completion("not json").is_err());
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let b = Backoff { initial: Duration::from_millis(100), max: Duration::from_millis(350) };
        assert_eq!(b.delay(0), Duration::from_millis(100));
        assert_eq!(b.delay(1), Duration::from_millis(200));
        assert_eq!(b.delay(2), Duration::from_millis(350));
        assert_eq!(b.delay(40), Duration::from_millis(350));
    }

    #[test]
    fn debug_output_redacts_key() {
        let mut ep = LlmEndpoint::new("http://x", "m");
        ep.api_key = Some("sk-secret".into());
        assert!(!format!("{ep:?}").contains("sk-secret"));
    }
}
