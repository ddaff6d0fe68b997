//! Provider-agnostic completion client with retries, secret redaction and a
//! bounded number of requests in flight.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("language model service unavailable after {attempts} attempt(s): {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("language model service rejected the request (status {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("language model service refused the credentials (status {status})")]
    Auth { status: u16 },
    #[error("language model response could not be read: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env_var: String,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub temperature: f64,
    pub max_tokens: u32,
    /// First retry delay; later ones double.
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/completions".into(),
            model_name: "gpt-3.5-turbo-instruct".into(),
            api_key_env_var: "PLATTER_LLM_API_KEY".into(),
            max_retries: 3,
            timeout_secs: 60.0,
            temperature: 0.0,
            max_tokens: 1024,
            backoff_ms: 500,
            max_in_flight: 4,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.endpoint.trim().is_empty() || self.model_name.trim().is_empty() || self.api_key_env_var.trim().is_empty() {
            return Err(Error::Config("llm endpoint, model_name and api_key_env_var must be set".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) || self.max_in_flight == 0 {
            return Err(Error::Config("llm timeout and max_in_flight must be positive".into()));
        }
        Ok(())
    }

    /// Reads the key from the configured environment variable.
    pub fn api_key(&self) -> Result<String> {
        match std::env::var(&self.api_key_env_var) {
            Ok(k) if !k.trim().is_empty() => Ok(k),
            _ => Err(Error::Config(format!("environment variable {} with the API key is not set", self.api_key_env_var))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

/// How a single attempt failed.
#[derive(Clone, Debug, PartialEq)]
pub enum TransportError {
    /// Worth retrying: connection problems, 429 and 5xx responses.
    Transient(String),
    Timeout,
    Auth(u16),
    Rejected { status: u16, body: String },
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &CompletionRequest, api_key: &str, timeout: Duration) -> std::result::Result<String, TransportError>;
}

/// Replays scripted outcomes in order and records the prompts it saw.
#[derive(Debug, Default)]
pub struct MockTransport {
    script: Mutex<VecDeque<std::result::Result<String, TransportError>>>,
    seen: Mutex<Vec<String>>,
}

impl MockTransport {
    pub fn new(script: impl IntoIterator<Item = std::result::Result<String, TransportError>>) -> Self {
        Self {
            script: Mutex::new(script.into_iter().collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    /// Always answers with `text`.
    pub fn fixture(text: impl Into<String>) -> Self {
        Self::new([Ok(text.into())])
    }

    pub fn prompts(&self) -> Vec<String> {
        self.seen.lock().expect("mock lock").clone()
    }
}

impl Transport for MockTransport {
    fn send(&self, request: &CompletionRequest, _: &str, _: Duration) -> std::result::Result<String, TransportError> {
        self.seen.lock().expect("mock lock").push(request.prompt.clone());
        let mut script = self.script.lock().expect("mock lock");
        match script.len() {
            0 => Err(TransportError::Transient("mock script exhausted".into())),
            // the last entry repeats forever
            1 => script.front().cloned().expect("one entry"),
            _ => script.pop_front().expect("nonempty"),
        }
    }
}

/// JSON-over-HTTP transport for completion endpoints in the common
/// `choices[0].text` / `choices[0].message.content` response shape.
#[derive(Debug)]
pub struct HttpTransport {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(endpoint: &str) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            client,
        })
    }
}

pub fn completion_text(body: &Value) -> Option<String> {
    let choice = body.get("choices")?.get(0)?;
    choice
        .get("text")
        .or_else(|| choice.get("message").and_then(|m| m.get("content")))
        .and_then(Value::as_str)
        .map(str::to_string)
}

impl Transport for HttpTransport {
    fn send(&self, request: &CompletionRequest, api_key: &str, timeout: Duration) -> std::result::Result<String, TransportError> {
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(api_key)
            .timeout(timeout)
            .json(&json!({
                "model": request.model,
                "prompt": request.prompt,
                "temperature": request.temperature,
                "max_tokens": request.max_tokens,
            }))
            .send()
            .map_err(|e| if e.is_timeout() { TransportError::Timeout } else { TransportError::Transient(e.to_string()) })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| TransportError::Transient(e.to_string()))?;
        match status {
            200..=299 => {
                let v: Value = serde_json::from_str(&body).map_err(|e| TransportError::Rejected {
                    status,
                    body: format!("unreadable JSON: {e}"),
                })?;
                completion_text(&v).ok_or(TransportError::Rejected {
                    status,
                    body: "no completion text in response".into(),
                })
            }
            401 | 403 => Err(TransportError::Auth(status)),
            408 | 429 | 500..=599 => Err(TransportError::Transient(format!("status {status}"))),
            _ => Err(TransportError::Rejected { status, body }),
        }
    }
}

/// Replaces every occurrence of `secret` in `text`.
pub fn redact(text: &str, secret: &str) -> String {
    if secret.is_empty() {
        text.to_string()
    } else {
        text.replace(secret, "[REDACTED]")
    }
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
}

pub struct LlmClient {
    config: LlmConfig,
    transport: Box<dyn Transport>,
    in_flight: InFlight,
    sleep: fn(Duration),
}

impl LlmClient {
    pub fn new(config: LlmConfig, transport: Box<dyn Transport>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            transport,
            in_flight: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
            },
            sleep: std::thread::sleep,
        })
    }

    pub fn http(config: LlmConfig) -> Result<Self> {
        let t = HttpTransport::new(&config.endpoint)?;
        Self::new(config, Box::new(t))
    }

    /// Skips real sleeping between retries, for tests.
    pub fn without_backoff_sleep(mut self) -> Self {
        self.sleep = |_| {};
        self
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    fn acquire(&self) {
        let mut n = self.in_flight.count.lock().expect("in-flight lock");
        while *n >= self.config.max_in_flight {
            n = self.in_flight.freed.wait(n).expect("in-flight lock");
        }
        *n += 1;
    }

    fn release(&self) {
        *self.in_flight.count.lock().expect("in-flight lock") -= 1;
        self.in_flight.freed.notify_one();
    }

    /// Sends `prompt`, retrying transient failures and timeouts with
    /// exponential backoff. The key is read before any request is made.
    pub fn complete(&self, prompt: &str) -> Result<String> {
        let key = self.config.api_key()?;
        let request = CompletionRequest {
            model: self.config.model_name.clone(),
            prompt: prompt.to_string(),
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        };
        log::debug!(
            "llm request to {}: {}",
            self.config.endpoint,
            redact(&serde_json::to_string(&request)?, &key)
        );
        let timeout = Duration::from_secs_f64(self.config.timeout_secs);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                log::warn!("llm attempt {attempt} failed ({last}); retrying in {delay} ms");
                (self.sleep)(Duration::from_millis(delay));
            }
            self.acquire();
            let outcome = self.transport.send(&request, &key, timeout);
            self.release();
            match outcome {
                Ok(text) => {
                    log::debug!("llm response: {}", redact(&text, &key));
                    return Ok(text);
                }
                Err(TransportError::Auth(status)) => return Err(LlmError::Auth { status }.into()),
                Err(TransportError::Rejected { status, body }) => {
                    return Err(LlmError::Rejected {
                        status,
                        body: redact(&body, &key),
                    }
                    .into())
                }
                Err(TransportError::Timeout) => last = format!("timed out after {:.1} s", self.config.timeout_secs),
                Err(TransportError::Transient(m)) => last = redact(&m, &key),
            }
        }
        Err(LlmError::Unavailable { attempts, last }.into())
    }
}

/// One-shot completion over HTTP.
pub fn complete_with_llm(prompt: &str, config: &LlmConfig) -> Result<String> {
    config.validate()?;
    config.api_key()?;
    LlmClient::http(config.clone())?.complete(prompt)
}
