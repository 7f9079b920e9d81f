//! Blocking client for a remote question generator.
//!
//! Wire format: one `POST` of `{"prompt", "temperature", "top_p", "max_tokens"}`
//! answered by `{"text"}`.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use kctutor_core::generator::{
    parse_generation, render_prompt_with, GenerationRequest, GenerationResult, GeneratorError, PromptStyle,
    QuestionSource,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const AUTH_HEADER_ENV: &str = "KCTUTOR_GENERATOR_AUTH_HEADER";
pub const AUTH_VALUE_ENV: &str = "KCTUTOR_GENERATOR_AUTH_VALUE";

pub const ATTEMPTS: usize = 3;

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("generator request timed out after {0:?}")]
    Timeout(Duration),
    #[error("generator unreachable after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },
    #[error("generator returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("generator response is not {{\"text\": string}}: {0}")]
    Decode(String),
    #[error("invalid endpoint configuration: {0}")]
    Config(String),
}

impl From<RemoteError> for GeneratorError {
    fn from(e: RemoteError) -> Self {
        GeneratorError::Remote(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub url: String,
    pub timeout: Duration,
    /// Extra header sent with every request, typically for authorization.
    pub auth: Option<(String, String)>,
}

impl Endpoint {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Endpoint { url: url.into(), timeout, auth: None }
    }

    /// Picks up the auth header from the environment when both variables are set.
    pub fn with_env_auth(mut self) -> Self {
        if let (Ok(name), Ok(value)) = (std::env::var(AUTH_HEADER_ENV), std::env::var(AUTH_VALUE_ENV)) {
            self.auth = Some((name, value));
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding { temperature: 0.8, top_p: 0.8, max_tokens: 512 }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

/// Caps concurrent requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct RemoteClient {
    http: reqwest::blocking::Client,
    endpoint: Endpoint,
    pub decoding: Decoding,
    /// First retry delay; doubles per attempt.
    pub backoff: Duration,
    limiter: Limiter,
}

impl RemoteClient {
    pub fn new(endpoint: Endpoint, max_in_flight: usize) -> Result<Self, RemoteError> {
        if max_in_flight == 0 {
            return Err(RemoteError::Config("in-flight limit must be positive".into()));
        }
        reqwest::Url::parse(&endpoint.url).map_err(|e| RemoteError::Config(format!("{}: {e}", endpoint.url)))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| RemoteError::Config(e.to_string()))?;
        Ok(RemoteClient {
            http,
            endpoint,
            decoding: Decoding::default(),
            backoff: Duration::from_millis(200),
            limiter: Limiter { free: Mutex::new(max_in_flight), cv: Condvar::new() },
        })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Raw completion for `prompt`. Connection failures are retried with
    /// exponential backoff; timeouts and error statuses are not.
    pub fn remote_generate(&self, prompt: &str) -> Result<String, RemoteError> {
        let _slot = self.limiter.acquire();
        let body = WireRequest {
            prompt,
            temperature: self.decoding.temperature,
            top_p: self.decoding.top_p,
            max_tokens: self.decoding.max_tokens,
        };
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 1..=ATTEMPTS {
            let mut req = self.http.post(&self.endpoint.url).json(&body);
            if let Some((name, value)) = &self.endpoint.auth {
                req = req.header(name.as_str(), value.as_str());
            }
            match req.send() {
                Ok(resp) => return read_response(resp, self.endpoint.timeout),
                Err(e) if e.is_timeout() => return Err(RemoteError::Timeout(self.endpoint.timeout)),
                Err(e) => last = e.to_string(),
            }
            if attempt < ATTEMPTS {
                thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(RemoteError::Transport { attempts: ATTEMPTS, message: last })
    }
}

fn read_response(resp: reqwest::blocking::Response, timeout: Duration) -> Result<String, RemoteError> {
    let status = resp.status();
    let text = resp.text().map_err(|e| {
        if e.is_timeout() {
            RemoteError::Timeout(timeout)
        } else {
            RemoteError::Decode(e.to_string())
        }
    })?;
    if !status.is_success() {
        return Err(RemoteError::Status { status: status.as_u16(), body: text });
    }
    let wire: WireResponse = serde_json::from_str(&text).map_err(|e| RemoteError::Decode(e.to_string()))?;
    Ok(wire.text)
}

/// Question source backed by a remote generator.
#[derive(Debug)]
pub struct RemoteSource {
    pub client: RemoteClient,
    pub style: PromptStyle,
}

impl QuestionSource for RemoteSource {
    fn generate(&self, request: &GenerationRequest, _seed: u64) -> Result<GenerationResult, GeneratorError> {
        let prompt = render_prompt_with(request, &self.style);
        let raw = self.client.remote_generate(&prompt)?;
        parse_generation(&raw, &request.candidate_names())
    }
}
