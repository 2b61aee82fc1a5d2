//! Chat-completion HTTP client with retry, backoff, and a process-wide
//! in-flight limit.
//!
//! Wire protocol: POST `{endpoint}/chat/completions` with a JSON body
//! carrying `model`, `temperature`, `max_tokens`, and a single user
//! message whose content is a list of parts (an image part when the
//! request has one, then a text part). The reply text is read from
//! `choices[0].message.content`.

use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use serde_json::{json, Value};

use super::{BackendConfig, ChatRequest, ChatResponse, ModelBackend, QueryKind};
use crate::error::{BackendError, Result};
use crate::prompt::RenderedPrompt;
use crate::vocab::ImageRecord;

const BACKOFF_CAP_MS: u64 = 60_000;

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    config: BackendConfig,
    token: Option<String>,
    limiter: Semaphore,
}

impl HttpBackend {
    /// Builds the client and reads the auth token from the configured
    /// environment variable (requests go out unauthenticated when it is
    /// unset).
    pub fn new(config: BackendConfig) -> Result<Self> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| BackendError::Request(e.to_string()))?;
        let token = std::env::var(&config.token_env)
            .ok()
            .filter(|t| !t.is_empty());
        let limiter = Semaphore::new(config.max_in_flight);
        Ok(HttpBackend {
            client,
            config,
            token,
            limiter,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Issues one chat-completion call, retrying transient failures
    /// (connect errors, timeouts, 429, 5xx) with exponential backoff. At
    /// most `max_in_flight` requests are open at any time across all
    /// threads sharing this backend.
    pub fn send(&self, request: &ChatRequest) -> std::result::Result<ChatResponse, BackendError> {
        if request.prompt.is_empty() {
            return Err(BackendError::Request("empty prompt".into()));
        }
        if request.temperature.is_nan() || request.temperature < 0.0 {
            return Err(BackendError::Request(format!(
                "temperature must be >= 0, got {}",
                request.temperature
            )));
        }
        let body = self.build_body(request)?;
        let _permit = self.limiter.acquire();
        let start = Instant::now();
        let mut attempt: u32 = 0;
        loop {
            attempt += 1;
            match self.try_once(&body) {
                Ok(text) => {
                    return Ok(ChatResponse {
                        text,
                        latency_ms: start.elapsed().as_millis() as u64,
                        attempt,
                    });
                }
                Err(Attempt::Fatal(err)) => return Err(err),
                Err(Attempt::Transient(message)) => {
                    if attempt > self.config.retry.max_retries {
                        return Err(BackendError::Exhausted {
                            attempts: attempt,
                            last_error: message,
                        });
                    }
                    let factor = self.config.retry.multiplier.powi(attempt as i32 - 1);
                    let backoff = (self.config.retry.base_backoff_ms as f64 * factor) as u64;
                    std::thread::sleep(Duration::from_millis(backoff.min(BACKOFF_CAP_MS)));
                }
            }
        }
    }

    fn try_once(&self, body: &Value) -> std::result::Result<String, Attempt> {
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let mut req = self.client.post(&url).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let response = req.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                Attempt::Transient(e.to_string())
            } else {
                Attempt::Fatal(BackendError::Request(e.to_string()))
            }
        })?;
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(Attempt::Fatal(BackendError::Auth {
                status: status.as_u16(),
            }));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(BackendError::Request(format!("HTTP {status}"))));
        }
        let value: Value = response
            .json()
            .map_err(|e| Attempt::Fatal(BackendError::MalformedReply(e.to_string())))?;
        extract_content(&value).map_err(Attempt::Fatal)
    }

    fn build_body(&self, request: &ChatRequest) -> std::result::Result<Value, BackendError> {
        let mut parts = Vec::new();
        if let Some(image_ref) = &request.image_ref {
            let url = image_part_url(image_ref)?;
            parts.push(json!({"type": "image_url", "image_url": {"url": url}}));
        }
        parts.push(json!({"type": "text", "text": request.prompt}));
        Ok(json!({
            "model": self.config.model,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "messages": [{"role": "user", "content": parts}],
        }))
    }
}

impl ModelBackend for HttpBackend {
    fn query(
        &self,
        image: Option<&ImageRecord>,
        prompt: &RenderedPrompt,
        _kind: &QueryKind,
    ) -> std::result::Result<ChatResponse, BackendError> {
        let request = ChatRequest {
            image_ref: image.map(|i| i.image_ref.clone()),
            prompt: prompt.text.clone(),
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        };
        self.send(&request)
    }
}

enum Attempt {
    Transient(String),
    Fatal(BackendError),
}

fn extract_content(value: &Value) -> std::result::Result<String, BackendError> {
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| {
            BackendError::MalformedReply("missing choices[0].message.content".into())
        })
}

/// URLs and data URIs pass through; local paths are inlined as base64
/// data URIs.
fn image_part_url(image_ref: &str) -> std::result::Result<String, BackendError> {
    if image_ref.starts_with("http://")
        || image_ref.starts_with("https://")
        || image_ref.starts_with("data:")
    {
        return Ok(image_ref.to_string());
    }
    let bytes = std::fs::read(image_ref)
        .map_err(|e| BackendError::Request(format!("cannot read image {image_ref}: {e}")))?;
    let mime = match Path::new(image_ref)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "image/jpeg",
    };
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{mime};base64,{encoded}"))
}

/// Counting semaphore; permits release on guard drop.
struct Semaphore {
    available: Mutex<usize>,
    signal: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            available: Mutex::new(permits),
            signal: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().expect("limiter poisoned");
        while *available == 0 {
            available = self.signal.wait(available).expect("limiter poisoned");
        }
        *available -= 1;
        Permit { semaphore: self }
    }
}

struct Permit<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut available = self.semaphore.available.lock().expect("limiter poisoned");
        *available += 1;
        self.semaphore.signal.notify_one();
    }
}
