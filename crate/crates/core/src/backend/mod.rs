//! Model backends: the HTTP chat-completion client and the deterministic
//! simulator. Everything upstream talks to a [`ModelBackend`], which takes
//! both the rendered prompt and a structured description of the query so
//! the simulator can answer without natural-language understanding.

pub mod http;
pub mod sim;

pub use http::HttpBackend;
pub use sim::{RatePair, SimBackend, SimProfile};

use serde::{Deserialize, Serialize};

use crate::error::{BackendError, Error, Result};
use crate::prompt::RenderedPrompt;
use crate::vocab::ImageRecord;

/// Structured description of what a prompt asks, alongside its text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryKind {
    /// Yes/no presence of one category.
    Binary { category: usize },
    /// Which of these categories are present.
    MultiOption { categories: Vec<usize> },
    /// Unconstrained object listing.
    OpenEnded,
    /// Text-only request to partition the vocabulary into `m` groups.
    Partition { m: usize },
    /// Text-only concept-acquisition question about one category.
    Concept { step: ConceptStep, category: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConceptStep {
    SuperCategory,
    Similar,
    Ambiguity,
}

/// One chat-completion call.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    /// Path, URL, or data URI of the image; `None` for text-only queries.
    pub image_ref: Option<String>,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

/// A model reply plus bookkeeping.
#[derive(Debug, Clone)]
pub struct ChatResponse {
    pub text: String,
    pub latency_ms: u64,
    /// 1-based attempt on which the call succeeded.
    pub attempt: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_backoff_ms: 500,
            multiplier: 2.0,
        }
    }
}

/// HTTP backend settings. The auth token is read from the environment
/// variable named by `token_env`, never from configuration values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
}

fn default_token_env() -> String {
    "TAGLLM_API_TOKEN".into()
}

fn default_max_in_flight() -> usize {
    4
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_tokens() -> u32 {
    512
}

impl BackendConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        BackendConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            token_env: default_token_env(),
            max_in_flight: default_max_in_flight(),
            retry: RetryPolicy::default(),
            timeout_ms: default_timeout_ms(),
            max_tokens: default_max_tokens(),
            temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.endpoint.is_empty() {
            return Err(Error::Config("backend endpoint is empty".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.retry.multiplier < 1.0 {
            return Err(Error::Config("retry multiplier must be >= 1".into()));
        }
        Ok(())
    }
}

/// A model that can answer annotation, partition, and concept queries.
pub trait ModelBackend: Send + Sync {
    fn query(
        &self,
        image: Option<&ImageRecord>,
        prompt: &RenderedPrompt,
        kind: &QueryKind,
    ) -> std::result::Result<ChatResponse, BackendError>;
}
