//! Chat generation over pluggable backends, plus answer extraction and the
//! answer-token confidence used for gating.

mod confidence;
pub mod http;
pub mod scripted;

use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media::{MediaError, TimeInterval};

pub use confidence::{answer_confidence, extract_answer, locate_answer_span, ConfidenceScope};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("backend failed after {attempts} attempt(s): {message}")]
    Backend { attempts: u32, message: String },
    #[error("backend returned no logprobs")]
    LogprobsUnavailable { text: String },
    #[error("script: {0}")]
    Script(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("answer span is empty")]
    EmptySpan,
    #[error("answer span {start}..{end} out of bounds for {len} logprobs")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("invalid logprob {0}")]
    InvalidLogprob(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

/// Reference to `frame_count` frames resampled from an interval of a video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoClipRef {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub frame_count: usize,
}

impl VideoClipRef {
    pub fn new(video_id: impl Into<String>, interval: TimeInterval, frame_count: usize) -> Self {
        Self { video_id: video_id.into(), start_s: interval.start_s(), end_s: interval.end_s(), frame_count }
    }

    pub fn interval(&self) -> Result<TimeInterval, MediaError> {
        TimeInterval::new(self.start_s, self.end_s)
    }

    /// Textual stand-in used wherever frames cannot be attached.
    pub fn placeholder(&self) -> String {
        format!("<video: {:.2}–{:.2}, {} frames>", self.start_s, self.end_s, self.frame_count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Part {
    Text { text: String },
    Video(VideoClipRef),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<Part>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self { role, content: vec![Part::Text { text: text.into() }] }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::text(Role::System, text)
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::text(Role::User, text)
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self::text(Role::Assistant, text)
    }

    /// Concatenated text parts; video parts are skipped.
    pub fn joined_text(&self) -> String {
        let texts: Vec<&str> = self
            .content
            .iter()
            .filter_map(|p| match p {
                Part::Text { text } => Some(text.as_str()),
                Part::Video(_) => None,
            })
            .collect();
        texts.join("\n")
    }

    pub fn videos(&self) -> impl Iterator<Item = &VideoClipRef> {
        self.content.iter().filter_map(|p| match p {
            Part::Video(v) => Some(v),
            Part::Text { .. } => None,
        })
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.content.is_empty() {
            return Err(GatewayError::InvalidRequest("message without content".into()));
        }
        if matches!(self.role, Role::System | Role::Assistant) && self.videos().next().is_some() {
            return Err(GatewayError::InvalidRequest(format!("{:?} message cannot carry video", self.role)));
        }
        Ok(())
    }
}

/// Number of assistant turns so far, i.e. the index of the next generation.
pub fn assistant_turns(messages: &[ChatMessage]) -> usize {
    messages.iter().filter(|m| m.role == Role::Assistant).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub want_logprobs: bool,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 1024, want_logprobs: false, seed: None }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    /// Token strings aligned with `token_logprobs`, when the backend reports them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    /// Explicit answer span within `token_logprobs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_span: Option<(usize, usize)>,
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;
    fn generate(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<GenerationOutput, GatewayError>;
}

/// Counting semaphore bounding concurrent generations on one endpoint.
#[derive(Debug)]
struct InflightLimiter {
    available: Mutex<usize>,
    freed: Condvar,
}

impl InflightLimiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("limiter poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a InflightLimiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("limiter poisoned") += 1;
        self.0.freed.notify_one();
    }
}

/// Shareable handle to a backend with admission control.
#[derive(Clone)]
pub struct Endpoint {
    backend: Arc<dyn ChatBackend>,
    limiter: Arc<InflightLimiter>,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint").field("backend", &self.backend.name()).finish()
    }
}

impl Endpoint {
    pub const DEFAULT_MAX_INFLIGHT: usize = 8;

    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self::with_limit(backend, Self::DEFAULT_MAX_INFLIGHT)
    }

    pub fn with_limit(backend: Arc<dyn ChatBackend>, max_inflight: usize) -> Self {
        Self {
            backend,
            limiter: Arc::new(InflightLimiter { available: Mutex::new(max_inflight.max(1)), freed: Condvar::new() }),
        }
    }

    pub fn name(&self) -> &str {
        self.backend.name()
    }

    pub fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<GenerationOutput, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        messages.iter().try_for_each(ChatMessage::validate)?;
        params.validate()?;
        let _permit = self.limiter.acquire();
        let out = self.backend.generate(messages, params)?;
        if let Some(lp) = &out.token_logprobs {
            if let Some(bad) = lp.iter().find(|v| !(v.is_finite() && **v <= 0.0)) {
                return Err(GatewayError::InvalidLogprob(*bad));
            }
        }
        Ok(out)
    }
}
