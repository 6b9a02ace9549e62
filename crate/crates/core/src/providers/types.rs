use std::fmt;
use std::time::Duration;

use reqwest::Url;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

/// Sampling controls forwarded verbatim to the provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    /// Generation cap in tokens.
    pub max_length: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
}

impl GenerationParams {
    pub const DEFAULT_TEMPERATURE: f64 = 0.7;
    pub const DEFAULT_TOP_P: f64 = 0.9;
    pub const DEFAULT_MAX_LENGTH: u32 = 512;

    /// Greedy decoding, used by the labeller and the LLM judge.
    pub fn deterministic(max_length: u32) -> Self {
        Self { temperature: 0.0, top_p: 1.0, max_length, system_prompt: None }
    }

    /// Returns the name of the first field that violates its range.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(("temperature", "must be a finite number >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(("top_p", "must be in (0, 1]".into()));
        }
        if self.max_length == 0 {
            return Err(("max_length", "must be a positive integer".into()));
        }
        Ok(())
    }
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: Self::DEFAULT_TEMPERATURE,
            top_p: Self::DEFAULT_TOP_P,
            max_length: Self::DEFAULT_MAX_LENGTH,
            system_prompt: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

impl FinishReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FinishReason::Stop => "stop",
            FinishReason::Length => "length",
            FinishReason::Error => "error",
        }
    }
}

/// One increment of a streamed completion. Exactly one event per stream has
/// `done == true`, and it is the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub delta: String,
    pub done: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<FinishReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TokenEvent {
    pub fn delta(text: impl Into<String>) -> Self {
        Self { delta: text.into(), done: false, finish_reason: None, error: None }
    }
    pub fn finish(reason: FinishReason) -> Self {
        Self { delta: String::new(), done: true, finish_reason: Some(reason), error: None }
    }
    pub fn failed(message: impl Into<String>) -> Self {
        Self {
            delta: String::new(),
            done: true,
            finish_reason: Some(FinishReason::Error),
            error: Some(message.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dialect {
    #[serde(rename = "openai")]
    OpenAi,
    Ollama,
    Mock,
}

impl std::str::FromStr for Dialect {
    type Err = ProviderError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "openai" | "openai-compatible" => Ok(Dialect::OpenAi),
            "ollama" | "ollama-compatible" => Ok(Dialect::Ollama),
            "mock" => Ok(Dialect::Mock),
            other => Err(ProviderError::InvalidEndpoint(format!("unknown dialect {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderEndpoint {
    pub base_url: String,
    pub dialect: Dialect,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub max_retries: u32,
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

impl ProviderEndpoint {
    pub const MAX_RETRIES_CAP: u32 = 5;

    /// Endpoint with defaults (30 s timeout, 2 retries). The dialect is inferred from
    /// the URL scheme for `mock://`, otherwise openai-compatible.
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Result<Self, ProviderError> {
        let base_url = base_url.into();
        let dialect = if base_url.starts_with("mock://") { Dialect::Mock } else { Dialect::OpenAi };
        let ep = Self {
            base_url,
            dialect,
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(30),
            max_retries: 2,
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn with_dialect(mut self, dialect: Dialect) -> Self {
        self.dialect = dialect;
        self
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_max_retries(mut self, n: u32) -> Self {
        self.max_retries = n;
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let url = Url::parse(&self.base_url)
            .map_err(|e| ProviderError::InvalidEndpoint(format!("base_url {:?}: {e}", self.base_url)))?;
        if url.cannot_be_a_base() {
            return Err(ProviderError::InvalidEndpoint("base_url must be absolute".into()));
        }
        if self.timeout.is_zero() {
            return Err(ProviderError::InvalidEndpoint("timeout must be positive".into()));
        }
        if self.max_retries > Self::MAX_RETRIES_CAP {
            return Err(ProviderError::InvalidEndpoint(format!(
                "max_retries {} exceeds {}",
                self.max_retries,
                Self::MAX_RETRIES_CAP
            )));
        }
        Ok(())
    }

    /// `(url, model)` pair recorded by trained models for consistency checks.
    pub fn fingerprint(&self) -> (String, String) {
        (self.base_url.clone(), self.model.clone())
    }

    pub(crate) fn join(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("provider unreachable after {attempts} attempt(s): {message}")]
    Unreachable { attempts: u32, message: String },
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed stream chunk: {0}")]
    MalformedStreamChunk(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("request timed out")]
    Timeout,
    #[error("stream failed: {0}")]
    MidStream(String),
    #[error("provider returned ragged vectors: expected dim {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

impl ProviderError {
    /// Connection-establishment failures are the only retryable class.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Unreachable { .. } | ProviderError::Timeout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_validation() {
        assert!(ProviderEndpoint::new("http://localhost:11434", "m").is_ok());
        assert!(ProviderEndpoint::new("localhost:11434/x y", "m").is_err());
        assert!(ProviderEndpoint::new("not a url", "m").is_err());
        let ep = ProviderEndpoint::new("http://h", "m").unwrap().with_max_retries(6);
        assert!(ep.validate().is_err());
        let ep = ProviderEndpoint::new("http://h", "m").unwrap().with_timeout(Duration::ZERO);
        assert!(ep.validate().is_err());
        assert_eq!(ProviderEndpoint::new("mock://local", "m").unwrap().dialect, Dialect::Mock);
    }

    #[test]
    fn params_validation_names_field() {
        let mut p = GenerationParams::default();
        assert!(p.validate().is_ok());
        p.top_p = 0.0;
        assert_eq!(p.validate().unwrap_err().0, "top_p");
        p.top_p = 1.0;
        p.temperature = -0.1;
        assert_eq!(p.validate().unwrap_err().0, "temperature");
    }

    #[test]
    fn endpoint_serde_roundtrip() {
        let ep = ProviderEndpoint::new("http://h:1", "m").unwrap().with_api_key("k");
        let s = serde_json::to_string(&ep).unwrap();
        assert_eq!(serde_json::from_str::<ProviderEndpoint>(&s).unwrap(), ep);
    }
}
