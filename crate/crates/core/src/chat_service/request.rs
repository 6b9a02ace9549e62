//! Body validation for `POST /api/generate`.
//!
//! Validation is done by hand rather than through `serde` so that every failure
//! names the offending field.

use serde_json::{Map, Value};

use crate::providers::GenerationParams;

pub const DEFAULT_MEMORY_K: usize = 10;

const FIELDS: &[&str] =
    &["prompt", "memory_k", "conversation_id", "temperature", "top_p", "max_length", "system_prompt", "stream"];

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub prompt: String,
    pub memory_k: usize,
    pub conversation_id: Option<String>,
    pub params: GenerationParams,
    pub stream: bool,
}

/// A rejected body: which field, and why.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub reason: String,
}

impl FieldError {
    fn new(field: &str, reason: impl Into<String>) -> Self {
        Self { field: field.to_string(), reason: reason.into() }
    }
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

fn present<'a>(obj: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key).filter(|v| !v.is_null())
}

fn number(obj: &Map<String, Value>, key: &str) -> Result<Option<f64>, FieldError> {
    match present(obj, key) {
        None => Ok(None),
        Some(v) => v.as_f64().map(Some).ok_or_else(|| FieldError::new(key, "must be a number")),
    }
}

fn unsigned(obj: &Map<String, Value>, key: &str) -> Result<Option<u64>, FieldError> {
    match present(obj, key) {
        None => Ok(None),
        Some(v) => v.as_u64().map(Some).ok_or_else(|| FieldError::new(key, "must be a non-negative integer")),
    }
}

fn text(obj: &Map<String, Value>, key: &str) -> Result<Option<String>, FieldError> {
    match present(obj, key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(FieldError::new(key, "must be a string")),
    }
}

impl ChatRequest {
    pub fn parse(body: &[u8]) -> Result<Self, FieldError> {
        let value: Value =
            serde_json::from_slice(body).map_err(|e| FieldError::new("body", format!("invalid JSON: {e}")))?;
        Self::from_value(&value)
    }

    pub fn from_value(value: &Value) -> Result<Self, FieldError> {
        let obj = value.as_object().ok_or_else(|| FieldError::new("body", "must be a JSON object"))?;
        if let Some(unknown) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
            return Err(FieldError::new(unknown, "unknown field"));
        }
        let prompt = text(obj, "prompt")?.ok_or_else(|| FieldError::new("prompt", "is required"))?;
        if prompt.trim().is_empty() {
            return Err(FieldError::new("prompt", "must not be empty"));
        }
        let memory_k = unsigned(obj, "memory_k")?.map_or(DEFAULT_MEMORY_K, |k| k as usize);
        let conversation_id = text(obj, "conversation_id")?;
        if conversation_id.as_deref().is_some_and(|c| c.trim().is_empty()) {
            return Err(FieldError::new("conversation_id", "must not be empty"));
        }
        let mut params = GenerationParams::default();
        if let Some(t) = number(obj, "temperature")? {
            params.temperature = t;
        }
        if let Some(p) = number(obj, "top_p")? {
            params.top_p = p;
        }
        if let Some(m) = unsigned(obj, "max_length")? {
            params.max_length =
                u32::try_from(m).map_err(|_| FieldError::new("max_length", "is too large"))?;
        }
        params.system_prompt = text(obj, "system_prompt")?.filter(|s| !s.trim().is_empty());
        params.validate().map_err(|(field, reason)| FieldError::new(field, reason))?;
        let stream = match present(obj, "stream") {
            None => true,
            Some(Value::Bool(b)) => *b,
            Some(_) => return Err(FieldError::new("stream", "must be a boolean")),
        };
        Ok(Self { prompt, memory_k, conversation_id, params, stream })
    }
}
