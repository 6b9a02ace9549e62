//! Clients for external chat-completion and embedding endpoints.
//!
//! Two wire dialects are spoken: openai-compatible (`/v1/chat/completions` with SSE,
//! `/v1/embeddings`) and ollama-compatible (`/api/chat` with NDJSON, `/api/embeddings`).
//! A deterministic in-process [`MockProvider`] implements the same [`Provider`] trait
//! and backs the test suite.

mod http;
mod mock;
mod retry;
mod types;
pub mod wire;

use std::pin::Pin;
use std::sync::Arc;

use async_trait::async_trait;
use futures::{Stream, StreamExt};

pub use http::HttpProvider;
pub use mock::{hash_embedding, CannedReplies, MockProvider, RecordedChat};
pub use retry::{with_retry, RetryPolicy};
pub use types::{
    ChatMessage, Dialect, FinishReason, GenerationParams, ProviderEndpoint, ProviderError, Role,
    TokenEvent,
};

pub type TokenStream = Pin<Box<dyn Stream<Item = TokenEvent> + Send>>;

/// A fully buffered completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
    pub deltas: usize,
}

#[async_trait]
pub trait Provider: Send + Sync {
    fn endpoint(&self) -> &ProviderEndpoint;

    /// Open a streaming completion. Errors returned here happened before the first
    /// event (connection, HTTP status); failures after that arrive as a terminal
    /// event with `finish_reason = error`.
    async fn chat_complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<TokenStream, ProviderError>;

    /// One vector per input text, in input order.
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError>;

    /// Drain a stream into one string.
    async fn complete_text(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<Completion, ProviderError> {
        let mut stream = self.chat_complete(messages, params).await?;
        let mut text = String::new();
        let mut deltas = 0;
        while let Some(ev) = stream.next().await {
            if !ev.delta.is_empty() {
                text.push_str(&ev.delta);
                deltas += 1;
            }
            if ev.done {
                let finish_reason = ev.finish_reason.unwrap_or(FinishReason::Stop);
                if finish_reason == FinishReason::Error {
                    return Err(ProviderError::MidStream(ev.error.unwrap_or_default()));
                }
                return Ok(Completion { text, finish_reason, deltas });
            }
        }
        Err(ProviderError::MidStream("stream ended without a terminal event".into()))
    }
}

/// Build a client for `endpoint`. `mock://` URLs yield an in-process [`MockProvider`].
pub fn connect(endpoint: ProviderEndpoint) -> Result<Arc<dyn Provider>, ProviderError> {
    match endpoint.dialect {
        Dialect::Mock => Ok(Arc::new(MockProvider::from_endpoint(endpoint)?)),
        Dialect::OpenAi | Dialect::Ollama => Ok(Arc::new(HttpProvider::new(endpoint)?)),
    }
}

/// Check the ordering rules every chat request must satisfy.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), ProviderError> {
    if messages.is_empty() {
        return Err(ProviderError::InvalidRequest("messages must not be empty".into()));
    }
    for (i, m) in messages.iter().enumerate() {
        if m.role == Role::System && i != 0 {
            return Err(ProviderError::InvalidRequest(
                "only one system message is allowed and it must come first".into(),
            ));
        }
    }
    Ok(())
}

pub(crate) fn validate_embed_input(texts: &[String]) -> Result<(), ProviderError> {
    if texts.is_empty() {
        return Err(ProviderError::InvalidRequest("texts must not be empty".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(ProviderError::InvalidRequest(format!("text {i} is empty")));
    }
    Ok(())
}
