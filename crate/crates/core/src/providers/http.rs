use async_trait::async_trait;
use futures::StreamExt;
use serde::Deserialize;
use serde_json::json;

use super::wire::StreamDecoder;
use super::{
    validate_embed_input, validate_messages, with_retry, ChatMessage, Dialect, GenerationParams,
    Provider, ProviderEndpoint, ProviderError, RetryPolicy, TokenEvent, TokenStream,
};

const BODY_EXCERPT: usize = 512;

/// Network client for openai- and ollama-compatible servers.
pub struct HttpProvider {
    endpoint: ProviderEndpoint,
    client: reqwest::Client,
    retry: RetryPolicy,
}

impl HttpProvider {
    pub fn new(endpoint: ProviderEndpoint) -> Result<Self, ProviderError> {
        endpoint.validate()?;
        if endpoint.dialect == Dialect::Mock {
            return Err(ProviderError::InvalidEndpoint("mock endpoints are not served over HTTP".into()));
        }
        let client = reqwest::Client::builder()
            .connect_timeout(endpoint.timeout)
            .read_timeout(endpoint.timeout)
            .build()
            .map_err(|e| ProviderError::InvalidEndpoint(e.to_string()))?;
        let retry = RetryPolicy::new(endpoint.max_retries);
        Ok(Self { endpoint, client, retry })
    }

    pub fn with_retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn post(&self, url: &str, body: &serde_json::Value) -> reqwest::RequestBuilder {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.endpoint.api_key {
            req = req.bearer_auth(key);
        }
        req
    }

    /// Send with connection retries and map non-2xx statuses to errors.
    async fn send(&self, url: &str, body: &serde_json::Value) -> Result<reqwest::Response, ProviderError> {
        let resp = with_retry(&self.retry, |_| async {
            self.post(url, body).send().await.map_err(map_reqwest)
        })
        .await?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().await.unwrap_or_default();
            let body: String = text.chars().take(BODY_EXCERPT).collect();
            return Err(ProviderError::Http { status: status.as_u16(), body });
        }
        Ok(resp)
    }

    fn chat_body(&self, messages: &[ChatMessage], params: &GenerationParams) -> (String, serde_json::Value) {
        let msgs: Vec<_> = messages
            .iter()
            .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
            .collect();
        match self.endpoint.dialect {
            Dialect::Ollama => (
                self.endpoint.join("/api/chat"),
                json!({
                    "model": self.endpoint.model,
                    "messages": msgs,
                    "stream": true,
                    "options": {
                        "temperature": params.temperature,
                        "top_p": params.top_p,
                        "num_predict": params.max_length,
                    }
                }),
            ),
            _ => (
                self.endpoint.join("/v1/chat/completions"),
                json!({
                    "model": self.endpoint.model,
                    "messages": msgs,
                    "stream": true,
                    "temperature": params.temperature,
                    "top_p": params.top_p,
                    "max_tokens": params.max_length,
                }),
            ),
        }
    }
}

fn map_reqwest(e: reqwest::Error) -> ProviderError {
    if e.is_timeout() {
        ProviderError::Timeout
    } else if e.is_connect() || e.is_request() {
        ProviderError::Unreachable { attempts: 1, message: e.to_string() }
    } else {
        ProviderError::MalformedResponse(e.to_string())
    }
}

type ByteStream =
    std::pin::Pin<Box<dyn futures::Stream<Item = Result<bytes::Bytes, reqwest::Error>> + Send>>;

struct DecodeState {
    bytes: ByteStream,
    decoder: StreamDecoder,
    pending: std::vec::IntoIter<TokenEvent>,
    live: bool,
}

#[derive(Deserialize)]
struct OpenAiEmbeddings {
    data: Vec<OpenAiEmbedding>,
}

#[derive(Deserialize)]
struct OpenAiEmbedding {
    embedding: Vec<f32>,
    #[serde(default)]
    index: Option<usize>,
}

#[derive(Deserialize)]
struct OllamaEmbedding {
    embedding: Vec<f32>,
}

pub(crate) fn check_uniform(vectors: &[Vec<f32>]) -> Result<(), ProviderError> {
    if let Some(first) = vectors.first() {
        if let Some(bad) = vectors.iter().find(|v| v.len() != first.len()) {
            return Err(ProviderError::DimensionMismatch { expected: first.len(), got: bad.len() });
        }
    }
    Ok(())
}

#[async_trait]
impl Provider for HttpProvider {
    fn endpoint(&self) -> &ProviderEndpoint {
        &self.endpoint
    }

    async fn chat_complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<TokenStream, ProviderError> {
        validate_messages(messages)?;
        let (url, body) = self.chat_body(messages, params);
        let resp = self.send(&url, &body).await?;
        let state = DecodeState {
            bytes: Box::pin(resp.bytes_stream()),
            decoder: StreamDecoder::new(self.endpoint.dialect),
            pending: Vec::new().into_iter(),
            live: true,
        };
        let stream = futures::stream::unfold(state, |mut st| async move {
            loop {
                if let Some(ev) = st.pending.next() {
                    return Some((ev, st));
                }
                if !st.live {
                    return None;
                }
                let events = match st.bytes.next().await {
                    Some(Ok(chunk)) => st.decoder.feed(&chunk),
                    Some(Err(e)) => vec![TokenEvent::failed(format!("connection lost: {e}"))],
                    None => st.decoder.finish(),
                };
                if events.iter().any(|e| e.done) {
                    st.live = false;
                }
                st.pending = events.into_iter();
            }
        });
        Ok(Box::pin(stream))
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        validate_embed_input(texts)?;
        let vectors = match self.endpoint.dialect {
            Dialect::Ollama => {
                let url = self.endpoint.join("/api/embeddings");
                let mut out = Vec::with_capacity(texts.len());
                for t in texts {
                    let body = json!({"model": self.endpoint.model, "prompt": t});
                    let resp = self.send(&url, &body).await?;
                    let parsed: OllamaEmbedding = resp
                        .json()
                        .await
                        .map_err(|e| ProviderError::MalformedResponse(e.to_string()))?;
                    out.push(parsed.embedding);
                }
                out
            }
            _ => {
                let url = self.endpoint.join("/v1/embeddings");
                let body = json!({"model": self.endpoint.model, "input": texts});
                let resp = self.send(&url, &body).await?;
                let mut parsed: OpenAiEmbeddings = resp
                    .json()
                    .await
                    .map_err(|e| ProviderError::MalformedResponse(e.to_string()))?;
                if parsed.data.iter().all(|d| d.index.is_some()) {
                    parsed.data.sort_by_key(|d| d.index);
                }
                parsed.data.into_iter().map(|d| d.embedding).collect()
            }
        };
        if vectors.len() != texts.len() {
            return Err(ProviderError::MalformedResponse(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                vectors.len()
            )));
        }
        check_uniform(&vectors)?;
        Ok(vectors)
    }
}
