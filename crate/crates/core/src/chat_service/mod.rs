//! HTTP gateway: `POST /api/generate` streams a completion as server-sent events,
//! `GET /healthz` reports status, and `GET /` serves a small chat page.
//!
//! Each event is one `data:` line holding JSON. Deltas look like
//! `{"delta": "...", "done": false}`; the stream ends with
//! `{"done": true, "conversation_id", "finish_reason", "output_token_estimate"}`,
//! plus an `error` field if the provider failed mid-stream. Conversation memory
//! is written only after a stream finishes with `stop` or `length`.

mod auth;
mod request;

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::StreamExt;
use serde_json::json;
use thiserror::Error;

pub use auth::{parse_bearer, AuthChain, AuthDecision, Authenticator, BearerToken, Credentials, NoAuth};
pub use request::{ChatRequest, FieldError, DEFAULT_MEMORY_K};

use crate::memory::MemoryStore;
use crate::providers::{ChatMessage, FinishReason, Provider, ProviderError, Role, TokenStream};

/// Environment variable holding the bearer token; bearer auth is on when it is set.
pub const API_TOKEN_ENV: &str = "LMFORGE_API_TOKEN";

const INDEX_HTML: &str = include_str!("index.html");

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: std::io::Error },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything a request handler needs.
#[derive(Clone)]
pub struct AppState {
    pub provider: Arc<dyn Provider>,
    pub memory: Arc<MemoryStore>,
    pub auth: AuthChain,
}

impl AppState {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Self { provider, memory: Arc::new(MemoryStore::in_memory()), auth: AuthChain::new() }
    }

    pub fn with_memory(mut self, memory: Arc<MemoryStore>) -> Self {
        self.memory = memory;
        self
    }

    pub fn with_auth(mut self, auth: AuthChain) -> Self {
        self.auth = auth;
        self
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/healthz", get(healthz))
        .route("/api/generate", post(generate))
        .with_state(state)
}

/// A bound listener, so callers can learn the port before serving.
pub struct Server {
    listener: tokio::net::TcpListener,
}

impl Server {
    pub async fn bind(host: &str, port: u16) -> Result<Self, ServiceError> {
        let addr = format!("{host}:{port}");
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|source| ServiceError::BindFailure { addr, source })?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, ServiceError> {
        Ok(self.listener.local_addr()?)
    }

    /// Serve until `shutdown` resolves; in-flight requests are allowed to finish.
    pub async fn run<F>(self, state: AppState, shutdown: F) -> Result<(), ServiceError>
    where
        F: std::future::Future<Output = ()> + Send + 'static,
    {
        tracing::info!(addr = %self.local_addr()?, "listening");
        axum::serve(self.listener, router(state)).with_graceful_shutdown(shutdown).await?;
        Ok(())
    }
}

/// Bind and serve until the process is stopped.
pub async fn serve(host: &str, port: u16, state: AppState) -> Result<(), ServiceError> {
    Server::bind(host, port).await?.run(state, std::future::pending()).await
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    let (url, model) = state.provider.endpoint().fingerprint();
    Json(json!({
        "status": "ok",
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "provider": url,
        "model": model,
    }))
}

fn error_response(status: StatusCode, message: &str, field: Option<&str>) -> Response {
    let mut body = json!({ "error": message });
    if let Some(f) = field {
        body["field"] = json!(f);
    }
    (status, Json(body)).into_response()
}

fn credentials(headers: &HeaderMap, body: &[u8]) -> Credentials {
    let bearer = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(parse_bearer);
    let conversation_id = serde_json::from_slice::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v.get("conversation_id")?.as_str().map(str::to_string));
    Credentials { bearer, conversation_id }
}

fn provider_failure(e: &ProviderError) -> Response {
    match e {
        ProviderError::InvalidRequest(msg) => error_response(StatusCode::UNPROCESSABLE_ENTITY, msg, None),
        other => error_response(StatusCode::BAD_GATEWAY, &other.to_string(), None),
    }
}

/// Prompt assembly: optional system prompt, the memory window, then the new user turn.
pub fn assemble_messages(memory: &MemoryStore, req: &ChatRequest, conversation_id: &str) -> Vec<ChatMessage> {
    let mut messages = Vec::new();
    if let Some(system) = &req.params.system_prompt {
        messages.push(ChatMessage::system(system.clone()));
    }
    messages.extend(memory.window(conversation_id, req.memory_k).iter().map(ChatMessage::from));
    messages.push(ChatMessage::user(req.prompt.clone()));
    messages
}

fn remember(memory: &MemoryStore, conversation_id: &str, prompt: &str, reply: &str) {
    let mut turn = vec![(Role::User, prompt.to_string())];
    if !reply.is_empty() {
        turn.push((Role::Assistant, reply.to_string()));
    }
    if let Err(e) = memory.append_all(conversation_id, turn) {
        tracing::error!(conversation_id, error = %e, "failed to record conversation turn");
    }
}

async fn generate(State(state): State<AppState>, headers: HeaderMap, body: Bytes) -> Response {
    if let AuthDecision::Deny(reason) = state.auth.authenticate(&credentials(&headers, &body)) {
        return error_response(StatusCode::UNAUTHORIZED, &reason, None);
    }
    let req = match ChatRequest::parse(&body) {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::UNPROCESSABLE_ENTITY, &e.to_string(), Some(&e.field)),
    };
    let conversation_id = req.conversation_id.clone().unwrap_or_else(MemoryStore::new_conversation_id);
    let messages = assemble_messages(&state.memory, &req, &conversation_id);
    let stream = match state.provider.chat_complete(&messages, &req.params).await {
        Ok(s) => s,
        Err(e) => return provider_failure(&e),
    };
    let turn = Turn { memory: state.memory.clone(), conversation_id, prompt: req.prompt };
    if req.stream {
        Sse::new(sse_events(stream, turn)).keep_alive(KeepAlive::default()).into_response()
    } else {
        buffered(stream, turn).await
    }
}

struct Turn {
    memory: Arc<MemoryStore>,
    conversation_id: String,
    prompt: String,
}

struct Pump {
    inner: TokenStream,
    turn: Turn,
    reply: String,
    deltas: usize,
}

fn terminal(turn: &Turn, reason: FinishReason, deltas: usize, error: Option<String>) -> serde_json::Value {
    let mut v = json!({
        "done": true,
        "conversation_id": turn.conversation_id,
        "finish_reason": reason.as_str(),
        "output_token_estimate": deltas,
    });
    if let Some(e) = error {
        v["error"] = json!(e);
    }
    v
}

fn event(v: &serde_json::Value) -> Result<Event, Infallible> {
    Ok(Event::default().data(v.to_string()))
}

fn sse_events(inner: TokenStream, turn: Turn) -> impl futures::Stream<Item = Result<Event, Infallible>> + Send {
    let pump = Pump { inner, turn, reply: String::new(), deltas: 0 };
    futures::stream::unfold(Some(pump), |state| async move {
        let mut p = state?;
        loop {
            match p.inner.next().await {
                Some(ev) if !ev.done => {
                    if ev.delta.is_empty() {
                        continue;
                    }
                    p.reply.push_str(&ev.delta);
                    p.deltas += 1;
                    let e = event(&json!({ "delta": ev.delta, "done": false }));
                    return Some((e, Some(p)));
                }
                Some(ev) => {
                    // a terminal event may still carry a final piece of text
                    if !ev.delta.is_empty() {
                        p.reply.push_str(&ev.delta);
                        p.deltas += 1;
                    }
                    let reason = ev.finish_reason.unwrap_or(FinishReason::Stop);
                    if reason != FinishReason::Error {
                        remember(&p.turn.memory, &p.turn.conversation_id, &p.turn.prompt, &p.reply);
                    }
                    let mut done = terminal(&p.turn, reason, p.deltas, ev.error);
                    if !ev.delta.is_empty() {
                        done["delta"] = json!(ev.delta);
                    }
                    return Some((event(&done), None));
                }
                None => {
                    let msg = "provider stream ended without a terminal event".to_string();
                    return Some((event(&terminal(&p.turn, FinishReason::Error, p.deltas, Some(msg))), None));
                }
            }
        }
    })
}

async fn buffered(mut inner: TokenStream, turn: Turn) -> Response {
    let mut reply = String::new();
    let mut deltas = 0;
    while let Some(ev) = inner.next().await {
        if !ev.delta.is_empty() {
            reply.push_str(&ev.delta);
            deltas += 1;
        }
        if ev.done {
            let reason = ev.finish_reason.unwrap_or(FinishReason::Stop);
            if reason == FinishReason::Error {
                let msg = ev.error.unwrap_or_else(|| "provider failed mid-stream".into());
                return error_response(StatusCode::BAD_GATEWAY, &msg, None);
            }
            remember(&turn.memory, &turn.conversation_id, &turn.prompt, &reply);
            let mut body = terminal(&turn, reason, deltas, None);
            body["text"] = json!(reply);
            return Json(body).into_response();
        }
    }
    error_response(StatusCode::BAD_GATEWAY, "provider stream ended without a terminal event", None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::MockProvider;
    use axum::body::Body;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    async fn send(app: &Router, req: Request<Body>) -> (StatusCode, String) {
        let res = app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let bytes = res.into_body().collect().await.unwrap().to_bytes();
        (status, String::from_utf8(bytes.to_vec()).unwrap())
    }

    fn post(body: serde_json::Value) -> Request<Body> {
        Request::post("/api/generate")
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap()
    }

    fn events(sse: &str) -> Vec<serde_json::Value> {
        sse.lines()
            .filter_map(|l| l.strip_prefix("data:"))
            .map(|d| serde_json::from_str(d.trim()).unwrap())
            .collect()
    }

    #[tokio::test]
    async fn echo_stream_and_memory() {
        let mock = Arc::new(MockProvider::new(1, 8));
        let state = AppState::new(mock.clone());
        let memory = state.memory.clone();
        let app = router(state);
        let (status, body) = send(
            &app,
            post(json!({"prompt": "echo: hi there", "memory_k": 0, "temperature": 0.7, "top_p": 0.9, "max_length": 64})),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        let evs = events(&body);
        let text: String = evs.iter().filter_map(|e| e["delta"].as_str()).collect();
        assert_eq!(text, "hi there");
        let last = evs.last().unwrap();
        assert_eq!(last["done"], true);
        assert_eq!(last["finish_reason"], "stop");
        assert_eq!(last["output_token_estimate"], 2);
        let conv = last["conversation_id"].as_str().unwrap().to_string();
        assert_eq!(memory.len(&conv), 2);

        let (_, body) = send(&app, post(json!({"prompt": "again", "memory_k": 2, "conversation_id": conv}))).await;
        assert_eq!(events(&body).last().unwrap()["conversation_id"], conv.as_str());
        let seen = &mock.chat_requests()[1].messages;
        assert_eq!(seen.len(), 3);
        assert_eq!(seen[0].content, "echo: hi there");
        assert_eq!(seen[1].content, "hi there");
    }

    #[tokio::test]
    async fn buffered_mode_and_system_prompt() {
        let mock = Arc::new(MockProvider::new(1, 8));
        let app = router(AppState::new(mock.clone()));
        let (status, body) =
            send(&app, post(json!({"prompt": "echo: a b c", "stream": false, "system_prompt": "terse", "max_length": 2})))
                .await;
        assert_eq!(status, StatusCode::OK);
        let v: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["text"], "a b");
        assert_eq!(v["finish_reason"], "length");
        assert_eq!(mock.chat_requests()[0].messages[0], ChatMessage::system("terse"));
    }

    #[tokio::test]
    async fn failures_leave_memory_untouched() {
        let mock = Arc::new(MockProvider::new(1, 8));
        mock.set_fail_after(Some(1));
        let state = AppState::new(mock.clone());
        let memory = state.memory.clone();
        let app = router(state);
        let (_, body) = send(&app, post(json!({"prompt": "echo: one two three", "conversation_id": "c"}))).await;
        let last = events(&body).pop().unwrap();
        assert_eq!(last["finish_reason"], "error");
        assert!(last["error"].is_string());
        assert_eq!(memory.len("c"), 0);

        mock.set_fail_after(None);
        mock.set_http_failure(Some(500));
        let (status, _) = send(&app, post(json!({"prompt": "x", "conversation_id": "c"}))).await;
        assert_eq!(status, StatusCode::BAD_GATEWAY);
        assert_eq!(memory.len("c"), 0);
    }

    #[tokio::test]
    async fn validation_and_routes() {
        let app = router(AppState::new(Arc::new(MockProvider::new(1, 8))));
        let (status, body) = send(&app, post(json!({"memory_k": 1}))).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert!(body.contains("\"field\":\"prompt\""), "{body}");
        let (status, body) = send(&app, post(json!({"prompt": "x", "extra": 1}))).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
        assert!(body.contains("extra"));

        let (status, _) = send(&app, Request::get("/api/generate").body(Body::empty()).unwrap()).await;
        assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED);
        let (status, body) = send(&app, Request::get("/healthz").body(Body::empty()).unwrap()).await;
        assert_eq!(status, StatusCode::OK);
        assert!(body.contains("\"status\":\"ok\""));
        let (status, body) = send(&app, Request::get("/").body(Body::empty()).unwrap()).await;
        assert_eq!(status, StatusCode::OK);
        assert!(body.contains("<div id=\"app\"") && body.contains("/api/generate"));
    }

    #[tokio::test]
    async fn binds_and_shuts_down() {
        let server = Server::bind("127.0.0.1", 0).await.unwrap();
        assert_ne!(server.local_addr().unwrap().port(), 0);
        let state = AppState::new(Arc::new(MockProvider::new(1, 8)));
        server.run(state, async {}).await.unwrap();
        let taken = Server::bind("127.0.0.1", 0).await.unwrap();
        let port = taken.local_addr().unwrap().port();
        assert!(matches!(Server::bind("127.0.0.1", port).await, Err(ServiceError::BindFailure { .. })));
    }

    #[tokio::test]
    async fn bearer_auth_denies_before_provider_call() {
        let mock = Arc::new(MockProvider::new(1, 8));
        let app = router(AppState::new(mock.clone()).with_auth(AuthChain::new().with(BearerToken::new("tok"))));
        let (status, body) = send(&app, post(json!({"prompt": "hi"}))).await;
        assert_eq!(status, StatusCode::UNAUTHORIZED);
        assert!(body.contains("missing credentials"));
        assert!(mock.chat_requests().is_empty());

        let req = Request::post("/api/generate")
            .header("authorization", "Bearer tok")
            .body(Body::from(json!({"prompt": "hi"}).to_string()))
            .unwrap();
        let (status, _) = send(&app, req).await;
        assert_eq!(status, StatusCode::OK);
    }
}
