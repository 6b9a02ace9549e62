//! Deterministic in-process provider.
//!
//! Chat replies, in priority order:
//! 1. a canned rule whose needle occurs in the user messages (replies are consumed in
//!    order per rule, the last one repeating);
//! 2. `echo: X` as the last user message replies `X`;
//! 3. otherwise `"You said: <prompt>"`.
//!
//! Replies stream as word pieces (each piece carries its leading whitespace), one
//! piece per token, so `max_length` truncates at a piece boundary.
//!
//! Embeddings are `normalize(0.9·k + 0.1·r)` where `k` is a unit vector derived from
//! the first whitespace token of the text and `r` a unit vector derived from the
//! whole text. Texts sharing a leading keyword land close together.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::StreamExt;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqwest::Url;

use super::{
    validate_embed_input, validate_messages, with_retry, ChatMessage, FinishReason,
    GenerationParams, Provider, ProviderEndpoint, ProviderError, RetryPolicy, Role, TokenEvent,
    TokenStream,
};
use crate::util::seeded_hash;

const KEYWORD_WEIGHT: f64 = 0.9;
const RESIDUAL_WEIGHT: f64 = 0.1;

/// Unit vector in `dim` dimensions derived from `(seed, tag, text)`.
fn unit_hash_vector(seed: u64, tag: &str, text: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeded_hash(seed, tag, text));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// The mock embedding map, usable without a provider (the default student featurizer).
pub fn hash_embedding(seed: u64, dim: usize, text: &str) -> Vec<f32> {
    let trimmed = text.trim();
    let keyword = trimmed.split_whitespace().next().unwrap_or("");
    let k = unit_hash_vector(seed, "keyword", keyword, dim);
    let r = unit_hash_vector(seed, "text", trimmed, dim);
    let mixed: Vec<f64> = k
        .iter()
        .zip(&r)
        .map(|(a, b)| KEYWORD_WEIGHT * a + RESIDUAL_WEIGHT * b)
        .collect();
    let n = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
    mixed.into_iter().map(|x| (x / n) as f32).collect()
}

/// Needle → reply sequence.
pub type CannedReplies = Vec<(String, Vec<String>)>;

/// One chat request as the mock received it.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedChat {
    pub messages: Vec<ChatMessage>,
    pub params: GenerationParams,
}

#[derive(Default)]
struct MockState {
    chats: Vec<RecordedChat>,
    rules: Vec<(String, Vec<String>, usize)>,
    connect_attempts: usize,
    embed_calls: usize,
    unreachable_attempts: usize,
    http_failure: Option<u16>,
    fail_after: Option<usize>,
    delta_delay: Option<Duration>,
    ragged: bool,
}

pub struct MockProvider {
    endpoint: ProviderEndpoint,
    seed: u64,
    dim: usize,
    retry: RetryPolicy,
    state: Mutex<MockState>,
    in_flight: Arc<AtomicUsize>,
    max_in_flight: Arc<AtomicUsize>,
}

struct FlightGuard(Arc<AtomicUsize>);

impl Drop for FlightGuard {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Split a reply into whitespace-led word pieces.
pub(crate) fn pieces(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut cur = String::new();
    let mut in_word = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            if in_word {
                out.push(std::mem::take(&mut cur));
                in_word = false;
            }
        } else {
            in_word = true;
        }
        cur.push(ch);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl MockProvider {
    pub fn new(seed: u64, dim: usize) -> Self {
        let endpoint = ProviderEndpoint::new(format!("mock://local?seed={seed}&dim={dim}"), "mock")
            .expect("mock endpoint is valid");
        Self::build(endpoint, seed, dim.max(1))
    }

    fn build(endpoint: ProviderEndpoint, seed: u64, dim: usize) -> Self {
        let retry = RetryPolicy::new(endpoint.max_retries).with_base_delay(Duration::ZERO);
        Self {
            endpoint,
            seed,
            dim,
            retry,
            state: Mutex::new(MockState::default()),
            in_flight: Arc::new(AtomicUsize::new(0)),
            max_in_flight: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Parse `mock://host?seed=S&dim=D&canned=FILE`. `canned` points at a JSON object
    /// mapping needles to reply arrays.
    pub fn from_endpoint(endpoint: ProviderEndpoint) -> Result<Self, ProviderError> {
        endpoint.validate()?;
        let url = Url::parse(&endpoint.base_url)
            .map_err(|e| ProviderError::InvalidEndpoint(e.to_string()))?;
        let mut seed = 0u64;
        let mut dim = 32usize;
        let mut canned = None;
        for (k, v) in url.query_pairs() {
            let bad = |what: &str| ProviderError::InvalidEndpoint(format!("mock {what}: {v:?}"));
            match k.as_ref() {
                "seed" => seed = v.parse().map_err(|_| bad("seed"))?,
                "dim" => {
                    dim = v.parse().map_err(|_| bad("dim"))?;
                    if dim == 0 {
                        return Err(bad("dim"));
                    }
                }
                "canned" => canned = Some(v.into_owned()),
                _ => return Err(ProviderError::InvalidEndpoint(format!("unknown mock option {k:?}"))),
            }
        }
        let mock = Self::build(endpoint, seed, dim);
        if let Some(path) = canned {
            mock.load_canned(Path::new(&path))?;
        }
        Ok(mock)
    }

    fn load_canned(&self, path: &Path) -> Result<(), ProviderError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::InvalidEndpoint(format!("canned replies {}: {e}", path.display())))?;
        let map: indexmap_like::Ordered = serde_json::from_str(&raw)
            .map_err(|e| ProviderError::InvalidEndpoint(format!("canned replies: {e}")))?;
        for (needle, replies) in map.0 {
            self.add_canned(needle, replies);
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Reply with `replies` (in order, last repeating) whenever a user message contains `needle`.
    pub fn add_canned(&self, needle: impl Into<String>, replies: Vec<String>) {
        assert!(!replies.is_empty(), "canned rule needs at least one reply");
        self.state.lock().rules.push((needle.into(), replies, 0));
    }

    pub fn with_canned(self, needle: &str, replies: &[&str]) -> Self {
        self.add_canned(needle, replies.iter().map(|s| s.to_string()).collect());
        self
    }

    /// The first `n` connection attempts fail as unreachable.
    pub fn set_unreachable_attempts(&self, n: usize) {
        self.state.lock().unreachable_attempts = n;
    }

    /// Every chat request fails with this HTTP status before streaming.
    pub fn set_http_failure(&self, status: Option<u16>) {
        self.state.lock().http_failure = status;
    }

    /// Emit `n` deltas and then a terminal error event.
    pub fn set_fail_after(&self, n: Option<usize>) {
        self.state.lock().fail_after = n;
    }

    pub fn set_delta_delay(&self, d: Option<Duration>) {
        self.state.lock().delta_delay = d;
    }

    pub fn set_ragged_embeddings(&self, ragged: bool) {
        self.state.lock().ragged = ragged;
    }

    pub fn chat_requests(&self) -> Vec<RecordedChat> {
        self.state.lock().chats.clone()
    }

    pub fn connect_attempts(&self) -> usize {
        self.state.lock().connect_attempts
    }

    pub fn embed_calls(&self) -> usize {
        self.state.lock().embed_calls
    }

    /// Highest number of simultaneously open chat streams seen so far.
    pub fn max_concurrent(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        hash_embedding(self.seed, self.dim, text)
    }

    /// Full reply the mock would produce for `messages`, without consuming canned replies.
    pub fn peek_reply(&self, messages: &[ChatMessage]) -> String {
        self.reply(messages, false)
    }

    fn reply(&self, messages: &[ChatMessage], consume: bool) -> String {
        let user_text: Vec<&str> = messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .collect();
        {
            let mut st = self.state.lock();
            for (needle, replies, used) in st.rules.iter_mut() {
                if user_text.iter().any(|t| t.contains(needle.as_str())) {
                    let r = replies[(*used).min(replies.len() - 1)].clone();
                    if consume {
                        *used += 1;
                    }
                    return r;
                }
            }
        }
        let last = user_text.last().copied().unwrap_or("");
        match last.strip_prefix("echo: ") {
            Some(rest) => rest.to_string(),
            None => format!("You said: {last}"),
        }
    }

    fn try_connect(&self) -> Result<(), ProviderError> {
        let mut st = self.state.lock();
        st.connect_attempts += 1;
        if st.connect_attempts <= st.unreachable_attempts {
            return Err(ProviderError::Unreachable {
                attempts: 1,
                message: "mock: connection refused".into(),
            });
        }
        if let Some(status) = st.http_failure {
            return Err(ProviderError::Http { status, body: "mock failure".into() });
        }
        Ok(())
    }
}

#[async_trait]
impl Provider for MockProvider {
    fn endpoint(&self) -> &ProviderEndpoint {
        &self.endpoint
    }

    async fn chat_complete(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<TokenStream, ProviderError> {
        validate_messages(messages)?;
        with_retry(&self.retry, |_| async { self.try_connect() }).await?;
        let (fail_after, delay) = {
            let mut st = self.state.lock();
            st.chats.push(RecordedChat { messages: messages.to_vec(), params: params.clone() });
            (st.fail_after, st.delta_delay)
        };
        let reply = self.reply(messages, true);
        let mut parts = pieces(&reply);
        let max = params.max_length as usize;
        let mut events: Vec<TokenEvent> = Vec::new();
        match fail_after {
            Some(n) if n < parts.len().min(max) => {
                parts.truncate(n);
                events.extend(parts.into_iter().map(TokenEvent::delta));
                events.push(TokenEvent::failed("mock: stream interrupted"));
            }
            _ => {
                let truncated = parts.len() > max;
                parts.truncate(max);
                events.extend(parts.into_iter().map(TokenEvent::delta));
                events.push(TokenEvent::finish(if truncated {
                    FinishReason::Length
                } else {
                    FinishReason::Stop
                }));
            }
        }

        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let guard = FlightGuard(self.in_flight.clone());
        let stream = futures::stream::iter(events).then(move |ev| {
            let _held = &guard;
            async move {
                if let Some(d) = delay {
                    tokio::time::sleep(d).await;
                }
                ev
            }
        });
        Ok(Box::pin(stream))
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ProviderError> {
        validate_embed_input(texts)?;
        let (ragged, call) = {
            let mut st = self.state.lock();
            st.embed_calls += 1;
            (st.ragged, st.embed_calls)
        };
        let mut out: Vec<Vec<f32>> = texts.iter().map(|t| self.embed_one(t)).collect();
        // ragged mode: later calls grow by one dimension, and within a call the
        // second vector does too
        if ragged {
            if call > 1 {
                out.iter_mut().for_each(|v| v.push(0.0));
            } else if out.len() > 1 {
                out[1].push(0.0);
            }
        }
        super::http::check_uniform(&out)?;
        Ok(out)
    }
}

/// Canned reply files keep their declaration order.
mod indexmap_like {
    use serde::de::{Deserialize, Deserializer, MapAccess, Visitor};

    pub struct Ordered(pub Vec<(String, Vec<String>)>);

    impl<'de> Deserialize<'de> for Ordered {
        fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
            struct V;
            impl<'de> Visitor<'de> for V {
                type Value = Ordered;
                fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                    f.write_str("a map of needle to reply list")
                }
                fn visit_map<A: MapAccess<'de>>(self, mut m: A) -> Result<Ordered, A::Error> {
                    let mut out = Vec::new();
                    while let Some((k, v)) = m.next_entry::<String, Vec<String>>()? {
                        if v.is_empty() {
                            return Err(serde::de::Error::custom(format!("no replies for {k:?}")));
                        }
                        out.push((k, v));
                    }
                    Ok(Ordered(out))
                }
            }
            d.deserialize_map(V)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::cosine;

    async fn collect(mock: &MockProvider, prompt: &str, max_length: u32) -> Vec<TokenEvent> {
        let params = GenerationParams { max_length, ..GenerationParams::default() };
        let s = mock.chat_complete(&[ChatMessage::user(prompt)], &params).await.unwrap();
        s.collect().await
    }

    #[test]
    fn pieces_keep_whitespace() {
        assert_eq!(pieces("hi"), vec!["hi"]);
        assert_eq!(pieces("hello  big world"), vec!["hello", "  big", " world"]);
        assert_eq!(pieces(" lead"), vec![" lead"]);
        assert_eq!(pieces("trail "), vec!["trail", " "]);
        assert!(pieces("").is_empty());
        for s in ["a b  c", " x\ty\n", "héllo wörld "] {
            assert_eq!(pieces(s).concat(), s);
        }
    }

    #[tokio::test]
    async fn echo_stream() {
        let mock = MockProvider::new(1, 4);
        let ev = collect(&mock, "echo: hi", 64).await;
        assert_eq!(ev, vec![TokenEvent::delta("hi"), TokenEvent::finish(FinishReason::Stop)]);
    }

    #[tokio::test]
    async fn max_length_truncates() {
        let mock = MockProvider::new(1, 4);
        let ev = collect(&mock, "echo: one two three", 1).await;
        assert_eq!(ev, vec![TokenEvent::delta("one"), TokenEvent::finish(FinishReason::Length)]);
    }

    #[tokio::test]
    async fn stream_reassembly_matches_buffered() {
        let mock = MockProvider::new(1, 4);
        let msgs = [ChatMessage::user("tell me   something\nnew")];
        let params = GenerationParams::default();
        let streamed: String = mock
            .chat_complete(&msgs, &params)
            .await
            .unwrap()
            .map(|e| e.delta)
            .collect::<Vec<_>>()
            .await
            .concat();
        let buffered = mock.complete_text(&msgs, &params).await.unwrap();
        assert_eq!(streamed, buffered.text);
        assert_eq!(buffered.text, mock.peek_reply(&msgs));
    }

    #[tokio::test]
    async fn canned_replies_advance_then_repeat() {
        let mock = MockProvider::new(1, 4).with_canned("love", &["first", "second"]);
        let params = GenerationParams::default();
        let msgs = [ChatMessage::user("I love it")];
        let mut got = Vec::new();
        for _ in 0..3 {
            got.push(mock.complete_text(&msgs, &params).await.unwrap().text);
        }
        assert_eq!(got, vec!["first", "second", "second"]);
    }

    #[tokio::test]
    async fn unreachable_respects_retry_budget() {
        let ep = ProviderEndpoint::new("mock://local", "m").unwrap().with_max_retries(2);
        let mock = MockProvider::from_endpoint(ep).unwrap();
        mock.set_unreachable_attempts(100);
        let err = mock
            .chat_complete(&[ChatMessage::user("x")], &GenerationParams::default())
            .await
            .err()
            .unwrap();
        assert!(matches!(err, ProviderError::Unreachable { attempts: 3, .. }));
        assert_eq!(mock.connect_attempts(), 3);
    }

    #[tokio::test]
    async fn transient_unreachable_recovers() {
        let ep = ProviderEndpoint::new("mock://local", "m").unwrap().with_max_retries(2);
        let mock = MockProvider::from_endpoint(ep).unwrap();
        mock.set_unreachable_attempts(2);
        let c = mock
            .complete_text(&[ChatMessage::user("echo: ok")], &GenerationParams::default())
            .await
            .unwrap();
        assert_eq!(c.text, "ok");
        assert_eq!(mock.connect_attempts(), 3);
    }

    #[tokio::test]
    async fn mid_stream_failure_is_terminal_event() {
        let mock = MockProvider::new(1, 4);
        mock.set_fail_after(Some(1));
        let ev = collect(&mock, "echo: a b c", 64).await;
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[0].delta, "a");
        assert!(ev[1].done);
        assert_eq!(ev[1].finish_reason, Some(FinishReason::Error));
    }

    #[test]
    fn endpoint_query_parsing() {
        let ep = ProviderEndpoint::new("mock://local?seed=9&dim=5", "m").unwrap();
        let mock = MockProvider::from_endpoint(ep).unwrap();
        assert_eq!((mock.seed(), mock.dim()), (9, 5));
        let bad = ProviderEndpoint::new("mock://local?dim=0", "m").unwrap();
        assert!(MockProvider::from_endpoint(bad).is_err());
        let bad = ProviderEndpoint::new("mock://local?colour=red", "m").unwrap();
        assert!(MockProvider::from_endpoint(bad).is_err());
    }

    #[test]
    fn canned_file_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("canned.json");
        std::fs::write(&path, r#"{"love": ["[\"positive\"]"], "hate": ["[\"negative\"]"]}"#).unwrap();
        let url = format!("mock://local?canned={}", path.display());
        let mock = MockProvider::from_endpoint(ProviderEndpoint::new(url, "m").unwrap()).unwrap();
        assert_eq!(mock.peek_reply(&[ChatMessage::user("I hate it")]), "[\"negative\"]");
    }

    #[test]
    fn embedding_geometry() {
        let a = hash_embedding(7, 32, "apple pie");
        let b = hash_embedding(7, 32, "apple tart");
        let c = cosine(&a, &b).unwrap();
        assert!(c >= 0.8, "shared keyword cosine {c}");
        assert_eq!(cosine(&a, &a).unwrap(), 1.0);
        assert_eq!(a, hash_embedding(7, 32, "apple pie"));
        assert_ne!(a, hash_embedding(8, 32, "apple pie"));
        let norm: f64 = a.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shared_keyword_cosine_bound_by_direct_computation() {
        // cos = (0.81 + 0.09(k·r2 + r1·k) + 0.01 r1·r2) / (|0.9k+0.1r1| |0.9k+0.1r2|),
        // recomputed here from the component unit vectors.
        for (x, y) in [("apple pie", "apple tart"), ("good movie", "good film"), ("x 1", "x 2")] {
            let kw = x.split_whitespace().next().unwrap();
            let k = unit_hash_vector(7, "keyword", kw, 32);
            let r1 = unit_hash_vector(7, "text", x, 32);
            let r2 = unit_hash_vector(7, "text", y, 32);
            let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let num = 0.81 + 0.09 * (d(&k, &r2) + d(&r1, &k)) + 0.01 * d(&r1, &r2);
            let n1 = (0.81 + 0.18 * d(&k, &r1) + 0.01f64).sqrt();
            let n2 = (0.81 + 0.18 * d(&k, &r2) + 0.01f64).sqrt();
            let expected = num / (n1 * n2);
            let got = cosine(&hash_embedding(7, 32, x), &hash_embedding(7, 32, y)).unwrap();
            assert!((expected - got).abs() < 1e-6);
            assert!(expected >= 0.8);
        }
    }

    #[tokio::test]
    async fn embed_preconditions() {
        let mock = MockProvider::new(7, 8);
        assert!(mock.embed(&[]).await.is_err());
        let v = mock.embed(&["a".into(), "b".into(), "a".into()]).await.unwrap();
        assert_eq!(v[0], v[2]);
        assert_ne!(v[0], v[1]);
        assert_eq!(v[0].len(), 8);
    }

    #[tokio::test]
    async fn tracks_concurrency() {
        let mock = Arc::new(MockProvider::new(1, 4));
        mock.set_delta_delay(Some(Duration::from_millis(20)));
        let mut handles = Vec::new();
        for _ in 0..3 {
            let m = mock.clone();
            handles.push(tokio::spawn(async move {
                m.complete_text(&[ChatMessage::user("echo: a b")], &GenerationParams::default())
                    .await
                    .unwrap()
            }));
        }
        for h in handles {
            h.await.unwrap();
        }
        assert_eq!(mock.max_concurrent(), 3);
    }
}
