//! Pointwise reranking: score every document against the query, then sort.
//!
//! Three scorers ship: an external HTTP scoring service (`POST {base}/score`), an
//! LLM judge that rates each document 0–100, and a cosine fallback over provider
//! embeddings. Ranking is by score descending; equal scores keep input order.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::{StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{cosine, EmbeddingError};
use crate::providers::{with_retry, ChatMessage, GenerationParams, Provider, ProviderError, RetryPolicy};

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("invalid rerank request: {0}")]
    InvalidRequest(String),
    #[error("scorer returned {got} scores for {expected} documents")]
    ScoreCountMismatch { expected: usize, got: usize },
    #[error("could not parse a relevance score for document {0}")]
    UnparsableScore(usize),
    #[error("score for document {0} is not finite")]
    NonFiniteScore(usize),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    HttpScorer,
    LlmJudge,
    EmbeddingFallback,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::HttpScorer => "http-scorer",
            BackendKind::LlmJudge => "llm-judge",
            BackendKind::EmbeddingFallback => "embedding-fallback",
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "http-scorer" | "http" => Ok(BackendKind::HttpScorer),
            "llm-judge" | "judge" => Ok(BackendKind::LlmJudge),
            "embedding-fallback" | "embedding" => Ok(BackendKind::EmbeddingFallback),
            other => Err(format!("unknown rerank backend {other:?} (http-scorer, llm-judge, embedding)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRequest {
    pub query: String,
    pub documents: Vec<String>,
    #[serde(default)]
    pub top_n: Option<usize>,
}

impl RerankRequest {
    pub fn new(query: impl Into<String>, documents: Vec<String>) -> Self {
        Self { query: query.into(), documents, top_n: None }
    }

    pub fn top_n(mut self, n: usize) -> Self {
        self.top_n = Some(n);
        self
    }

    pub fn validate(&self) -> Result<(), RerankError> {
        if self.documents.is_empty() {
            return Err(RerankError::InvalidRequest("documents must not be empty".into()));
        }
        match self.top_n {
            Some(0) => Err(RerankError::InvalidRequest("top_n must be positive".into())),
            Some(n) if n > self.documents.len() => Err(RerankError::InvalidRequest(format!(
                "top_n {n} exceeds the {} documents",
                self.documents.len()
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDocument {
    pub index: usize,
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResult {
    pub ranking: Vec<RankedDocument>,
    pub backend: BackendKind,
}

/// Produces one relevance score per document.
#[async_trait]
pub trait RelevanceScorer: Send + Sync {
    fn kind(&self) -> BackendKind;
    async fn score(&self, query: &str, documents: &[String]) -> Result<Vec<f64>, RerankError>;
}

/// Indices sorted by score descending, ties by ascending index, cut to `top_n`.
pub fn rank_by_scores(scores: &[f64], top_n: Option<usize>) -> Vec<(usize, f64)> {
    let mut order: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    // stable sort keeps input order among equal scores
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    order.truncate(top_n.unwrap_or(scores.len()));
    order
}

pub async fn rerank(request: &RerankRequest, scorer: &dyn RelevanceScorer) -> Result<RerankResult, RerankError> {
    request.validate()?;
    let scores = scorer.score(&request.query, &request.documents).await?;
    if scores.len() != request.documents.len() {
        return Err(RerankError::ScoreCountMismatch { expected: request.documents.len(), got: scores.len() });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(RerankError::NonFiniteScore(i));
    }
    let ranking = rank_by_scores(&scores, request.top_n)
        .into_iter()
        .map(|(index, score)| RankedDocument { index, score, text: request.documents[index].clone() })
        .collect();
    Ok(RerankResult { ranking, backend: scorer.kind() })
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    query: &'a str,
    documents: &'a [String],
}

#[derive(Deserialize)]
struct ScoreReply {
    scores: Vec<f64>,
}

/// Client for an external cross-encoder service.
pub struct HttpScorer {
    url: String,
    client: reqwest::Client,
    retry: RetryPolicy,
}

impl HttpScorer {
    pub fn new(base_url: &str, timeout: Duration, max_retries: u32) -> Result<Self, RerankError> {
        let parsed = reqwest::Url::parse(base_url)
            .map_err(|e| ProviderError::InvalidEndpoint(format!("{base_url}: {e}")))?;
        if !matches!(parsed.scheme(), "http" | "https") {
            return Err(ProviderError::InvalidEndpoint(format!("{base_url}: scheme must be http or https")).into());
        }
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::InvalidEndpoint(e.to_string()))?;
        Ok(Self {
            url: format!("{}/score", base_url.trim_end_matches('/')),
            client,
            retry: RetryPolicy::new(max_retries),
        })
    }
}

#[async_trait]
impl RelevanceScorer for HttpScorer {
    fn kind(&self) -> BackendKind {
        BackendKind::HttpScorer
    }

    async fn score(&self, query: &str, documents: &[String]) -> Result<Vec<f64>, RerankError> {
        let body = ScoreRequest { query, documents };
        let resp = with_retry(&self.retry, |_| async {
            self.client.post(&self.url).json(&body).send().await.map_err(|e| {
                if e.is_timeout() {
                    ProviderError::Timeout
                } else if e.is_connect() {
                    ProviderError::Unreachable { attempts: 1, message: e.to_string() }
                } else {
                    ProviderError::MalformedResponse(e.to_string())
                }
            })
        })
        .await?;
        let status = resp.status();
        if !status.is_success() {
            let body: String = resp.text().await.unwrap_or_default().chars().take(512).collect();
            return Err(ProviderError::Http { status: status.as_u16(), body }.into());
        }
        let reply: ScoreReply = resp
            .json()
            .await
            .map_err(|e| ProviderError::MalformedResponse(format!("score reply: {e}")))?;
        Ok(reply.scores)
    }
}

pub const JUDGE_RUBRIC_VERSION: &str = "judge-v1";

pub const JUDGE_SYSTEM_PROMPT: &str = "You are a relevance judge. Rate how well the document answers the query \
on an integer scale from 0 (irrelevant) to 100 (answers it completely). \
Judge relevance to the query, not surface similarity: a document that merely repeats the query is not an answer. \
Reply with the integer only.";

pub const JUDGE_CORRECTION: &str = "Reply with a single integer between 0 and 100 and nothing else.";

pub fn judge_messages(query: &str, document: &str) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(JUDGE_SYSTEM_PROMPT),
        ChatMessage::user(format!("Query: {query}\n\nDocument: {document}")),
    ]
}

/// Accepts an integer 0–100, optionally followed by a period or `/100`.
pub fn parse_judge_score(reply: &str) -> Option<u8> {
    let t = reply.trim();
    let t = t.strip_suffix("/100").unwrap_or(t);
    let t = t.strip_suffix('.').unwrap_or(t).trim();
    t.parse::<u8>().ok().filter(|&n| n <= 100)
}

/// Pointwise LLM judge, one provider call per document.
pub struct LlmJudge {
    provider: Arc<dyn Provider>,
    concurrency: usize,
}

impl LlmJudge {
    pub fn new(provider: Arc<dyn Provider>, concurrency: usize) -> Result<Self, RerankError> {
        if concurrency == 0 {
            return Err(RerankError::InvalidRequest("concurrency must be positive".into()));
        }
        Ok(Self { provider, concurrency })
    }

    async fn judge(&self, index: usize, query: &str, document: &str) -> Result<f64, RerankError> {
        let params = GenerationParams::deterministic(8);
        let mut messages = judge_messages(query, document);
        let first = self.provider.complete_text(&messages, &params).await?;
        if let Some(n) = parse_judge_score(&first.text) {
            return Ok(f64::from(n) / 100.0);
        }
        messages.push(ChatMessage::assistant(first.text));
        messages.push(ChatMessage::user(JUDGE_CORRECTION));
        let second = self.provider.complete_text(&messages, &params).await?;
        parse_judge_score(&second.text)
            .map(|n| f64::from(n) / 100.0)
            .ok_or(RerankError::UnparsableScore(index))
    }
}

#[async_trait]
impl RelevanceScorer for LlmJudge {
    fn kind(&self) -> BackendKind {
        BackendKind::LlmJudge
    }

    async fn score(&self, query: &str, documents: &[String]) -> Result<Vec<f64>, RerankError> {
        let calls: Vec<_> = documents.iter().enumerate().map(|(i, d)| self.judge(i, query, d)).collect();
        futures::stream::iter(calls)
            .buffered(self.concurrency)
            .try_collect()
            .await
    }
}

/// Cosine between the query embedding and each document embedding.
pub struct EmbeddingScorer {
    provider: Arc<dyn Provider>,
}

impl EmbeddingScorer {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Self { provider }
    }
}

#[async_trait]
impl RelevanceScorer for EmbeddingScorer {
    fn kind(&self) -> BackendKind {
        BackendKind::EmbeddingFallback
    }

    async fn score(&self, query: &str, documents: &[String]) -> Result<Vec<f64>, RerankError> {
        let mut texts = Vec::with_capacity(documents.len() + 1);
        texts.push(query.to_string());
        texts.extend_from_slice(documents);
        let vectors = self.provider.embed(&texts).await?;
        let (q, docs) = vectors
            .split_first()
            .ok_or_else(|| ProviderError::MalformedResponse("no embeddings returned".into()))?;
        docs.iter().map(|d| Ok(cosine(q, d)?)).collect()
    }
}

/// Scores from a plain function; handy for fixed score tables.
pub struct FnScorer<F> {
    kind: BackendKind,
    f: F,
}

impl<F> FnScorer<F>
where
    F: Fn(&str, &[String]) -> Vec<f64> + Send + Sync,
{
    pub fn new(kind: BackendKind, f: F) -> Self {
        Self { kind, f }
    }
}

#[async_trait]
impl<F> RelevanceScorer for FnScorer<F>
where
    F: Fn(&str, &[String]) -> Vec<f64> + Send + Sync,
{
    fn kind(&self) -> BackendKind {
        self.kind
    }

    async fn score(&self, query: &str, documents: &[String]) -> Result<Vec<f64>, RerankError> {
        Ok((self.f)(query, documents))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::MockProvider;
    use proptest::prelude::*;

    fn docs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[tokio::test]
    async fn stable_tie_break_keeps_input_order() {
        let s = FnScorer::new(BackendKind::HttpScorer, |_, d: &[String]| vec![0.5; d.len()]);
        let r = rerank(&RerankRequest::new("q", docs(&["a", "b", "c"])), &s).await.unwrap();
        assert_eq!(r.ranking.iter().map(|d| d.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[tokio::test]
    async fn single_document_for_every_backend() {
        let mock: Arc<dyn Provider> = Arc::new(MockProvider::new(1, 8).with_canned("Document:", &["73"]));
        let judge = LlmJudge::new(mock.clone(), 2).unwrap();
        let emb = EmbeddingScorer::new(mock);
        let fixed = FnScorer::new(BackendKind::HttpScorer, |_, _: &[String]| vec![0.1]);
        let req = RerankRequest::new("q", docs(&["only"]));
        for s in [&judge as &dyn RelevanceScorer, &emb, &fixed] {
            let r = rerank(&req, s).await.unwrap();
            assert_eq!(r.ranking.len(), 1);
            assert_eq!(r.ranking[0].index, 0);
            assert_eq!(r.backend, s.kind());
        }
    }

    #[tokio::test]
    async fn count_mismatch_and_bad_requests() {
        let s = FnScorer::new(BackendKind::HttpScorer, |_, _: &[String]| vec![1.0]);
        let err = rerank(&RerankRequest::new("q", docs(&["a", "b"])), &s).await.unwrap_err();
        assert!(matches!(err, RerankError::ScoreCountMismatch { expected: 2, got: 1 }));
        assert!(rerank(&RerankRequest::new("q", vec![]), &s).await.is_err());
        assert!(rerank(&RerankRequest::new("q", docs(&["a"])).top_n(2), &s).await.is_err());
        let nan = FnScorer::new(BackendKind::HttpScorer, |_, _: &[String]| vec![f64::NAN]);
        assert!(matches!(
            rerank(&RerankRequest::new("q", docs(&["a"])), &nan).await,
            Err(RerankError::NonFiniteScore(0))
        ));
    }

    #[tokio::test]
    async fn judge_retries_once_then_fails() {
        let mock = Arc::new(
            MockProvider::new(1, 8)
                .with_canned("Document: good", &["very relevant", "88"])
                .with_canned("Document: bad", &["hmm", "still no"]),
        );
        let judge = LlmJudge::new(mock.clone(), 1).unwrap();
        let scores = judge.score("q", &docs(&["good"])).await.unwrap();
        assert_eq!(scores, vec![0.88]);
        let recorded = mock.chat_requests();
        assert_eq!(recorded.len(), 2);
        assert_eq!(recorded[1].messages.last().unwrap().content, JUDGE_CORRECTION);
        assert_eq!(recorded[0].params.temperature, 0.0);
        let err = judge.score("q", &docs(&["good", "bad"])).await.unwrap_err();
        assert!(matches!(err, RerankError::UnparsableScore(1)));
    }

    #[tokio::test]
    async fn judge_concurrency_is_bounded() {
        let mock = Arc::new(MockProvider::new(1, 8).with_canned("Document:", &["50"]));
        mock.set_delta_delay(Some(Duration::from_millis(5)));
        let judge = LlmJudge::new(mock.clone(), 3).unwrap();
        let d: Vec<String> = (0..12).map(|i| format!("doc {i}")).collect();
        judge.score("q", &d).await.unwrap();
        assert!(mock.max_concurrent() <= 3);
        assert!(mock.max_concurrent() >= 2);
    }

    #[test]
    fn judge_score_parsing() {
        assert_eq!(parse_judge_score(" 42 "), Some(42));
        assert_eq!(parse_judge_score("100."), Some(100));
        assert_eq!(parse_judge_score("7/100"), Some(7));
        assert_eq!(parse_judge_score("101"), None);
        assert_eq!(parse_judge_score("-3"), None);
        assert_eq!(parse_judge_score("about 40"), None);
    }

    #[tokio::test]
    async fn embedding_fallback_orders_by_cosine() {
        let mock = Arc::new(MockProvider::new(7, 16));
        let s = EmbeddingScorer::new(mock.clone());
        let d = docs(&["banana bread", "apple tart", "cherry cake", "apple pie"]);
        let r = rerank(&RerankRequest::new("apple crumble", d.clone()), &s).await.unwrap();
        let q = mock.embed_one("apple crumble");
        let mut want: Vec<(usize, f64)> =
            d.iter().enumerate().map(|(i, t)| (i, cosine(&q, &mock.embed_one(t)).unwrap())).collect();
        want.sort_by(|a, b| b.1.total_cmp(&a.1));
        assert_eq!(r.ranking.iter().map(|x| x.index).collect::<Vec<_>>(), want.iter().map(|w| w.0).collect::<Vec<_>>());
        assert!(r.ranking[0].text.starts_with("apple") && r.ranking[1].text.starts_with("apple"));
    }

    #[tokio::test]
    async fn http_scorer_unreachable() {
        let s = HttpScorer::new("http://127.0.0.1:1", Duration::from_secs(1), 0).unwrap();
        let err = s.score("q", &docs(&["a"])).await.unwrap_err();
        assert!(matches!(err, RerankError::Provider(ProviderError::Unreachable { attempts: 1, .. })));
        assert!(HttpScorer::new("ftp://x", Duration::from_secs(1), 0).is_err());
    }

    proptest! {
        #[test]
        fn ranking_is_a_sorted_permutation(scores in prop::collection::vec(-5i32..5, 1..40), cut in 0usize..50) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let top_n = (cut > 0).then(|| cut.min(scores.len()));
            let ranked = rank_by_scores(&scores, top_n);
            let mut seen: Vec<usize> = ranked.iter().map(|r| r.0).collect();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), ranked.len());
            prop_assert_eq!(ranked.len(), top_n.unwrap_or(scores.len()));
            for w in ranked.windows(2) {
                prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
            }
        }
    }
}
