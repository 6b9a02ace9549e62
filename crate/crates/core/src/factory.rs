//! The single entry point: turn a task kind and a flat config record into a
//! ready-to-use component. All validation happens here, so a handle that was
//! created successfully will not fail later on account of its configuration.
//!
//! Config records are flat JSON objects; nested provider blocks may be written
//! as `{"provider": {"url": ..., "model": ...}}` and are flattened first.
//! Provider keys shared by every networked task are `provider_url`, `model`,
//! `dialect`, `api_key`, `timeout_secs` and `max_retries`.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Map, Value};

use crate::chat_service::{AppState, AuthChain, API_TOKEN_ENV};
use crate::config::{
    flatten, split_training_config, ConfigError, FlatConfig, TokenizerConfig, TrainingConfig, GENERAL_KEYS,
    TASK_SPECIFIC_KEYS,
};
use crate::embeddings::{embed_batch, EmbeddingError, EmbeddingVector};
use crate::labeller::{LabelSchema, Labeller};
use crate::memory::MemoryStore;
use crate::providers::{connect, Provider, ProviderEndpoint};
use crate::reranker::{
    rerank, BackendKind, EmbeddingScorer, HttpScorer, LlmJudge, RelevanceScorer, RerankError, RerankRequest,
    RerankResult,
};
use crate::tokenizer::TokenizerTrainer;
use crate::trainers::{
    train_classifier, train_mimicker, ClassifierHead, ClassifierReport, HashFeaturizer, MimicReport, StudentKind,
    StudentModel, StudentSpec, TrainError,
};
use crate::vector_search::{
    Backend, HnswParams, IndexedDocument, Metadata, SearchError, SearchHit, SharedIndex, VectorIndex, VectorStore,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Generator,
    Labeller,
    Embedder,
    Searcher,
    Reranker,
    Mimicker,
    Classifier,
    TokenizerTrainer,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::Generator,
        TaskKind::Labeller,
        TaskKind::Embedder,
        TaskKind::Searcher,
        TaskKind::Reranker,
        TaskKind::Mimicker,
        TaskKind::Classifier,
        TaskKind::TokenizerTrainer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Generator => "generator",
            TaskKind::Labeller => "labeller",
            TaskKind::Embedder => "embedder",
            TaskKind::Searcher => "searcher",
            TaskKind::Reranker => "reranker",
            TaskKind::Mimicker => "mimicker",
            TaskKind::Classifier => "classifier",
            TaskKind::TokenizerTrainer => "tokenizer-trainer",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ConfigError::UnknownTaskKind(s.to_string()))
    }
}

/// Chat gateway state, ready to be served.
#[derive(Clone)]
pub struct Generator {
    pub state: AppState,
    memory_journal: Option<PathBuf>,
    auth_token_env: String,
}

impl Generator {
    pub fn router(&self) -> axum::Router {
        crate::chat_service::router(self.state.clone())
    }

    pub async fn serve(&self, host: &str, port: u16) -> Result<(), crate::chat_service::ServiceError> {
        crate::chat_service::serve(host, port, self.state.clone()).await
    }
}

/// A provider plus the chunk size used for batched embedding.
#[derive(Clone)]
pub struct Embedder {
    pub provider: Arc<dyn Provider>,
    pub batch_size: usize,
}

impl Embedder {
    pub async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        embed_batch(self.provider.as_ref(), texts, self.batch_size).await
    }
}

/// A vector index, optionally paired with an embedder so it can be fed text.
#[derive(Clone)]
pub struct Searcher {
    pub index: SharedIndex,
    pub embedder: Option<Embedder>,
}

#[derive(Debug, thiserror::Error)]
pub enum SearcherError {
    #[error("this searcher has no embedding provider configured")]
    NoEmbedder,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Search(#[from] SearchError),
}

impl Searcher {
    fn embedder(&self) -> Result<&Embedder, SearcherError> {
        self.embedder.as_ref().ok_or(SearcherError::NoEmbedder)
    }

    /// Embed and insert `(doc_id, text, metadata)` triples, in order.
    pub async fn add_texts(&self, docs: Vec<(u64, String, Metadata)>) -> Result<(), SearcherError> {
        if docs.is_empty() {
            return Ok(());
        }
        let texts: Vec<String> = docs.iter().map(|(_, t, _)| t.clone()).collect();
        let vectors = self.embedder()?.embed(&texts).await?;
        for ((doc_id, text, metadata), vector) in docs.into_iter().zip(vectors) {
            let mut doc = IndexedDocument::new(doc_id, text, vector);
            doc.metadata = metadata;
            self.index.add(doc)?;
        }
        Ok(())
    }

    pub async fn query(
        &self,
        text: &str,
        k: usize,
        filter: Option<crate::vector_search::Filter<'_>>,
    ) -> Result<Vec<SearchHit>, SearcherError> {
        let v = self.embedder()?.embed(&[text.to_string()]).await?;
        Ok(self.index.search(v[0].values(), k, filter)?)
    }
}

#[derive(Clone)]
pub struct Reranker {
    pub scorer: Arc<dyn RelevanceScorer>,
}

impl Reranker {
    pub async fn rerank(&self, request: &RerankRequest) -> Result<RerankResult, RerankError> {
        rerank(request, self.scorer.as_ref()).await
    }
}

#[derive(Clone)]
pub struct LabellerTask {
    pub labeller: Arc<Labeller>,
    pub concurrency: usize,
}

/// Classifier training pipeline bound to an embedding provider.
#[derive(Clone)]
pub struct ClassifierTask {
    pub provider: Arc<dyn Provider>,
    pub training: TrainingConfig,
}

impl ClassifierTask {
    pub async fn train(&self, texts: &[String], labels: &[String]) -> Result<(ClassifierHead, ClassifierReport), TrainError> {
        train_classifier(texts, labels, self.provider.as_ref(), &self.training).await
    }
}

/// Distillation pipeline bound to a teacher.
#[derive(Clone)]
pub struct Mimicker {
    pub teacher: Arc<dyn Provider>,
    pub spec: StudentSpec,
    pub featurizer: HashFeaturizer,
    pub training: TrainingConfig,
}

impl Mimicker {
    pub async fn train(&self, texts: &[String]) -> Result<(StudentModel, MimicReport), TrainError> {
        let mut spec = self.spec;
        if spec.out_dim == 0 {
            let probe = texts.first().ok_or(TrainError::EmptyDataset)?;
            spec.out_dim = embed_batch(self.teacher.as_ref(), std::slice::from_ref(probe), 1).await?[0].dim();
        }
        train_mimicker(spec, self.teacher.as_ref(), texts, &self.featurizer, &self.training).await
    }
}

pub enum TaskHandle {
    Generator(Generator),
    Labeller(LabellerTask),
    Embedder(Embedder),
    Searcher(Searcher),
    Reranker(Reranker),
    Mimicker(Mimicker),
    Classifier(ClassifierTask),
    TokenizerTrainer(TokenizerTrainer),
}

fn endpoint_json(p: &dyn Provider) -> Value {
    let ep = p.endpoint();
    json!({
        "provider_url": ep.base_url,
        "model": ep.model,
        "dialect": ep.dialect,
        "timeout_secs": ep.timeout.as_secs_f64(),
        "max_retries": ep.max_retries,
    })
}

fn merge(mut a: Value, b: Value) -> Value {
    if let (Some(a), Value::Object(b)) = (a.as_object_mut(), b) {
        a.extend(b);
    }
    a
}

impl TaskHandle {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskHandle::Generator(_) => TaskKind::Generator,
            TaskHandle::Labeller(_) => TaskKind::Labeller,
            TaskHandle::Embedder(_) => TaskKind::Embedder,
            TaskHandle::Searcher(_) => TaskKind::Searcher,
            TaskHandle::Reranker(_) => TaskKind::Reranker,
            TaskHandle::Mimicker(_) => TaskKind::Mimicker,
            TaskHandle::Classifier(_) => TaskKind::Classifier,
            TaskHandle::TokenizerTrainer(_) => TaskKind::TokenizerTrainer,
        }
    }

    /// The effective configuration, defaults included. Secrets are left out.
    pub fn describe(&self) -> Value {
        let body = match self {
            TaskHandle::Generator(g) => merge(
                endpoint_json(g.state.provider.as_ref()),
                json!({
                    "memory_journal": g.memory_journal,
                    "auth_token_env": g.auth_token_env,
                    "auth_hooks": g.state.auth.len(),
                }),
            ),
            TaskHandle::Labeller(l) => merge(
                endpoint_json(l.labeller.provider().as_ref()),
                json!({
                    "labels": l.labeller.schema().labels(),
                    "multi_label": l.labeller.schema().multi_label(),
                    "concurrency": l.concurrency,
                }),
            ),
            TaskHandle::Embedder(e) => merge(endpoint_json(e.provider.as_ref()), json!({"batch_size": e.batch_size})),
            TaskHandle::Searcher(s) => {
                let backend = s.index.backend();
                let mut v = json!({"index_type": backend.name(), "dim": s.index.dim()});
                if let Backend::Hnsw(p) = backend {
                    v = merge(
                        v,
                        json!({
                            "m": p.m,
                            "ef_construction": p.ef_construction,
                            "ef_search": p.ef_search,
                            "seed": p.rng_seed,
                        }),
                    );
                }
                match &s.embedder {
                    Some(e) => merge(v, merge(endpoint_json(e.provider.as_ref()), json!({"batch_size": e.batch_size}))),
                    None => v,
                }
            }
            TaskHandle::Reranker(r) => json!({"backend": r.scorer.kind().as_str()}),
            TaskHandle::Mimicker(m) => merge(
                endpoint_json(m.teacher.as_ref()),
                json!({
                    "student": m.spec.kind,
                    "in_dim": m.spec.in_dim,
                    "out_dim": m.spec.out_dim,
                    "hidden": m.spec.hidden,
                    "featurizer_seed": m.featurizer.seed,
                    "training": m.training.to_flat(),
                }),
            ),
            TaskHandle::Classifier(c) => {
                merge(endpoint_json(c.provider.as_ref()), json!({"training": c.training.to_flat()}))
            }
            TaskHandle::TokenizerTrainer(t) => serde_json::to_value(t.config).expect("config serializes"),
        };
        json!({"kind": self.kind().as_str(), "config": body})
    }
}

/// Compile-time registry of task constructors.
pub struct TaskFactory;

impl TaskFactory {
    pub fn kinds() -> &'static [TaskKind] {
        &TaskKind::ALL
    }

    pub fn create(kind: &str, config: &Value) -> Result<TaskHandle, ConfigError> {
        let kind: TaskKind = kind.parse()?;
        let flat = flatten(config)?;
        Self::create_kind(kind, flat)
    }

    pub fn create_kind(kind: TaskKind, flat: Map<String, Value>) -> Result<TaskHandle, ConfigError> {
        let mut cfg = FlatConfig::new(flat);
        let handle = match kind {
            TaskKind::Generator => {
                let provider = required_provider(&mut cfg)?;
                let journal = cfg.take_str(&["memory_journal"])?.map(PathBuf::from);
                let auth_env = cfg.take_str(&["auth_token_env"])?.unwrap_or_else(|| API_TOKEN_ENV.to_string());
                let memory = match &journal {
                    Some(p) => MemoryStore::with_journal(p)
                        .map_err(|e| ConfigError::invalid("memory_journal", e.to_string()))?,
                    None => MemoryStore::in_memory(),
                };
                let state = AppState::new(provider)
                    .with_memory(Arc::new(memory))
                    .with_auth(AuthChain::from_env(&auth_env));
                TaskHandle::Generator(Generator { state, memory_journal: journal, auth_token_env: auth_env })
            }
            TaskKind::Labeller => {
                let provider = required_provider(&mut cfg)?;
                let mut entries = cfg.take_prefixed("labels");
                if let Some(v) = cfg.take_value(&["labels"]) {
                    let obj = v
                        .as_object()
                        .ok_or_else(|| ConfigError::invalid("labels", "expected an object of name → condition"))?;
                    entries.extend(obj.iter().map(|(k, v)| (k.clone(), v.clone())));
                }
                if entries.is_empty() {
                    return Err(ConfigError::MissingKey("labels".into()));
                }
                let multi = cfg.take_bool(&["multi_label"])?.unwrap_or(false);
                let concurrency = cfg.take_positive(&["concurrency"])?.unwrap_or(4) as usize;
                let pairs = entries
                    .into_iter()
                    .map(|(k, v)| match v {
                        Value::String(c) => Ok((k, c)),
                        _ => Err(ConfigError::invalid("labels", format!("condition for {k:?} must be a string"))),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let schema = LabelSchema::new(pairs, multi).map_err(|e| ConfigError::invalid("labels", e.to_string()))?;
                TaskHandle::Labeller(LabellerTask { labeller: Arc::new(Labeller::new(schema, provider)), concurrency })
            }
            TaskKind::Embedder => TaskHandle::Embedder(embedder(&mut cfg)?.ok_or_else(missing_provider)?),
            TaskKind::Searcher => {
                let kind = cfg.take_str(&["index_type"])?.unwrap_or_else(|| "flat".into());
                let dim = FlatConfig::require("dim", cfg.take_positive(&["dim"])?)? as usize;
                let backend = match kind.as_str() {
                    "flat" => Backend::Flat,
                    "hnsw" => {
                        let mut p = HnswParams::new(cfg.take_u64(&["m"])?.unwrap_or(16) as usize);
                        if let Some(ef) = cfg.take_u64(&["ef_construction"])? {
                            p = p.ef_construction(ef as usize);
                        }
                        if let Some(ef) = cfg.take_u64(&["ef_search"])? {
                            p = p.ef_search(ef as usize);
                        }
                        if let Some(s) = cfg.take_u64(&["seed"])? {
                            p = p.seed(s);
                        }
                        Backend::Hnsw(p)
                    }
                    other => return Err(ConfigError::invalid("index_type", format!("{other:?} is not flat or hnsw"))),
                };
                let index = VectorIndex::new(dim, backend).map_err(|e| match e {
                    SearchError::InvalidParams { field, reason } => {
                        ConfigError::invalid(if field == "M" { "m" } else { field }, reason)
                    }
                    other => ConfigError::invalid("index_type", other.to_string()),
                })?;
                debug_assert!(index.is_empty());
                TaskHandle::Searcher(Searcher { index: SharedIndex::new(index), embedder: embedder(&mut cfg)? })
            }
            TaskKind::Reranker => {
                let backend: BackendKind = cfg
                    .take_str(&["backend"])?
                    .unwrap_or_else(|| "llm-judge".into())
                    .parse()
                    .map_err(|e: String| ConfigError::invalid("backend", e))?;
                let scorer: Arc<dyn RelevanceScorer> = match backend {
                    BackendKind::HttpScorer => {
                        let url = FlatConfig::require("scorer_url", cfg.take_str(&["scorer_url"])?)?;
                        let timeout = cfg.take_f64(&["scorer_timeout_secs"])?.unwrap_or(30.0);
                        if timeout <= 0.0 {
                            return Err(ConfigError::invalid("scorer_timeout_secs", "must be positive"));
                        }
                        let retries = cfg.take_u64(&["scorer_max_retries"])?.unwrap_or(2) as u32;
                        let s = HttpScorer::new(&url, Duration::from_secs_f64(timeout), retries)
                            .map_err(|e| ConfigError::invalid("scorer_url", e.to_string()))?;
                        Arc::new(s)
                    }
                    BackendKind::LlmJudge => {
                        let provider = required_provider(&mut cfg)?;
                        let concurrency = cfg.take_positive(&["concurrency"])?.unwrap_or(4) as usize;
                        Arc::new(
                            LlmJudge::new(provider, concurrency)
                                .map_err(|e| ConfigError::invalid("concurrency", e.to_string()))?,
                        )
                    }
                    BackendKind::EmbeddingFallback => Arc::new(EmbeddingScorer::new(required_provider(&mut cfg)?)),
                };
                TaskHandle::Reranker(Reranker { scorer })
            }
            TaskKind::Mimicker => {
                let training = take_training(&mut cfg)?;
                let teacher = required_provider(&mut cfg)?;
                let kind: StudentKind = cfg
                    .take_str(&["student"])?
                    .unwrap_or_else(|| "linear".into())
                    .parse()
                    .map_err(|e: String| ConfigError::invalid("student", e))?;
                let in_dim = cfg.take_positive(&["in_dim"])?.unwrap_or(64) as usize;
                let hidden = match kind {
                    StudentKind::Linear => 0,
                    StudentKind::Mlp1 => cfg.take_positive(&["hidden"])?.unwrap_or(128) as usize,
                };
                // 0 means "whatever the teacher returns", resolved on first use
                let out_dim = cfg.take_positive(&["out_dim"])?.unwrap_or(0) as usize;
                let featurizer = HashFeaturizer::new(cfg.take_u64(&["featurizer_seed"])?.unwrap_or(0), in_dim);
                let spec = StudentSpec { kind, in_dim, out_dim, hidden };
                TaskHandle::Mimicker(Mimicker { teacher, spec, featurizer, training })
            }
            TaskKind::Classifier => {
                let training = take_training(&mut cfg)?;
                TaskHandle::Classifier(ClassifierTask { provider: required_provider(&mut cfg)?, training })
            }
            TaskKind::TokenizerTrainer => {
                let d = TokenizerConfig::default();
                let config = TokenizerConfig {
                    max_length: cfg.take_u64(&["max_length"])?.map_or(d.max_length, |v| v as usize),
                    vocab_size: cfg.take_u64(&["vocab_size"])?.map_or(d.vocab_size, |v| v as usize),
                    min_frequency: cfg.take_u64(&["min_frequency"])?.unwrap_or(d.min_frequency),
                };
                TaskHandle::TokenizerTrainer(TokenizerTrainer::new(config)?)
            }
        };
        cfg.finish()?;
        Ok(handle)
    }
}

pub fn create_task(kind: &str, config: &Value) -> Result<TaskHandle, ConfigError> {
    TaskFactory::create(kind, config)
}

fn missing_provider() -> ConfigError {
    ConfigError::MissingKey("provider_url".into())
}

fn open(endpoint: ProviderEndpoint) -> Result<Arc<dyn Provider>, ConfigError> {
    connect(endpoint).map_err(|e| ConfigError::invalid("provider_url", e.to_string()))
}

fn required_provider(cfg: &mut FlatConfig) -> Result<Arc<dyn Provider>, ConfigError> {
    open(cfg.take_endpoint()?.ok_or_else(missing_provider)?)
}

fn embedder(cfg: &mut FlatConfig) -> Result<Option<Embedder>, ConfigError> {
    let batch_size = cfg.take_positive(&["batch_size"])?.unwrap_or(32) as usize;
    match cfg.take_endpoint()? {
        Some(ep) => Ok(Some(Embedder { provider: open(ep)?, batch_size })),
        None => Ok(None),
    }
}

/// Pull the training keys out of a task record and split them.
fn take_training(cfg: &mut FlatConfig) -> Result<TrainingConfig, ConfigError> {
    let mut raw = Map::new();
    for key in GENERAL_KEYS.iter().chain(TASK_SPECIFIC_KEYS) {
        if let Some(v) = cfg.take_value(&[key]) {
            raw.insert(key.to_string(), v);
        }
    }
    split_training_config(&raw)
}
