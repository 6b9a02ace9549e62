//! lmforge: a provider-agnostic toolkit for language-model operations.
//!
//! Every component is reachable through [`factory::TaskFactory`]:
//!
//! - `generator`: streaming chat gateway with server-side memory ([`chat_service`], [`memory`])
//! - `labeller`: LLM-driven weak supervision ([`labeller`])
//! - `embedder`: embeddings and cosine utilities ([`embeddings`])
//! - `searcher`: flat and HNSW vector search with metadata filters ([`vector_search`])
//! - `reranker`: pointwise relevance reranking ([`reranker`])
//! - `tokenizer-trainer`: byte-level BPE and the MLM masking collator ([`tokenizer`])
//! - `classifier` / `mimicker`: softmax heads and embedding distillation ([`trainers`])
//!
//! External chat/embedding endpoints are spoken to through [`providers`], which also
//! ships a deterministic in-process mock used across the test suite.

pub mod chat_service;
pub mod config;
pub mod embeddings;
pub mod factory;
pub mod labeller;
pub mod memory;
pub mod providers;
pub mod reranker;
pub mod tokenizer;
pub mod trainers;
pub mod util;
pub mod vector_search;


