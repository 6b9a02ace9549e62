//! Property checks across module boundaries.

use std::sync::Arc;

use lmforge::config::TokenizerConfig;
use lmforge::embeddings::{cosine, EmbeddingVector};
use lmforge::factory::{TaskFactory, TaskKind};
use lmforge::providers::{MockProvider, Provider};
use lmforge::reranker::{rerank, EmbeddingScorer, RerankRequest};
use lmforge::tokenizer::{
    canonicalize, mask_tokens, train_bpe, MaskingConfig, TokenizerModel, IGNORE_INDEX, NUM_SPECIALS,
};
use lmforge::vector_search::{HnswParams, IndexedDocument, MetadataFilter, VectorIndex, VectorStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn tokenizer() -> &'static TokenizerModel {
    static MODEL: std::sync::OnceLock<TokenizerModel> = std::sync::OnceLock::new();
    MODEL.get_or_init(|| {
        let corpus = [
            "the cat sat on the mat while the other cat slept",
            "a lower lowest low newer newest wider widest",
            "tokenizers merge frequent pairs into longer tokens",
        ];
        let cfg = TokenizerConfig { max_length: 100_000, vocab_size: 400, min_frequency: 1 };
        train_bpe(corpus.iter().cycle().take(30), cfg).unwrap()
    })
}

fn index_of(vectors: &[Vec<f32>], hnsw: Option<HnswParams>) -> VectorIndex {
    let dim = vectors[0].len();
    let mut index = match hnsw {
        Some(p) => VectorIndex::hnsw(dim, p).unwrap(),
        None => VectorIndex::flat(dim).unwrap(),
    };
    for (i, v) in vectors.iter().enumerate() {
        let d = IndexedDocument::new(i as u64, format!("d{i}"), EmbeddingVector::new(v.clone()).unwrap())
            .with_meta("bucket", (i % 3) as i64);
        index.add(d).unwrap();
    }
    index
}

fn vectors(seed: u64, n: usize, dim: usize) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_encode_is_canonical_and_stable(s in "[ -~\t\né日]{0,80}") {
        let m = tokenizer();
        let ids = m.encode(&s);
        let text = m.decode(&ids).unwrap();
        prop_assert_eq!(&text, &canonicalize(&s));
        prop_assert_eq!(m.encode(&text), ids);
    }

    #[test]
    fn mask_labels_mark_exactly_the_selected_positions(
        ids in prop::collection::vec(0u32..300, 0..120),
        p in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let out = mask_tokens(&ids, &MaskingConfig::new(p, 300, seed)).unwrap();
        prop_assert_eq!(out.input_ids.len(), ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if (id as usize) < NUM_SPECIALS {
                prop_assert_eq!(out.labels[i], IGNORE_INDEX);
                prop_assert_eq!(out.input_ids[i], id);
            } else if out.labels[i] == IGNORE_INDEX {
                prop_assert_eq!(out.input_ids[i], id);
            } else {
                prop_assert_eq!(out.labels[i], i64::from(id));
            }
        }
    }

    #[test]
    fn search_hits_are_sorted_bounded_and_filtered(
        seed in any::<u64>(),
        n in 1usize..120,
        k in 1usize..25,
        bucket in 0i64..3,
        hnsw in any::<bool>(),
    ) {
        let vs = vectors(seed, n, 6);
        let index = index_of(&vs, hnsw.then(|| HnswParams::new(4).seed(seed)));
        let query = &vectors(seed ^ 1, 1, 6)[0];
        let filter = MetadataFilter::eq("bucket", bucket.to_string());
        let pred = |m: &_| filter.matches(m);
        for hits in [index.search(query, k, None).unwrap(), index.search(query, k, Some(&pred)).unwrap()] {
            prop_assert!(hits.len() <= k);
            for w in hits.windows(2) {
                prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].doc_id < w[1].doc_id));
            }
        }
        let filtered = index.search(query, k, Some(&pred)).unwrap();
        prop_assert!(filtered.iter().all(|h| h.doc_id as i64 % 3 == bucket));
        if !hnsw {
            let expected = (0..n).filter(|i| *i as i64 % 3 == bucket).count().min(k);
            prop_assert_eq!(filtered.len(), expected);
        }
    }
}

#[test]
fn hnsw_is_deterministic_for_a_seed() {
    let vs = vectors(5, 400, 12);
    let p = HnswParams::new(8).seed(99);
    let (a, b) = (index_of(&vs, Some(p)), index_of(&vs, Some(p)));
    assert_eq!(a.to_bytes_unchanged(), b.to_bytes_unchanged());
    for q in vectors(6, 10, 12) {
        assert_eq!(a.search(&q, 5, None).unwrap(), b.search(&q, 5, None).unwrap());
    }
}

trait Bytes {
    fn to_bytes_unchanged(&self) -> Vec<u8>;
}

impl Bytes for VectorIndex {
    fn to_bytes_unchanged(&self) -> Vec<u8> {
        self.clone().to_bytes()
    }
}

#[test]
fn larger_ef_search_never_lowers_mean_recall() {
    let mut last = 0.0;
    let efs = [1, 4, 16, 64];
    let mut recalls = Vec::new();
    for &ef in &efs {
        let mut total = 0.0;
        let mut queries = 0.0;
        for seed in 0..4 {
            let vs = vectors(seed, 600, 16);
            let flat = index_of(&vs, None);
            let mut hnsw = index_of(&vs, Some(HnswParams::new(6).ef_construction(40).seed(seed)));
            hnsw.set_ef_search(ef).unwrap();
            for q in vectors(seed + 100, 20, 16) {
                let truth: Vec<u64> = flat.search(&q, 10, None).unwrap().iter().map(|h| h.doc_id).collect();
                let got = hnsw.search(&q, 10, None).unwrap();
                total += got.iter().filter(|h| truth.contains(&h.doc_id)).count() as f64 / 10.0;
                queries += 1.0;
            }
        }
        let recall = total / queries;
        recalls.push(recall);
        assert!(recall >= last, "recall fell to {recall} at ef_search={ef}: {recalls:?}");
        last = recall;
    }
}

#[tokio::test]
async fn embedding_fallback_orders_by_cosine() {
    let mock: Arc<dyn Provider> = Arc::new(MockProvider::new(4, 16));
    let docs: Vec<String> = ["apple pie", "banana bread", "apple tart", "cherry jam", "banana split"]
        .map(String::from)
        .to_vec();
    let result = rerank(&RerankRequest::new("apple crumble", docs.clone()), &EmbeddingScorer::new(mock.clone()))
        .await
        .unwrap();
    let mut all = vec!["apple crumble".to_string()];
    all.extend(docs.iter().cloned());
    let vs = mock.embed(&all).await.unwrap();
    let mut oracle: Vec<(usize, f64)> = (0..docs.len()).map(|i| (i, cosine(&vs[0], &vs[i + 1]).unwrap())).collect();
    oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let got: Vec<(usize, f64)> = result.ranking.iter().map(|d| (d.index, d.score)).collect();
    assert_eq!(got.len(), oracle.len());
    for (g, o) in got.iter().zip(&oracle) {
        assert_eq!(g.0, o.0);
        assert!((g.1 - o.1).abs() < 1e-9);
    }
}

#[test]
fn factory_builds_every_kind_identically_twice() {
    let configs = [
        (TaskKind::Generator, json!({"provider": {"url": "mock://local"}})),
        (TaskKind::Labeller, json!({"provider_url": "mock://local", "labels": {"a": "x", "b": "y"}})),
        (TaskKind::Embedder, json!({"provider_url": "mock://local", "batch_size": 4})),
        (TaskKind::Searcher, json!({"index_type": "hnsw", "dim": 8, "m": 4})),
        (TaskKind::Reranker, json!({"backend": "embedding", "provider_url": "mock://local"})),
        (TaskKind::Mimicker, json!({"provider_url": "mock://local", "student": "mlp1", "in_dim": 8, "hidden": 4})),
        (TaskKind::Classifier, json!({"provider_url": "mock://local", "learning_rate": 0.5, "mlm_probability": 0.1})),
        (TaskKind::TokenizerTrainer, json!({"vocab_size": 500})),
    ];
    assert_eq!(configs.len(), TaskFactory::kinds().len());
    for (kind, cfg) in configs {
        let a = TaskFactory::create(kind.as_str(), &cfg).unwrap();
        let b = TaskFactory::create(kind.as_str(), &cfg).unwrap();
        assert_eq!(a.kind(), kind);
        assert_eq!(a.describe(), b.describe(), "{kind}");
        let mut bad = cfg.clone();
        bad["no_such_key"] = json!(1);
        let err = TaskFactory::create(kind.as_str(), &bad).err().expect("unknown key rejected");
        assert_eq!(err.field(), Some("no_such_key"), "{kind}");
    }
    assert!(TaskFactory::create("summarizer", &json!({})).is_err());
}
