//! Embedding vectors and the similarity arithmetic built on them.
//!
//! Vectors are stored as `f32`; every reduction (dot products, norms) accumulates
//! in `f64` so that cosine values near ±1 stay stable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{Provider, ProviderError};

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("vector contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("empty vector")]
    Empty,
    #[error("no texts to embed")]
    NoInput,
    #[error("batch_size must be positive")]
    ZeroBatch,
    #[error("provider failed on chunk {chunk}: {source}")]
    Chunk {
        chunk: usize,
        #[source]
        source: ProviderError,
    },
}

/// A dense, finite embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn from_f64(values: &[f64]) -> Result<Self, EmbeddingError> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = EmbeddingError;
    fn try_from(v: Vec<f32>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// Dot product in index order with f64 accumulation.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to [-1, 1].
///
/// Symmetric bit-for-bit: the dot product sums commutative products in index order
/// and the norm product is a single commutative multiplication.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Unit-length copy of `v`.
pub fn normalize(v: &[f32]) -> Result<Vec<f32>, EmbeddingError> {
    let n = norm(v);
    if n == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

/// Unit-length copy computed and returned in f64.
pub fn normalize_f64(v: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `out[i][j] = cosine(queries[i], corpus[j])`.
///
/// Both sides are normalized once up front and the entries are then plain dot
/// products; agreement with element-wise [`cosine`] is within 1e-6.
pub fn similarity_matrix<V: AsRef<[f32]>>(
    queries: &[V],
    corpus: &[V],
) -> Result<Vec<Vec<f64>>, EmbeddingError> {
    let dim = queries
        .first()
        .or(corpus.first())
        .map(|v| v.as_ref().len())
        .unwrap_or(0);
    let unit = |vs: &[V]| -> Result<Vec<Vec<f64>>, EmbeddingError> {
        vs.iter()
            .map(|v| {
                let v = v.as_ref();
                if v.len() != dim {
                    return Err(EmbeddingError::DimensionMismatch { expected: dim, got: v.len() });
                }
                let wide: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
                normalize_f64(&wide)
            })
            .collect()
    };
    let q = unit(queries)?;
    let c = unit(corpus)?;
    Ok(q.iter()
        .map(|qi| {
            c.iter()
                .map(|cj| {
                    let d: f64 = qi.iter().zip(cj).map(|(x, y)| x * y).sum();
                    d.clamp(-1.0, 1.0)
                })
                .collect()
        })
        .collect())
}

/// Embed `texts` in chunks of at most `batch_size`, preserving order.
///
/// Chunks are requested sequentially. A provider error is annotated with the
/// index of the chunk that failed.
pub async fn embed_batch(
    provider: &dyn Provider,
    texts: &[String],
    batch_size: usize,
) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    if texts.is_empty() {
        return Err(EmbeddingError::NoInput);
    }
    if batch_size == 0 {
        return Err(EmbeddingError::ZeroBatch);
    }
    let mut out = Vec::with_capacity(texts.len());
    let mut dim = None;
    for (chunk, slice) in texts.chunks(batch_size).enumerate() {
        let vectors = provider
            .embed(slice)
            .await
            .map_err(|source| EmbeddingError::Chunk { chunk, source })?;
        for v in vectors {
            let expected = *dim.get_or_insert(v.len());
            if v.len() != expected {
                return Err(EmbeddingError::DimensionMismatch { expected, got: v.len() });
            }
            out.push(EmbeddingVector::new(v)?);
        }
    }
    Ok(out)
}
