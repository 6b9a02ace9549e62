//! Desk-scale training: a softmax classifier over frozen provider embeddings and
//! an embedding-space distiller that fits a small student to a teacher.
//!
//! Both share the optimizer in [`optim`] and the model file in [`persist`].
//! Parameters live in one flat `f64` buffer per model and are rounded to `f32`
//! when training finishes, which is the precision the model file stores; a saved
//! and reloaded model therefore predicts bit-for-bit like the one in memory.

mod classifier;
mod dataset;
mod gradcheck;
mod mimic;
mod optim;
mod persist;

use thiserror::Error;

use crate::config::ConfigError;
use crate::embeddings::EmbeddingError;
use crate::providers::ProviderError;

pub use classifier::{
    accuracy, classify, cross_entropy_loss_grad, fit_classifier, macro_f1, softmax, train_classifier, Classification,
    ClassifierHead, ClassifierReport, Prediction, ProviderFingerprint,
};
pub use dataset::{load_dataset, random_split, read_dataset, stratified_split, Dataset, LabelEncoder};
pub use gradcheck::{max_relative_error, numeric_gradient};
pub use mimic::{
    composite_loss_grad, fit_student, mse, train_mimicker, Featurizer, HashFeaturizer, MimicReport, StudentKind,
    StudentModel, StudentSpec,
};
pub use optim::{OptimizerConfig, OptimizerState};
pub use persist::{load_model, save_model, TrainedModel, MODEL_FORMAT_VERSION, MODEL_MAGIC};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("column {0:?} not found in the CSV header")]
    MissingColumn(String),
    #[error("dataset has no usable rows")]
    EmptyDataset,
    #[error("malformed CSV at line {line}: {reason}")]
    MalformedCsv { line: u64, reason: String },
    #[error("need at least two classes, found only {0:?}")]
    SingleClass(String),
    #[error("label {0:?} is not known to the encoder")]
    UnknownLabel(String),
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("embedding dimension changed: model expects {expected}, provider returned {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("corrupt model file at byte {offset}: {reason}")]
    CorruptModel { offset: usize, reason: String },
    #[error("unsupported model file: {0}")]
    VersionMismatch(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Round every parameter to the storage precision.
pub(crate) fn round_to_f32(params: &mut [f64]) {
    for p in params {
        *p = f64::from(*p as f32);
    }
}

/// Row-major `rows × cols` matrix times vector.
pub(crate) fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}
