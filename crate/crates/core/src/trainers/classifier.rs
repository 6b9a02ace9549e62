//! Softmax head over frozen provider embeddings.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{stratified_split, LabelEncoder};
use super::optim::{OptimizerConfig, OptimizerState};
use super::{matvec, round_to_f32, TrainError};
use crate::config::TrainingConfig;
use crate::embeddings::embed_batch;
use crate::providers::Provider;

const EMBED_BATCH: usize = 64;

/// Which embedding endpoint produced the training features.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProviderFingerprint {
    pub url: String,
    pub model: String,
}

impl ProviderFingerprint {
    pub fn of(provider: &dyn Provider) -> Self {
        let (url, model) = provider.endpoint().fingerprint();
        Self { url, model }
    }
}

/// `W` (`classes × dim`, row-major) followed by `b` in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub(crate) dim: usize,
    pub(crate) params: Vec<f64>,
    pub encoder: LabelEncoder,
    pub provider: ProviderFingerprint,
    pub optimizer: OptimizerConfig,
}

impl ClassifierHead {
    pub fn zeros(dim: usize, encoder: LabelEncoder, provider: ProviderFingerprint, optimizer: OptimizerConfig) -> Self {
        let n = encoder.len() * (dim + 1);
        Self { dim, params: vec![0.0; n], encoder, provider, optimizer }
    }

    pub(crate) fn from_params(
        dim: usize,
        params: Vec<f64>,
        encoder: LabelEncoder,
        provider: ProviderFingerprint,
        optimizer: OptimizerConfig,
    ) -> Result<Self, TrainError> {
        let expected = encoder.len() * (dim + 1);
        if params.len() != expected {
            return Err(TrainError::ShapeMismatch { what: "classifier parameters", expected, got: params.len() });
        }
        Ok(Self { dim, params, encoder, provider, optimizer })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.encoder.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let c = self.num_classes();
        let (w, b) = self.params.split_at(c * self.dim);
        let mut z = matvec(w, c, self.dim, x);
        z.iter_mut().zip(b).for_each(|(z, b)| *z += b);
        z
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Arg-max class; ties go to the lower id.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.predict_proba(x))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean cross-entropy of `softmax(Wx + b)` over the batch and its gradient with
/// respect to the flat `[W, b]` buffer.
pub fn cross_entropy_loss_grad(
    params: &[f64],
    classes: usize,
    dim: usize,
    xs: &[&[f64]],
    ys: &[usize],
) -> (f64, Vec<f64>) {
    let (w, b) = params.split_at(classes * dim);
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let scale = 1.0 / xs.len() as f64;
    for (x, &y) in xs.iter().zip(ys) {
        let mut z = matvec(w, classes, dim, x);
        z.iter_mut().zip(b).for_each(|(z, b)| *z += b);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - z[y];
        for c in 0..classes {
            let d = ((z[c] - lse).exp() - if c == y { 1.0 } else { 0.0 }) * scale;
            let row = &mut grad[c * dim..(c + 1) * dim];
            row.iter_mut().zip(x.iter()).for_each(|(g, xi)| *g += d * xi);
            grad[classes * dim + c] += d;
        }
    }
    (loss * scale, grad)
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Unweighted mean of per-class F1 over every class that appears in either list.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    let mut seen: Vec<usize> = truth.iter().chain(pred).copied().collect();
    seen.sort_unstable();
    seen.dedup();
    if seen.is_empty() {
        return 0.0;
    }
    let total: f64 = seen
        .iter()
        .map(|&c| {
            let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
            let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
            let fn_ = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fn_)
            }
        })
        .sum();
    total / seen.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifierReport {
    pub classes: Vec<String>,
    pub train_size: usize,
    pub eval_size: usize,
    /// Training-set loss before the first update.
    pub initial_loss: f64,
    /// Training-set loss after each epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
    pub eval_macro_f1: Option<f64>,
}

fn check_features(xs: &[Vec<f64>]) -> Result<usize, TrainError> {
    let dim = xs.first().map(Vec::len).ok_or(TrainError::EmptyDataset)?;
    for x in xs {
        if x.len() != dim {
            return Err(TrainError::ShapeMismatch { what: "feature vector", expected: dim, got: x.len() });
        }
    }
    Ok(dim)
}

/// Train on precomputed features. `labels` index into `encoder`.
pub fn fit_classifier(
    features: &[Vec<f64>],
    labels: &[usize],
    encoder: LabelEncoder,
    provider: ProviderFingerprint,
    config: &TrainingConfig,
) -> Result<(ClassifierHead, ClassifierReport), TrainError> {
    let dim = check_features(features)?;
    if labels.len() != features.len() {
        return Err(TrainError::ShapeMismatch { what: "label column", expected: features.len(), got: labels.len() });
    }
    if encoder.len() < 2 {
        return Err(TrainError::SingleClass(encoder.decode(0).unwrap_or_default().to_string()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= encoder.len()) {
        return Err(TrainError::UnknownLabel(bad.to_string()));
    }
    let classes = encoder.len();
    let seed = config.seed();
    let (train, eval) = stratified_split(labels, config.eval_fraction(), seed);
    let opt_cfg = OptimizerConfig::from_training(config);
    let mut head = ClassifierHead::zeros(dim, encoder, provider, opt_cfg);
    let mut opt = OptimizerState::new(opt_cfg, head.params.len());

    let full_loss = |params: &[f64]| {
        let xs: Vec<&[f64]> = train.iter().map(|&i| features[i].as_slice()).collect();
        let ys: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        cross_entropy_loss_grad(params, classes, dim, &xs, &ys).0
    };
    let initial_loss = full_loss(&head.params);
    let mut epoch_losses = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = train.clone();
    let batch = config.batch_size().max(1);
    for _ in 0..config.epochs() {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| features[i].as_slice()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, mut grad) = cross_entropy_loss_grad(&head.params, classes, dim, &xs, &ys);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: opt.steps() });
            }
            opt.step(&mut head.params, &mut grad);
        }
        epoch_losses.push(full_loss(&head.params));
    }
    round_to_f32(&mut head.params);
    let final_loss = full_loss(&head.params);
    if !final_loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: opt.steps() });
    }

    let score = |idx: &[usize]| {
        let truth: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let pred: Vec<usize> = idx.iter().map(|&i| head.predict(&features[i])).collect();
        (accuracy(&truth, &pred), macro_f1(&truth, &pred))
    };
    let (train_accuracy, _) = score(&train);
    let (eval_accuracy, eval_macro_f1) = if eval.is_empty() {
        (None, None)
    } else {
        let (a, f) = score(&eval);
        (Some(a), Some(f))
    };
    let report = ClassifierReport {
        classes: head.encoder.classes().to_vec(),
        train_size: train.len(),
        eval_size: eval.len(),
        initial_loss,
        epoch_losses,
        final_loss,
        train_accuracy,
        eval_accuracy,
        eval_macro_f1,
    };
    Ok((head, report))
}

/// Embed each distinct text once, in first-occurrence order.
async fn embed_unique(provider: &dyn Provider, texts: &[String]) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut unique = Vec::new();
    let map: Vec<usize> = texts
        .iter()
        .map(|t| {
            *slot.entry(t.as_str()).or_insert_with(|| {
                unique.push(t.clone());
                unique.len() - 1
            })
        })
        .collect();
    let vectors = embed_batch(provider, &unique, EMBED_BATCH).await?;
    let vectors: Vec<Vec<f64>> = vectors.iter().map(|v| v.values().iter().map(|&x| f64::from(x)).collect()).collect();
    Ok(map.into_iter().map(|i| vectors[i].clone()).collect())
}

/// Full pipeline: encode labels, embed, split, train, evaluate.
pub async fn train_classifier(
    texts: &[String],
    labels: &[String],
    provider: &dyn Provider,
    config: &TrainingConfig,
) -> Result<(ClassifierHead, ClassifierReport), TrainError> {
    if texts.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if texts.len() != labels.len() {
        return Err(TrainError::ShapeMismatch { what: "label column", expected: texts.len(), got: labels.len() });
    }
    let encoder = LabelEncoder::fit(labels);
    if encoder.len() < 2 {
        return Err(TrainError::SingleClass(labels[0].clone()));
    }
    let y = encoder.encode_all(labels)?;
    let features = embed_unique(provider, texts).await?;
    fit_classifier(&features, &y, encoder, ProviderFingerprint::of(provider), config)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub label: String,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub predictions: Vec<Prediction>,
    /// Non-fatal notes, such as a provider that differs from the training one.
    pub warnings: Vec<String>,
}

pub async fn classify(
    head: &ClassifierHead,
    texts: &[String],
    provider: &dyn Provider,
) -> Result<Classification, TrainError> {
    let mut warnings = Vec::new();
    let current = ProviderFingerprint::of(provider);
    if current != head.provider {
        let msg = format!(
            "provider {} ({}) differs from the training provider {} ({})",
            current.url, current.model, head.provider.url, head.provider.model
        );
        tracing::warn!("{msg}");
        warnings.push(msg);
    }
    if texts.is_empty() {
        return Ok(Classification { predictions: Vec::new(), warnings });
    }
    let features = embed_unique(provider, texts).await?;
    let got = features[0].len();
    if got != head.dim {
        return Err(TrainError::DimensionMismatch { expected: head.dim, got });
    }
    let predictions = features
        .iter()
        .map(|x| {
            let probabilities = head.predict_proba(x);
            let label = head.encoder.decode(argmax(&probabilities)).unwrap_or_default().to_string();
            Prediction { label, probabilities }
        })
        .collect();
    Ok(Classification { predictions, warnings })
}
