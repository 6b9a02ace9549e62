//! Embedding-space distillation: fit a small student map from cheap features to
//! a teacher's embeddings.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::random_split;
use super::optim::{OptimizerConfig, OptimizerState};
use super::{matvec, round_to_f32, ProviderFingerprint, TrainError};
use crate::config::TrainingConfig;
use crate::embeddings::embed_batch;
use crate::providers::{hash_embedding, Provider};

const EMBED_BATCH: usize = 64;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentKind {
    Linear,
    Mlp1,
}

impl FromStr for StudentKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(Self::Linear),
            "mlp1" | "mlp" => Ok(Self::Mlp1),
            other => Err(format!("unknown student kind {other:?} (expected linear or mlp1)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentSpec {
    pub kind: StudentKind,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Hidden width; ignored by the linear student.
    #[serde(default)]
    pub hidden: usize,
}

impl StudentSpec {
    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        Self { kind: StudentKind::Linear, in_dim, out_dim, hidden: 0 }
    }

    pub fn mlp1(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self { kind: StudentKind::Mlp1, in_dim, out_dim, hidden }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what, got| Err(TrainError::ShapeMismatch { what, expected: 1, got });
        if self.in_dim == 0 {
            return bad("student input width", 0);
        }
        if self.out_dim == 0 {
            return bad("student output width", 0);
        }
        if self.kind == StudentKind::Mlp1 && self.hidden == 0 {
            return bad("student hidden width", 0);
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        match self.kind {
            StudentKind::Linear => self.out_dim * (self.in_dim + 1),
            StudentKind::Mlp1 => self.hidden * (self.in_dim + 1) + self.out_dim * (self.hidden + 1),
        }
    }

    /// Uniform(±1/√fan_in) weights, zero biases.
    fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(self.num_params());
        let mut layer = |out: &mut Vec<f64>, rows: usize, cols: usize| {
            let a = 1.0 / (cols as f64).sqrt();
            out.extend((0..rows * cols).map(|_| rng.random_range(-a..a)));
            out.extend(std::iter::repeat_n(0.0, rows));
        };
        match self.kind {
            StudentKind::Linear => layer(&mut out, self.out_dim, self.in_dim),
            StudentKind::Mlp1 => {
                layer(&mut out, self.hidden, self.in_dim);
                layer(&mut out, self.out_dim, self.hidden);
            }
        }
        out
    }

    /// Output and, for the MLP, the hidden activations.
    fn forward(&self, params: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let affine = |p: &[f64], rows: usize, cols: usize, x: &[f64]| {
            let (w, b) = p.split_at(rows * cols);
            let mut z = matvec(w, rows, cols, x);
            z.iter_mut().zip(b).for_each(|(z, b)| *z += b);
            z
        };
        match self.kind {
            StudentKind::Linear => (affine(params, self.out_dim, self.in_dim, x), Vec::new()),
            StudentKind::Mlp1 => {
                let split = self.hidden * (self.in_dim + 1);
                let h: Vec<f64> = affine(&params[..split], self.hidden, self.in_dim, x)
                    .into_iter()
                    .map(f64::tanh)
                    .collect();
                (affine(&params[split..], self.out_dim, self.hidden, &h), h)
            }
        }
    }

    /// Accumulate `dL/dparams` given `dL/dy` for one sample.
    fn backward(&self, params: &[f64], x: &[f64], h: &[f64], dy: &[f64], grad: &mut [f64]) {
        let outer = |grad: &mut [f64], rows: usize, cols: usize, d: &[f64], input: &[f64]| {
            for r in 0..rows {
                let row = &mut grad[r * cols..(r + 1) * cols];
                row.iter_mut().zip(input).for_each(|(g, v)| *g += d[r] * v);
                grad[rows * cols + r] += d[r];
            }
        };
        match self.kind {
            StudentKind::Linear => outer(grad, self.out_dim, self.in_dim, dy, x),
            StudentKind::Mlp1 => {
                let split = self.hidden * (self.in_dim + 1);
                let (g1, g2) = grad.split_at_mut(split);
                outer(g2, self.out_dim, self.hidden, dy, h);
                let w2 = &params[split..split + self.out_dim * self.hidden];
                let dh: Vec<f64> = (0..self.hidden)
                    .map(|j| {
                        let back: f64 = (0..self.out_dim).map(|o| w2[o * self.hidden + j] * dy[o]).sum();
                        back * (1.0 - h[j] * h[j])
                    })
                    .collect();
                outer(g1, self.hidden, self.in_dim, &dh, x);
            }
        }
    }
}

/// Mean squared difference over components.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn cosine_parts(s: &[f64], t: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = s.iter().zip(t).map(|(a, b)| a * b).sum();
    let ns = s.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
    let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
    (dot / (ns * nt), ns, nt)
}

/// Mean over samples of `w₁·MSE(s, t) + w₂·(1 − cos(s, t))` and its gradient.
pub fn composite_loss_grad(
    spec: &StudentSpec,
    params: &[f64],
    inputs: &[&[f64]],
    targets: &[&[f64]],
    weights: [f64; 2],
) -> (f64, Vec<f64>) {
    let [w1, w2] = weights;
    let n = inputs.len() as f64;
    let d = spec.out_dim as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        let (s, h) = spec.forward(params, x);
        let (cos, ns, nt) = cosine_parts(&s, t);
        loss += w1 * mse(&s, t) + w2 * (1.0 - cos);
        let dy: Vec<f64> = s
            .iter()
            .zip(t.iter())
            .map(|(sv, tv)| {
                let d_mse = 2.0 * (sv - tv) / d;
                let d_cos = tv / (ns * nt) - cos * sv / (ns * ns);
                (w1 * d_mse - w2 * d_cos) / n
            })
            .collect();
        spec.backward(params, x, &h, &dy, &mut grad);
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub spec: StudentSpec,
    pub(crate) params: Vec<f64>,
    /// Human-readable description of the input featurizer.
    pub featurizer: String,
    pub teacher: ProviderFingerprint,
    pub optimizer: OptimizerConfig,
}

impl StudentModel {
    pub(crate) fn from_params(
        spec: StudentSpec,
        params: Vec<f64>,
        featurizer: String,
        teacher: ProviderFingerprint,
        optimizer: OptimizerConfig,
    ) -> Result<Self, TrainError> {
        spec.validate()?;
        if params.len() != spec.num_params() {
            return Err(TrainError::ShapeMismatch {
                what: "student parameters",
                expected: spec.num_params(),
                got: params.len(),
            });
        }
        Ok(Self { spec, params, featurizer, teacher, optimizer })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, TrainError> {
        if x.len() != self.spec.in_dim {
            return Err(TrainError::ShapeMismatch { what: "student input", expected: self.spec.in_dim, got: x.len() });
        }
        Ok(self.spec.forward(&self.params, x).0)
    }
}

/// Maps text to the student's fixed-width input.
pub trait Featurizer: Send + Sync {
    fn dim(&self) -> usize;
    fn featurize(&self, text: &str) -> Vec<f64>;
    fn describe(&self) -> String;
}

/// Deterministic hash-to-unit-vector features; needs no network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashFeaturizer {
    pub seed: u64,
    pub dim: usize,
}

impl HashFeaturizer {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }
}

impl Featurizer for HashFeaturizer {
    fn dim(&self) -> usize {
        self.dim
    }
    fn featurize(&self, text: &str) -> Vec<f64> {
        hash_embedding(self.seed, self.dim, text).into_iter().map(f64::from).collect()
    }
    fn describe(&self) -> String {
        format!("hash(seed={}, dim={})", self.seed, self.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MimicReport {
    pub train_size: usize,
    pub heldout_size: usize,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub train_mse: f64,
    pub heldout_mse: Option<f64>,
    pub heldout_mean_cosine: Option<f64>,
}

fn mean_metrics(spec: &StudentSpec, params: &[f64], idx: &[usize], x: &[Vec<f64>], t: &[Vec<f64>]) -> (f64, f64) {
    let (mut m, mut c) = (0.0, 0.0);
    for &i in idx {
        let s = spec.forward(params, &x[i]).0;
        m += mse(&s, &t[i]);
        c += cosine_parts(&s, &t[i]).0;
    }
    let n = idx.len() as f64;
    (m / n, c / n)
}

/// Fit a student on precomputed `(input, target)` pairs. A seeded share of the
/// pairs (`eval_fraction`) is held out for the report.
pub fn fit_student(
    spec: StudentSpec,
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    config: &TrainingConfig,
) -> Result<(StudentModel, MimicReport), TrainError> {
    spec.validate()?;
    if inputs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if targets.len() != inputs.len() {
        return Err(TrainError::ShapeMismatch { what: "teacher targets", expected: inputs.len(), got: targets.len() });
    }
    for x in inputs {
        if x.len() != spec.in_dim {
            return Err(TrainError::ShapeMismatch { what: "student input", expected: spec.in_dim, got: x.len() });
        }
    }
    for t in targets {
        if t.len() != spec.out_dim {
            return Err(TrainError::ShapeMismatch { what: "student output", expected: spec.out_dim, got: t.len() });
        }
    }
    let weights = config.loss_weights();
    let seed = config.seed();
    let (train, heldout) = random_split(inputs.len(), config.eval_fraction(), seed);
    let opt_cfg = OptimizerConfig::from_training(config);
    let mut params = spec.init(seed);
    let mut opt = OptimizerState::new(opt_cfg, params.len());

    let batch_refs = |idx: &[usize]| -> (Vec<&[f64]>, Vec<&[f64]>) {
        (
            idx.iter().map(|&i| inputs[i].as_slice()).collect(),
            idx.iter().map(|&i| targets[i].as_slice()).collect(),
        )
    };
    let full_loss = |params: &[f64]| {
        let (xs, ts) = batch_refs(&train);
        composite_loss_grad(&spec, params, &xs, &ts, weights).0
    };
    let initial_loss = full_loss(&params);
    let mut epoch_losses = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = train.clone();
    let batch = config.batch_size().max(1);
    for _ in 0..config.epochs() {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let (xs, ts) = batch_refs(chunk);
            let (loss, mut grad) = composite_loss_grad(&spec, &params, &xs, &ts, weights);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: opt.steps() });
            }
            opt.step(&mut params, &mut grad);
        }
        epoch_losses.push(full_loss(&params));
    }
    round_to_f32(&mut params);
    let final_loss = full_loss(&params);
    if !final_loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: opt.steps() });
    }
    let (train_mse, _) = mean_metrics(&spec, &params, &train, inputs, targets);
    let (heldout_mse, heldout_mean_cosine) = if heldout.is_empty() {
        (None, None)
    } else {
        let (m, c) = mean_metrics(&spec, &params, &heldout, inputs, targets);
        (Some(m), Some(c))
    };
    let report = MimicReport {
        train_size: train.len(),
        heldout_size: heldout.len(),
        initial_loss,
        epoch_losses,
        final_loss,
        train_mse,
        heldout_mse,
        heldout_mean_cosine,
    };
    let model = StudentModel {
        spec,
        params,
        featurizer: String::new(),
        teacher: ProviderFingerprint::default(),
        optimizer: opt_cfg,
    };
    Ok((model, report))
}

/// Embed `texts` with the teacher, featurize them locally, and fit the student.
pub async fn train_mimicker(
    spec: StudentSpec,
    teacher: &dyn Provider,
    texts: &[String],
    featurizer: &dyn Featurizer,
    config: &TrainingConfig,
) -> Result<(StudentModel, MimicReport), TrainError> {
    spec.validate()?;
    if texts.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if featurizer.dim() != spec.in_dim {
        return Err(TrainError::ShapeMismatch { what: "student input", expected: spec.in_dim, got: featurizer.dim() });
    }
    let targets: Vec<Vec<f64>> = embed_batch(teacher, texts, EMBED_BATCH)
        .await?
        .iter()
        .map(|v| v.values().iter().map(|&x| f64::from(x)).collect())
        .collect();
    let teacher_dim = targets[0].len();
    if teacher_dim != spec.out_dim {
        return Err(TrainError::ShapeMismatch { what: "student output", expected: teacher_dim, got: spec.out_dim });
    }
    let inputs: Vec<Vec<f64>> = texts.iter().map(|t| featurizer.featurize(t)).collect();
    let (mut model, report) = fit_student(spec, &inputs, &targets, config)?;
    model.featurizer = featurizer.describe();
    model.teacher = ProviderFingerprint::of(teacher);
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::MockProvider;
    use crate::trainers::gradcheck::{max_relative_error, numeric_gradient};
    use serde_json::json;

    fn config(v: serde_json::Value) -> TrainingConfig {
        crate::config::split_training_config(v.as_object().unwrap()).unwrap()
    }

    fn random_batch(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn check_gradient(spec: StudentSpec, weights: [f64; 2]) -> f64 {
        let params = spec.init(11);
        let params: Vec<f64> = params.iter().enumerate().map(|(i, p)| p + 0.05 * ((i % 7) as f64 - 3.0)).collect();
        let xs = random_batch(1, 5, spec.in_dim);
        let ts = random_batch(2, 5, spec.out_dim);
        let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let tr: Vec<&[f64]> = ts.iter().map(Vec::as_slice).collect();
        let (_, analytic) = composite_loss_grad(&spec, &params, &xr, &tr, weights);
        let numeric = numeric_gradient(|p| composite_loss_grad(&spec, p, &xr, &tr, weights).0, &params, 1e-5);
        max_relative_error(&analytic, &numeric, 1e-6)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for weights in [[0.5, 0.5], [1.0, 0.0], [0.0, 1.0]] {
            assert!(check_gradient(StudentSpec::linear(4, 3), weights) < 1e-4, "linear {weights:?}");
            assert!(check_gradient(StudentSpec::mlp1(4, 5, 3), weights) < 1e-4, "mlp1 {weights:?}");
        }
    }

    #[test]
    fn pure_mse_weights() {
        let spec = StudentSpec::linear(3, 2);
        let params = spec.init(3);
        let xs = random_batch(4, 6, 3);
        let ts = random_batch(5, 6, 2);
        let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let tr: Vec<&[f64]> = ts.iter().map(Vec::as_slice).collect();
        let (loss, _) = composite_loss_grad(&spec, &params, &xr, &tr, [1.0, 0.0]);
        let direct: f64 =
            xs.iter().zip(&ts).map(|(x, t)| mse(&spec.forward(&params, x).0, t)).sum::<f64>() / xs.len() as f64;
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn linear_teacher_is_recovered() {
        let (in_dim, out_dim) = (8, 16);
        let t_map = random_batch(9, out_dim, in_dim);
        let xs = random_batch(10, 500, in_dim);
        let ts: Vec<Vec<f64>> = xs.iter().map(|x| matvec(&t_map.concat(), out_dim, in_dim, x)).collect();
        let cfg = config(json!({"learning_rate": 0.01, "num_train_epochs": 300, "batch_size": 500}));
        let (model, report) = fit_student(StudentSpec::linear(in_dim, out_dim), &xs, &ts, &cfg).unwrap();
        assert!(report.final_loss < report.initial_loss);
        assert!(report.heldout_mean_cosine.unwrap() >= 0.999, "{report:?}");
        assert_eq!(model.params.len(), out_dim * (in_dim + 1));
    }

    #[test]
    fn fit_is_deterministic() {
        let xs = random_batch(1, 40, 4);
        let ts = random_batch(2, 40, 3);
        let cfg = config(json!({"num_train_epochs": 3, "batch_size": 8}));
        let a = fit_student(StudentSpec::mlp1(4, 6, 3), &xs, &ts, &cfg).unwrap().0;
        let b = fit_student(StudentSpec::mlp1(4, 6, 3), &xs, &ts, &cfg).unwrap().0;
        assert_eq!(a.params, b.params);
    }

    #[tokio::test]
    async fn teacher_dimension_must_match() {
        let teacher = MockProvider::new(3, 16);
        let texts = vec!["alpha".to_string(), "beta".to_string()];
        let feat = HashFeaturizer::new(1, 8);
        let err = train_mimicker(StudentSpec::linear(8, 12), &teacher, &texts, &feat, &TrainingConfig::default())
            .await
            .unwrap_err();
        assert!(matches!(err, TrainError::ShapeMismatch { what: "student output", expected: 16, got: 12 }));
        let err = train_mimicker(StudentSpec::linear(4, 16), &teacher, &texts, &feat, &TrainingConfig::default())
            .await
            .unwrap_err();
        assert!(matches!(err, TrainError::ShapeMismatch { what: "student input", .. }));
    }

    #[tokio::test]
    async fn mimicker_records_teacher_and_featurizer() {
        let teacher = MockProvider::new(3, 16);
        let texts: Vec<String> = (0..30).map(|i| format!("word{} tail {i}", i % 5)).collect();
        let feat = HashFeaturizer::new(1, 8);
        let cfg = config(json!({"num_train_epochs": 20, "learning_rate": 0.01}));
        let (model, report) = train_mimicker(StudentSpec::linear(8, 16), &teacher, &texts, &feat, &cfg).await.unwrap();
        assert!(report.final_loss < report.initial_loss);
        assert_eq!(model.featurizer, "hash(seed=1, dim=8)");
        assert_eq!(model.teacher.model, "mock");
        assert_eq!(model.predict(&feat.featurize("x")).unwrap().len(), 16);
    }
}
