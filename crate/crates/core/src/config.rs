//! Configuration records: the unified training dictionary and its splitter, model
//! and tokenizer hyperparameters, and the flat key/value reader every task config
//! is parsed through.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::providers::{Dialect, ProviderEndpoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown task kind {0:?}")]
    UnknownTaskKind(String),
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key:?}: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("missing required key {0:?}")]
    MissingKey(String),
    #[error("hidden_size {hidden_size} is not divisible by num_attention_heads {num_attention_heads}")]
    HeadDivisibility { hidden_size: u64, num_attention_heads: u64 },
    #[error("{0} must be strictly positive")]
    NonPositiveField(&'static str),
    #[error("config file: {0}")]
    File(String),
}

impl ConfigError {
    pub fn invalid(key: &str, reason: impl Into<String>) -> Self {
        ConfigError::InvalidValue { key: key.to_string(), reason: reason.into() }
    }

    /// The field the error is about, when there is one.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey(k) | ConfigError::MissingKey(k) => Some(k),
            ConfigError::InvalidValue { key, .. } => Some(key),
            ConfigError::NonPositiveField(k) => Some(k),
            ConfigError::HeadDivisibility { .. } => Some("hidden_size"),
            _ => None,
        }
    }
}

/// Flatten nested objects into dot-separated keys: `{"a": {"b": 1}}` → `{"a.b": 1}`.
pub fn flatten(value: &Value) -> Result<Map<String, Value>, ConfigError> {
    fn walk(prefix: &str, v: &Map<String, Value>, out: &mut Map<String, Value>) {
        for (k, v) in v {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Object(inner) => walk(&key, inner, out),
                other => {
                    out.insert(key, other.clone());
                }
            }
        }
    }
    let Value::Object(map) = value else {
        return Err(ConfigError::File("configuration must be a JSON object".into()));
    };
    let mut out = Map::new();
    walk("", map, &mut out);
    Ok(out)
}

/// Parse a UTF-8 JSON config document into a flat map.
pub fn parse_config_document(text: &str) -> Result<Map<String, Value>, ConfigError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::File(e.to_string()))?;
    flatten(&value)
}

/// Consumes keys from a flat map; whatever is left at [`FlatConfig::finish`] is rejected.
#[derive(Debug, Clone)]
pub struct FlatConfig {
    entries: Map<String, Value>,
}

impl FlatConfig {
    pub fn new(entries: Map<String, Value>) -> Self {
        Self { entries }
    }

    fn take_any(&mut self, keys: &[&str]) -> Option<(String, Value)> {
        for k in keys {
            if let Some(v) = self.entries.remove(*k) {
                return Some((k.to_string(), v));
            }
        }
        None
    }

    pub fn take_str(&mut self, keys: &[&str]) -> Result<Option<String>, ConfigError> {
        match self.take_any(keys) {
            None => Ok(None),
            Some((_, Value::String(s))) => Ok(Some(s)),
            Some((k, _)) => Err(ConfigError::invalid(&k, "expected a string")),
        }
    }

    pub fn take_f64(&mut self, keys: &[&str]) -> Result<Option<f64>, ConfigError> {
        match self.take_any(keys) {
            None => Ok(None),
            Some((k, v)) => v
                .as_f64()
                .filter(|x| x.is_finite())
                .map(Some)
                .ok_or_else(|| ConfigError::invalid(&k, "expected a finite number")),
        }
    }

    pub fn take_u64(&mut self, keys: &[&str]) -> Result<Option<u64>, ConfigError> {
        match self.take_any(keys) {
            None => Ok(None),
            Some((k, v)) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| ConfigError::invalid(&k, "expected a non-negative integer")),
        }
    }

    pub fn take_positive(&mut self, keys: &[&str]) -> Result<Option<u64>, ConfigError> {
        let key = keys[0];
        match self.take_u64(keys)? {
            Some(0) => Err(ConfigError::invalid(key, "must be a positive integer")),
            other => Ok(other),
        }
    }

    pub fn take_bool(&mut self, keys: &[&str]) -> Result<Option<bool>, ConfigError> {
        match self.take_any(keys) {
            None => Ok(None),
            Some((_, Value::Bool(b))) => Ok(Some(b)),
            Some((k, _)) => Err(ConfigError::invalid(&k, "expected a boolean")),
        }
    }

    pub fn take_value(&mut self, keys: &[&str]) -> Option<Value> {
        self.take_any(keys).map(|(_, v)| v)
    }

    /// Remove every `prefix.*` key, returning the suffixes in insertion order.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, Value)> {
        let dotted = format!("{prefix}.");
        let keys: Vec<String> = self.entries.keys().filter(|k| k.starts_with(&dotted)).cloned().collect();
        keys.into_iter()
            .map(|k| {
                let v = self.entries.remove(&k).expect("key listed above");
                (k[dotted.len()..].to_string(), v)
            })
            .collect()
    }

    pub fn require<T>(key: &str, v: Option<T>) -> Result<T, ConfigError> {
        v.ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    /// Provider endpoint from `provider_url`, `model`, `dialect`, `api_key`,
    /// `timeout_secs`, `max_retries` (or their `provider.*` spellings).
    pub fn take_endpoint(&mut self) -> Result<Option<ProviderEndpoint>, ConfigError> {
        let url = self.take_str(&["provider_url", "provider.url"])?;
        let model = self.take_str(&["model", "provider.model"])?;
        let dialect = self.take_str(&["dialect", "provider.dialect"])?;
        let api_key = self.take_str(&["api_key", "provider.api_key"])?;
        let timeout = self.take_f64(&["timeout_secs", "provider.timeout_secs"])?;
        let retries = self.take_u64(&["max_retries", "provider.max_retries"])?;
        let Some(url) = url else {
            if model.is_some() {
                return Err(ConfigError::MissingKey("provider_url".into()));
            }
            return Ok(None);
        };
        let mut ep = ProviderEndpoint::new(url, model.unwrap_or_else(|| "default".into()))
            .map_err(|e| ConfigError::invalid("provider_url", e.to_string()))?;
        if let Some(d) = dialect {
            ep.dialect = d.parse::<Dialect>().map_err(|e| ConfigError::invalid("dialect", e.to_string()))?;
        }
        ep.api_key = api_key;
        if let Some(t) = timeout {
            if t <= 0.0 {
                return Err(ConfigError::invalid("timeout_secs", "must be positive"));
            }
            ep.timeout = Duration::from_secs_f64(t);
        }
        if let Some(r) = retries {
            ep.max_retries = u32::try_from(r).map_err(|_| ConfigError::invalid("max_retries", "too large"))?;
        }
        ep.validate().map_err(|e| ConfigError::invalid("provider_url", e.to_string()))?;
        Ok(Some(ep))
    }

    /// Reject leftover keys, naming the first in sorted order.
    pub fn finish(self) -> Result<(), ConfigError> {
        match self.entries.keys().min() {
            Some(k) => Err(ConfigError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }
}

/// Optimizer selected by the `optim` training key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Keys forwarded to the generic training loop.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneralArgs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_train_epochs: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optim: Option<OptimizerKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
}

/// Keys the generic loop does not understand; routed to the task components.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskArgs {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlm_probability: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_weights: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub general: GeneralArgs,
    pub task_specific: TaskArgs,
}

pub const GENERAL_KEYS: &[&str] = &[
    "batch_size",
    "eval_fraction",
    "learning_rate",
    "max_grad_norm",
    "num_train_epochs",
    "optim",
    "output_dir",
    "seed",
];

pub const TASK_SPECIFIC_KEYS: &[&str] = &["loss_weights", "mlm_probability"];

impl TrainingConfig {
    pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
    pub const DEFAULT_EPOCHS: u64 = 10;
    pub const DEFAULT_BATCH_SIZE: u64 = 32;
    pub const DEFAULT_SEED: i64 = 42;
    pub const DEFAULT_EVAL_FRACTION: f64 = 0.2;
    pub const DEFAULT_MLM_PROBABILITY: f64 = 0.15;
    pub const DEFAULT_LOSS_WEIGHTS: [f64; 2] = [0.5, 0.5];

    pub fn learning_rate(&self) -> f64 {
        self.general.learning_rate.unwrap_or(Self::DEFAULT_LEARNING_RATE)
    }
    pub fn epochs(&self) -> u64 {
        self.general.num_train_epochs.unwrap_or(Self::DEFAULT_EPOCHS)
    }
    pub fn batch_size(&self) -> usize {
        self.general.batch_size.unwrap_or(Self::DEFAULT_BATCH_SIZE) as usize
    }
    pub fn seed(&self) -> u64 {
        self.general.seed.unwrap_or(Self::DEFAULT_SEED) as u64
    }
    pub fn eval_fraction(&self) -> f64 {
        self.general.eval_fraction.unwrap_or(Self::DEFAULT_EVAL_FRACTION)
    }
    pub fn optimizer(&self) -> OptimizerKind {
        self.general.optim.unwrap_or_default()
    }
    pub fn max_grad_norm(&self) -> Option<f64> {
        self.general.max_grad_norm
    }
    pub fn mlm_probability(&self) -> f64 {
        self.task_specific.mlm_probability.unwrap_or(Self::DEFAULT_MLM_PROBABILITY)
    }
    pub fn loss_weights(&self) -> [f64; 2] {
        self.task_specific.loss_weights.unwrap_or(Self::DEFAULT_LOSS_WEIGHTS)
    }

    /// Keys present in the general map, sorted.
    pub fn general_keys(&self) -> Vec<String> {
        object_keys(&self.general)
    }

    pub fn task_specific_keys(&self) -> Vec<String> {
        object_keys(&self.task_specific)
    }

    /// Back to the flat dictionary form accepted by [`split_training_config`].
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        for part in [serde_json::to_value(&self.general), serde_json::to_value(&self.task_specific)] {
            if let Ok(Value::Object(m)) = part {
                out.extend(m);
            }
        }
        out
    }

    /// Field-wise union; `other` wins where both are set.
    pub fn merged(&self, other: &TrainingConfig) -> TrainingConfig {
        let mut flat = self.to_flat();
        flat.extend(other.to_flat());
        split_training_config(&flat).expect("union of valid configs is valid")
    }
}

fn object_keys<T: Serialize>(v: &T) -> Vec<String> {
    match serde_json::to_value(v) {
        Ok(Value::Object(m)) => m.keys().cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect(),
        _ => Vec::new(),
    }
}

/// Route a flat training dictionary into general and task-specific parts.
///
/// Output does not depend on the key order of `raw`. Unknown keys are rejected by
/// name; when several are unknown the lexicographically smallest is reported.
pub fn split_training_config(raw: &Map<String, Value>) -> Result<TrainingConfig, ConfigError> {
    let sorted: BTreeMap<&String, &Value> = raw.iter().collect();
    for k in sorted.keys() {
        if !GENERAL_KEYS.contains(&k.as_str()) && !TASK_SPECIFIC_KEYS.contains(&k.as_str()) {
            return Err(ConfigError::UnknownKey((*k).clone()));
        }
    }
    let mut flat = FlatConfig::new(raw.clone());
    let mut general = GeneralArgs {
        learning_rate: flat.take_f64(&["learning_rate"])?,
        num_train_epochs: flat.take_positive(&["num_train_epochs"])?,
        batch_size: flat.take_positive(&["batch_size"])?,
        seed: None,
        output_dir: flat.take_str(&["output_dir"])?.map(PathBuf::from),
        eval_fraction: flat.take_f64(&["eval_fraction"])?,
        optim: None,
        max_grad_norm: flat.take_f64(&["max_grad_norm"])?,
    };
    if let Some(v) = flat.take_value(&["seed"]) {
        general.seed = Some(v.as_i64().ok_or_else(|| ConfigError::invalid("seed", "expected an integer"))?);
    }
    if let Some(v) = flat.take_str(&["optim"])? {
        general.optim = Some(match v.as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            _ => return Err(ConfigError::invalid("optim", "expected \"adam\" or \"sgd\"")),
        });
    }
    if let Some(lr) = general.learning_rate {
        if lr <= 0.0 {
            return Err(ConfigError::invalid("learning_rate", "must be positive"));
        }
    }
    if let Some(f) = general.eval_fraction {
        if !(f > 0.0 && f < 1.0) {
            return Err(ConfigError::invalid("eval_fraction", "must be in (0, 1)"));
        }
    }
    if let Some(g) = general.max_grad_norm {
        if g <= 0.0 {
            return Err(ConfigError::invalid("max_grad_norm", "must be positive"));
        }
    }

    let mut task_specific = TaskArgs { mlm_probability: flat.take_f64(&["mlm_probability"])?, loss_weights: None };
    if let Some(p) = task_specific.mlm_probability {
        if !(0.0..=1.0).contains(&p) {
            return Err(ConfigError::invalid("mlm_probability", "must be in [0, 1]"));
        }
    }
    if let Some(v) = flat.take_value(&["loss_weights"]) {
        let pair: Vec<f64> = v
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_f64).collect())
            .unwrap_or_default();
        if pair.len() != 2 || v.as_array().map_or(0, Vec::len) != 2 {
            return Err(ConfigError::invalid("loss_weights", "expected a pair of numbers"));
        }
        if pair.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ConfigError::invalid("loss_weights", "weights must be non-negative"));
        }
        if ((pair[0] + pair[1]) - 1.0).abs() > 1e-9 {
            return Err(ConfigError::invalid("loss_weights", "weights must sum to 1"));
        }
        task_specific.loss_weights = Some([pair[0], pair[1]]);
    }
    flat.finish()?;
    Ok(TrainingConfig { general, task_specific })
}

/// Encoder hyperparameters. Validated and persisted; no network is built from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: u64,
    pub max_position_embeddings: u64,
    pub num_attention_heads: u64,
    pub num_hidden_layers: u64,
    pub hidden_size: u64,
    pub intermediate_size: u64,
}

impl ModelConfig {
    pub fn validate(self) -> Result<Self, ConfigError> {
        validate_model_config(self)
    }
}

pub fn validate_model_config(cfg: ModelConfig) -> Result<ModelConfig, ConfigError> {
    let fields: [(&'static str, u64); 6] = [
        ("vocab_size", cfg.vocab_size),
        ("max_position_embeddings", cfg.max_position_embeddings),
        ("num_attention_heads", cfg.num_attention_heads),
        ("num_hidden_layers", cfg.num_hidden_layers),
        ("hidden_size", cfg.hidden_size),
        ("intermediate_size", cfg.intermediate_size),
    ];
    if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
        return Err(ConfigError::NonPositiveField(name));
    }
    if cfg.hidden_size % cfg.num_attention_heads != 0 {
        return Err(ConfigError::HeadDivisibility {
            hidden_size: cfg.hidden_size,
            num_attention_heads: cfg.num_attention_heads,
        });
    }
    Ok(cfg)
}

/// Tokenizer training and encoding limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub max_length: usize,
    pub vocab_size: usize,
    pub min_frequency: u64,
}

impl TokenizerConfig {
    /// Special tokens plus the 256-symbol byte alphabet.
    pub const ALPHABET_FLOOR: usize = crate::tokenizer::NUM_SPECIALS + 256;

    pub fn validate(self) -> Result<Self, ConfigError> {
        if self.max_length == 0 {
            return Err(ConfigError::NonPositiveField("max_length"));
        }
        if self.min_frequency == 0 {
            return Err(ConfigError::NonPositiveField("min_frequency"));
        }
        if self.vocab_size <= Self::ALPHABET_FLOOR {
            return Err(ConfigError::invalid(
                "vocab_size",
                format!("must exceed {} (special tokens + byte alphabet)", Self::ALPHABET_FLOOR),
            ));
        }
        Ok(self)
    }
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { max_length: 512, vocab_size: 30_000, min_frequency: 2 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn map(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn splits_mlm_probability_into_task_specific() {
        let cfg = split_training_config(&map(json!({"learning_rate": 1e-4, "mlm_probability": 0.15}))).unwrap();
        assert_eq!(cfg.general.learning_rate, Some(1e-4));
        assert_eq!(cfg.task_specific.mlm_probability, Some(0.15));
        assert_eq!(cfg.general_keys(), vec!["learning_rate"]);
        assert_eq!(cfg.task_specific_keys(), vec!["mlm_probability"]);
    }

    #[test]
    fn empty_input_gives_empty_maps() {
        let cfg = split_training_config(&Map::new()).unwrap();
        assert!(cfg.general_keys().is_empty() && cfg.task_specific_keys().is_empty());
        assert_eq!(cfg, TrainingConfig::default());
    }

    #[test]
    fn range_and_unknown_key_errors() {
        let e = split_training_config(&map(json!({"mlm_probability": 1.5}))).unwrap_err();
        assert!(matches!(e, ConfigError::InvalidValue { ref key, .. } if key == "mlm_probability"));
        let e = split_training_config(&map(json!({"lerning_rate": 0.1, "seed": 1}))).unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey("lerning_rate".into()));
        assert!(split_training_config(&map(json!({"loss_weights": [0.7, 0.7]}))).is_err());
        assert!(split_training_config(&map(json!({"loss_weights": [-0.5, 1.5]}))).is_err());
        assert!(split_training_config(&map(json!({"loss_weights": [1.0]}))).is_err());
        assert!(split_training_config(&map(json!({"eval_fraction": 1.0}))).is_err());
        assert!(split_training_config(&map(json!({"num_train_epochs": 0}))).is_err());
        assert!(split_training_config(&map(json!({"optim": "rmsprop"}))).is_err());
        let ok = split_training_config(&map(json!({"loss_weights": [0.25, 0.75], "seed": -3}))).unwrap();
        assert_eq!(ok.loss_weights(), [0.25, 0.75]);
        assert_eq!(ok.general.seed, Some(-3));
    }

    #[test]
    fn general_and_task_keys_are_disjoint() {
        for k in TASK_SPECIFIC_KEYS {
            assert!(!GENERAL_KEYS.contains(k));
        }
    }

    #[test]
    fn model_config_examples() {
        let roberta_base = ModelConfig {
            vocab_size: 50265,
            max_position_embeddings: 512,
            num_attention_heads: 12,
            num_hidden_layers: 12,
            hidden_size: 768,
            intermediate_size: 3072,
        };
        assert_eq!(validate_model_config(roberta_base), Ok(roberta_base));
        let bad = ModelConfig { hidden_size: 100, ..roberta_base };
        assert_eq!(
            validate_model_config(bad),
            Err(ConfigError::HeadDivisibility { hidden_size: 100, num_attention_heads: 12 })
        );
        let small = ModelConfig {
            vocab_size: 1,
            max_position_embeddings: 1,
            num_attention_heads: 8,
            num_hidden_layers: 1,
            hidden_size: 64,
            intermediate_size: 1,
        };
        assert!(validate_model_config(small).is_ok());
        let zero = ModelConfig { num_hidden_layers: 0, ..small };
        assert_eq!(validate_model_config(zero), Err(ConfigError::NonPositiveField("num_hidden_layers")));
    }

    #[test]
    fn tokenizer_config_floor() {
        let ok = TokenizerConfig { max_length: 8, vocab_size: 262, min_frequency: 1 };
        assert!(ok.validate().is_ok());
        assert!(TokenizerConfig { vocab_size: 261, ..ok }.validate().is_err());
        assert!(TokenizerConfig { min_frequency: 0, ..ok }.validate().is_err());
        assert!(TokenizerConfig { max_length: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn flatten_nested_objects() {
        let flat = flatten(&json!({"provider": {"url": "http://x", "model": "m"}, "k": 1})).unwrap();
        assert_eq!(flat["provider.url"], "http://x");
        assert_eq!(flat["provider.model"], "m");
        assert_eq!(flat["k"], 1);
        assert!(flatten(&json!([1])).is_err());
    }

    #[test]
    fn flat_config_rejects_leftovers() {
        let mut f = FlatConfig::new(map(json!({"a": 1, "zz": 2, "b": 3})));
        f.take_u64(&["a"]).unwrap();
        assert_eq!(f.finish(), Err(ConfigError::UnknownKey("b".into())));
    }

    fn arb_training() -> impl Strategy<Value = Map<String, Value>> {
        (
            proptest::option::of(1e-6f64..1.0),
            proptest::option::of(1u64..100),
            proptest::option::of(1u64..512),
            proptest::option::of(-1000i64..1000),
            proptest::option::of(0.01f64..0.99),
            proptest::option::of(0.0f64..=1.0),
            proptest::option::of(0u32..=4),
            proptest::option::of(prop::bool::ANY),
        )
            .prop_map(|(lr, ep, bs, seed, ef, mlm, w, adam)| {
                let mut m = Map::new();
                if let Some(v) = lr {
                    m.insert("learning_rate".into(), json!(v));
                }
                if let Some(v) = ep {
                    m.insert("num_train_epochs".into(), json!(v));
                }
                if let Some(v) = bs {
                    m.insert("batch_size".into(), json!(v));
                }
                if let Some(v) = seed {
                    m.insert("seed".into(), json!(v));
                }
                if let Some(v) = ef {
                    m.insert("eval_fraction".into(), json!(v));
                }
                if let Some(v) = mlm {
                    m.insert("mlm_probability".into(), json!(v));
                }
                if let Some(q) = w {
                    let a = f64::from(q) / 4.0;
                    m.insert("loss_weights".into(), json!([a, 1.0 - a]));
                }
                if let Some(a) = adam {
                    m.insert("optim".into(), json!(if a { "adam" } else { "sgd" }));
                }
                m
            })
    }

    proptest! {
        #[test]
        fn split_is_a_union_homomorphism(a in arb_training(), b in arb_training()) {
            // restrict b to keys not in a
            let b: Map<String, Value> = b.into_iter().filter(|(k, _)| !a.contains_key(k)).collect();
            let mut union = a.clone();
            union.extend(b.clone());
            let whole = split_training_config(&union).unwrap();
            let parts = split_training_config(&a).unwrap().merged(&split_training_config(&b).unwrap());
            prop_assert_eq!(whole, parts);
        }

        #[test]
        fn split_roundtrips_through_flat_and_json(a in arb_training()) {
            let cfg = split_training_config(&a).unwrap();
            prop_assert_eq!(&split_training_config(&cfg.to_flat()).unwrap(), &cfg);
            let text = serde_json::to_string(&cfg).unwrap();
            prop_assert_eq!(serde_json::from_str::<TrainingConfig>(&text).unwrap(), cfg);
        }

        #[test]
        fn split_ignores_key_order(a in arb_training()) {
            let reversed: Map<String, Value> = a.clone().into_iter().rev().collect();
            prop_assert_eq!(split_training_config(&a).unwrap(), split_training_config(&reversed).unwrap());
        }

        #[test]
        fn model_config_roundtrip(h in 1u64..64, heads in 1u64..16, v in 1u64..100_000) {
            let cfg = ModelConfig {
                vocab_size: v,
                max_position_embeddings: 512,
                num_attention_heads: heads,
                num_hidden_layers: 2,
                hidden_size: h * heads,
                intermediate_size: 4 * h * heads,
            };
            let valid = validate_model_config(cfg).unwrap();
            let text = serde_json::to_string(&valid).unwrap();
            prop_assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), valid);
        }
    }
}
