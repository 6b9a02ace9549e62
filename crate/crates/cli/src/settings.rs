//! Layered settings: defaults < environment < config file < flags.

use std::path::Path;

use anyhow::{Context, Result};
use lmforge::config::{parse_config_document, FlatConfig};
use serde_json::{Map, Value};

use crate::{ProviderArgs, TrainingArgs};

pub struct Settings {
    map: Map<String, Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let map = match path {
            None => Map::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_config_document(&text).with_context(|| format!("in config {}", p.display()))?
            }
        };
        Ok(Self { map })
    }

    /// Override `key` when the flag was given.
    pub fn set(&mut self, key: &str, flag: Option<impl Into<Value>>) -> &mut Self {
        if let Some(v) = flag {
            self.map.insert(key.to_string(), v.into());
        }
        self
    }

    /// Fill `key` from an environment variable when nothing else set it.
    fn env_fallback(&mut self, key: &str, alt: &str, var: &str) {
        if self.map.contains_key(key) || self.map.contains_key(alt) {
            return;
        }
        if let Ok(v) = std::env::var(var) {
            if !v.is_empty() {
                self.map.insert(key.to_string(), Value::String(v));
            }
        }
    }

    pub fn get_str(&self, key: &str) -> Option<String> {
        self.map.get(key).and_then(Value::as_str).map(str::to_string)
    }

    /// Provider flags only, without the environment fallback. A flag replaces
    /// both the flat and the `provider.*` spelling from the file.
    pub fn provider_flags(&mut self, p: &ProviderArgs) -> &mut Self {
        let flags: [(&str, Option<Value>); 5] = [
            ("provider_url", p.provider_url.clone().map(Value::from)),
            ("model", p.model.clone().map(Value::from)),
            ("dialect", p.dialect.clone().map(Value::from)),
            ("timeout_secs", p.timeout_secs.map(Value::from)),
            ("max_retries", p.max_retries.map(Value::from)),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                let nested = format!("provider.{}", key.trim_start_matches("provider_"));
                self.map.remove(&nested);
                self.map.insert(key.to_string(), v);
            }
        }
        self
    }

    pub fn provider(&mut self, p: &ProviderArgs) -> &mut Self {
        self.provider_flags(p);
        self.env_fallback("provider_url", "provider.url", "LMFORGE_PROVIDER_URL");
        self.env_fallback("model", "provider.model", "LMFORGE_MODEL");
        self
    }

    pub fn training(&mut self, t: &TrainingArgs) -> &mut Self {
        self.set("learning_rate", t.learning_rate)
            .set("num_train_epochs", t.num_train_epochs)
            .set("batch_size", t.batch_size)
            .set("seed", t.seed)
            .set("eval_fraction", t.eval_fraction)
            .set("optim", t.optim.clone())
            .set("max_grad_norm", t.max_grad_norm)
            .set("loss_weights", t.loss_weights.clone())
    }

    pub fn into_map(self) -> Map<String, Value> {
        self.map
    }

    pub fn into_flat(self) -> FlatConfig {
        FlatConfig::new(self.map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"provider": {"url": "mock://a", "model": "x"}, "batch_size": 4}"#).unwrap();
        let mut s = Settings::load(Some(&path)).unwrap();
        s.set("batch_size", Some(8)).set("absent", None::<u64>);
        let map = s.into_map();
        assert_eq!(map["batch_size"], json!(8));
        assert_eq!(map["provider.url"], json!("mock://a"));
        assert!(!map.contains_key("absent"));
    }

    #[test]
    fn provider_flag_replaces_nested_spelling() {
        let mut s = Settings { map: parse_config_document(r#"{"provider": {"url": "mock://a", "model": "x"}}"#).unwrap() };
        s.provider_flags(&ProviderArgs { provider_url: Some("mock://b".into()), ..Default::default() });
        let map = s.into_map();
        assert_eq!(map["provider_url"], json!("mock://b"));
        assert!(!map.contains_key("provider.url"));
        assert_eq!(map["provider.model"], json!("x"));
    }

    #[test]
    fn bad_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, "{").unwrap();
        assert!(Settings::load(Some(&path)).is_err());
        assert!(Settings::load(Some(&dir.path().join("nope.json"))).is_err());
    }
}
