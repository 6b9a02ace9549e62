//! LLM data labelling against a user-defined `label: condition` schema.
//!
//! The model is asked for a JSON array of label names. A reply that does not parse
//! (or has the wrong cardinality) gets one corrective re-prompt; a reply naming a
//! label outside the schema is rejected outright.

use std::io;
use std::sync::Arc;

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::{ChatMessage, GenerationParams, Provider, ProviderError};

/// Token budget for a label reply.
const REPLY_MAX_LENGTH: u32 = 256;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("invalid label schema: {0}")]
    InvalidSchema(String),
    #[error("text to label is empty")]
    EmptyText,
    #[error("no texts to label")]
    EmptyBatch,
    #[error("concurrency must be positive")]
    ZeroConcurrency,
    #[error("could not parse a label array from the reply after one retry: {raw:?}")]
    UnparsableResponse { raw: String },
    #[error("reply names a label that is not in the schema: {0:?}")]
    UnknownLabelInResponse(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("writing labels: {0}")]
    Output(#[from] csv::Error),
}

/// Labels in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSchema {
    labels: Vec<(String, String)>,
    multi_label: bool,
}

#[derive(Deserialize, Serialize)]
struct SchemaFile {
    labels: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    multi_label: bool,
}

impl LabelSchema {
    pub fn new<N, C>(labels: impl IntoIterator<Item = (N, C)>, multi_label: bool) -> Result<Self, LabelError>
    where
        N: Into<String>,
        C: Into<String>,
    {
        let labels: Vec<(String, String)> = labels.into_iter().map(|(n, c)| (n.into(), c.into())).collect();
        let min = if multi_label { 1 } else { 2 };
        if labels.len() < min {
            return Err(LabelError::InvalidSchema(format!(
                "{} mode needs at least {min} label(s), got {}",
                if multi_label { "multi-label" } else { "single-label" },
                labels.len()
            )));
        }
        for (i, (name, _)) in labels.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(LabelError::InvalidSchema(format!("label {i} has an empty name")));
            }
            if labels[..i].iter().any(|(n, _)| n == name) {
                return Err(LabelError::InvalidSchema(format!("duplicate label {name:?}")));
            }
        }
        Ok(Self { labels, multi_label })
    }

    /// Parse `{"labels": {name: condition, ...}, "multi_label": bool}`.
    pub fn from_json(text: &str) -> Result<Self, LabelError> {
        let file: SchemaFile = serde_json::from_str(text).map_err(|e| LabelError::InvalidSchema(e.to_string()))?;
        let labels = file
            .labels
            .into_iter()
            .map(|(k, v)| match v {
                serde_json::Value::String(c) => Ok((k, c)),
                _ => Err(LabelError::InvalidSchema(format!("condition for {k:?} must be a string"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(labels, file.multi_label)
    }

    pub fn with_multi_label(self, multi_label: bool) -> Result<Self, LabelError> {
        Self::new(self.labels, multi_label)
    }

    pub fn labels(&self) -> &[(String, String)] {
        &self.labels
    }

    pub fn multi_label(&self) -> bool {
        self.multi_label
    }

    pub fn contains(&self, name: &str) -> bool {
        self.labels.iter().any(|(n, _)| n == name)
    }

    /// The system instruction. Byte-identical for equal schemas.
    pub fn system_prompt(&self) -> String {
        let mut p = String::from(
            "You are a data labelling assistant. Assign labels to the text in the user's message.\n\
             Labels and the condition under which each applies:\n",
        );
        for (name, condition) in &self.labels {
            p.push_str(&format!("- {name}: {condition}\n"));
        }
        if self.multi_label {
            p.push_str("Assign every label whose condition holds, and at least one.\n");
        } else {
            p.push_str("Assign exactly one label.\n");
        }
        let example = &self.labels[0].0;
        p.push_str(&format!(
            "Respond with a JSON array of label names only, for example [{}]. Do not add any other text.",
            serde_json::Value::String(example.clone())
        ));
        p
    }

    pub fn messages(&self, text: &str) -> Vec<ChatMessage> {
        vec![ChatMessage::system(self.system_prompt()), ChatMessage::user(text)]
    }
}

pub const CORRECTIVE_PROMPT: &str = "Your previous reply was not a valid JSON array of label names from the list. \
Respond with only the JSON array, nothing else.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelResult {
    pub text: String,
    /// Assigned labels in schema order.
    pub labels: Vec<String>,
    /// The reply the labels were parsed from, verbatim.
    pub raw_response: String,
    /// Corrective re-prompts used (0 or 1).
    pub retries: u32,
}

enum Parsed {
    Labels(Vec<String>),
    Malformed,
    Unknown(String),
}

fn strip_fence(reply: &str) -> &str {
    let t = reply.trim();
    match t.strip_prefix("```") {
        Some(rest) => {
            let rest = rest.strip_prefix("json").unwrap_or(rest);
            rest.strip_suffix("```").unwrap_or(rest).trim()
        }
        None => t,
    }
}

fn parse_reply(schema: &LabelSchema, reply: &str) -> Parsed {
    let Ok(names) = serde_json::from_str::<Vec<String>>(strip_fence(reply)) else {
        return Parsed::Malformed;
    };
    if let Some(bad) = names.iter().find(|n| !schema.contains(n)) {
        return Parsed::Unknown(bad.clone());
    }
    let chosen: Vec<String> = schema
        .labels
        .iter()
        .filter(|(n, _)| names.contains(n))
        .map(|(n, _)| n.clone())
        .collect();
    let ok = if schema.multi_label { !chosen.is_empty() } else { chosen.len() == 1 && names.len() == 1 };
    if ok {
        Parsed::Labels(chosen)
    } else {
        Parsed::Malformed
    }
}

#[derive(Clone)]
pub struct Labeller {
    schema: LabelSchema,
    provider: Arc<dyn Provider>,
}

impl Labeller {
    pub fn new(schema: LabelSchema, provider: Arc<dyn Provider>) -> Self {
        Self { schema, provider }
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn provider(&self) -> &Arc<dyn Provider> {
        &self.provider
    }

    pub async fn label_text(&self, text: &str) -> Result<LabelResult, LabelError> {
        if text.trim().is_empty() {
            return Err(LabelError::EmptyText);
        }
        let params = GenerationParams::deterministic(REPLY_MAX_LENGTH);
        let mut messages = self.schema.messages(text);
        let mut retries = 0;
        loop {
            let reply = self.provider.complete_text(&messages, &params).await?.text;
            match parse_reply(&self.schema, &reply) {
                Parsed::Labels(labels) => {
                    return Ok(LabelResult { text: text.to_string(), labels, raw_response: reply, retries })
                }
                Parsed::Unknown(name) => return Err(LabelError::UnknownLabelInResponse(name)),
                Parsed::Malformed if retries == 0 => {
                    retries += 1;
                    messages.push(ChatMessage::assistant(reply));
                    messages.push(ChatMessage::user(CORRECTIVE_PROMPT));
                }
                Parsed::Malformed => return Err(LabelError::UnparsableResponse { raw: reply }),
            }
        }
    }

    /// Label every text with at most `concurrency` requests in flight. Results
    /// line up with `texts`; a failed item does not stop the batch.
    pub async fn label_batch(
        &self,
        texts: &[String],
        concurrency: usize,
    ) -> Result<Vec<Result<LabelResult, LabelError>>, LabelError> {
        if texts.is_empty() {
            return Err(LabelError::EmptyBatch);
        }
        if concurrency == 0 {
            return Err(LabelError::ZeroConcurrency);
        }
        let calls: Vec<_> = texts.iter().map(|t| self.label_text(t)).collect();
        Ok(futures::stream::iter(calls).buffered(concurrency).collect().await)
    }
}

/// Write `text,labels,raw_response` rows; labels are `;`-joined. Failed items
/// get an empty label cell and the error message as the response.
pub fn write_labels_csv<W: io::Write>(
    out: W,
    texts: &[String],
    results: &[Result<LabelResult, LabelError>],
) -> Result<(), LabelError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["text", "labels", "raw_response"])?;
    for (text, r) in texts.iter().zip(results) {
        match r {
            Ok(r) => w.write_record([r.text.as_str(), &r.labels.join(";"), &r.raw_response])?,
            Err(e) => w.write_record([text.as_str(), "", &format!("error: {e}")])?,
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::MockProvider;
    use std::time::Duration;

    fn sentiment() -> LabelSchema {
        LabelSchema::new(
            [("positive", "expresses satisfaction"), ("negative", "expresses dissatisfaction")],
            false,
        )
        .unwrap()
    }

    fn tickets() -> LabelSchema {
        LabelSchema::new(
            [("urgent", "needs action today"), ("billing", "about payments"), ("bug", "reports a defect")],
            true,
        )
        .unwrap()
    }

    fn labeller(schema: LabelSchema, mock: &Arc<MockProvider>) -> Labeller {
        Labeller::new(schema, mock.clone())
    }

    #[tokio::test]
    async fn single_label_from_canned_reply() {
        let mock = Arc::new(MockProvider::new(1, 8).with_canned("I love this product", &[r#"["positive"]"#]));
        let r = labeller(sentiment(), &mock).label_text("I love this product").await.unwrap();
        assert_eq!(r.labels, vec!["positive"]);
        assert_eq!(r.retries, 0);
        let req = &mock.chat_requests()[0];
        assert_eq!(req.params.temperature, 0.0);
        assert_eq!(req.messages[1].content, "I love this product");
    }

    #[tokio::test]
    async fn multi_label_keeps_schema_order() {
        let mock = Arc::new(MockProvider::new(1, 8).with_canned("charged twice", &[r#"["billing","urgent"]"#]));
        let r = labeller(tickets(), &mock).label_text("I was charged twice").await.unwrap();
        assert_eq!(r.labels, vec!["urgent", "billing"]);
    }

    #[tokio::test]
    async fn retry_then_success() {
        let mock = Arc::new(MockProvider::new(1, 8).with_canned("meh", &["maybe positive?", r#"["positive"]"#]));
        let r = labeller(sentiment(), &mock).label_text("meh").await.unwrap();
        assert_eq!(r.labels, vec!["positive"]);
        assert_eq!(r.retries, 1);
        let second = &mock.chat_requests()[1];
        assert_eq!(second.messages[2].content, "maybe positive?");
        assert_eq!(second.messages[3].content, CORRECTIVE_PROMPT);
    }

    #[tokio::test]
    async fn two_bad_replies_are_unparsable() {
        let mock = Arc::new(MockProvider::new(1, 8).with_canned("meh", &["no idea"]));
        let err = labeller(sentiment(), &mock).label_text("meh").await.unwrap_err();
        assert!(matches!(err, LabelError::UnparsableResponse { .. }));
        assert_eq!(mock.chat_requests().len(), 2);
    }

    #[tokio::test]
    async fn hallucinated_label_is_rejected() {
        let mock = Arc::new(MockProvider::new(1, 8).with_canned("ok", &[r#"["neutral"]"#]));
        let err = labeller(sentiment(), &mock).label_text("ok").await.unwrap_err();
        assert!(matches!(err, LabelError::UnknownLabelInResponse(ref n) if n == "neutral"));
    }

    #[tokio::test]
    async fn single_label_mode_rejects_two_labels_then_retries() {
        let mock = Arc::new(
            MockProvider::new(1, 8).with_canned("mixed", &[r#"["positive","negative"]"#, r#"["negative"]"#]),
        );
        let r = labeller(sentiment(), &mock).label_text("mixed").await.unwrap();
        assert_eq!(r.labels, vec!["negative"]);
        assert_eq!(r.retries, 1);
    }

    #[tokio::test]
    async fn fenced_reply_is_accepted() {
        let mock = Arc::new(MockProvider::new(1, 8).with_canned("fine", &["```json\n[\"positive\"]\n```"]));
        assert_eq!(labeller(sentiment(), &mock).label_text("fine").await.unwrap().labels, vec!["positive"]);
    }

    #[tokio::test]
    async fn batch_with_poisoned_item_and_bounded_concurrency() {
        let mock = Arc::new(
            MockProvider::new(1, 8)
                .with_canned("poison", &["not json at all"])
                .with_canned("review", &[r#"["positive"]"#]),
        );
        mock.set_delta_delay(Some(Duration::from_millis(5)));
        let texts: Vec<String> = (0..10)
            .map(|i| if i == 4 { "poison pill".to_string() } else { format!("review {i}") })
            .collect();
        let out = labeller(sentiment(), &mock).label_batch(&texts, 3).await.unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(out.iter().filter(|r| r.is_ok()).count(), 9);
        assert!(out[4].is_err());
        for (t, r) in texts.iter().zip(&out) {
            if let Ok(r) = r {
                assert_eq!(&r.text, t);
            }
        }
        assert!(mock.max_concurrent() <= 3);
    }

    #[tokio::test]
    async fn batch_preconditions() {
        let mock = Arc::new(MockProvider::new(1, 8));
        let l = labeller(sentiment(), &mock);
        assert!(matches!(l.label_batch(&[], 2).await, Err(LabelError::EmptyBatch)));
        assert!(matches!(l.label_batch(&["x".into()], 0).await, Err(LabelError::ZeroConcurrency)));
        assert!(matches!(l.label_text("  ").await, Err(LabelError::EmptyText)));
    }

    #[test]
    fn schema_rules_and_prompt_determinism() {
        assert!(LabelSchema::new([("only", "x")], false).is_err());
        assert!(LabelSchema::new([("only", "x")], true).is_ok());
        assert!(LabelSchema::new([("a", "x"), ("a", "y")], false).is_err());
        assert!(LabelSchema::new([(" ", "x"), ("b", "y")], false).is_err());
        let a = sentiment().system_prompt();
        assert_eq!(a, sentiment().system_prompt());
        let pos = a.find("- positive:").unwrap();
        let neg = a.find("- negative:").unwrap();
        assert!(pos < neg);
        assert!(a.contains("exactly one"));
        assert!(tickets().system_prompt().contains("at least one"));
    }

    #[test]
    fn schema_file_keeps_declaration_order() {
        let s = LabelSchema::from_json(r#"{"labels": {"zeta": "last letter", "alpha": "first"}, "multi_label": true}"#)
            .unwrap();
        assert_eq!(s.labels()[0].0, "zeta");
        assert!(s.multi_label());
        assert!(LabelSchema::from_json(r#"{"labels": {"a": 1, "b": "x"}}"#).is_err());
    }

    #[test]
    fn csv_output_columns() {
        let texts = vec!["a, b".to_string(), "c".to_string()];
        let results = vec![
            Ok(LabelResult {
                text: "a, b".into(),
                labels: vec!["urgent".into(), "bug".into()],
                raw_response: r#"["urgent","bug"]"#.into(),
                retries: 0,
            }),
            Err(LabelError::EmptyText),
        ];
        let mut buf = Vec::new();
        write_labels_csv(&mut buf, &texts, &results).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("text,labels,raw_response"));
        assert_eq!(lines.next(), Some(r#""a, b",urgent;bug,"[""urgent"",""bug""]""#));
        assert!(lines.next().unwrap().starts_with("c,,error:"));
    }
}
