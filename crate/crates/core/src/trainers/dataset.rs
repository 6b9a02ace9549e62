//! CSV ingestion, label encoding and seeded splits.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;

/// Bijection between label strings and `0..n`, in first-occurrence order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelEncoder {
    classes: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelEncoder {
    pub fn fit<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut enc = Self::default();
        for l in labels {
            let l = l.as_ref();
            if !enc.index.contains_key(l) {
                enc.index.insert(l.to_string(), enc.classes.len());
                enc.classes.push(l.to_string());
            }
        }
        enc
    }

    pub fn from_classes(classes: Vec<String>) -> Result<Self, String> {
        let enc = Self::fit(&classes);
        if enc.classes.len() != classes.len() {
            return Err("class list contains duplicates".into());
        }
        Ok(enc)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn encode(&self, label: &str) -> Result<usize, TrainError> {
        self.index.get(label).copied().ok_or_else(|| TrainError::UnknownLabel(label.to_string()))
    }

    pub fn encode_all<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<usize>, TrainError> {
        labels.iter().map(|l| self.encode(l.as_ref())).collect()
    }

    pub fn decode(&self, id: usize) -> Option<&str> {
        self.classes.get(id).map(String::as_str)
    }
}

impl TryFrom<Vec<String>> for LabelEncoder {
    type Error = String;
    fn try_from(v: Vec<String>) -> Result<Self, String> {
        Self::from_classes(v)
    }
}

impl From<LabelEncoder> for Vec<String> {
    fn from(e: LabelEncoder) -> Self {
        e.classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub texts: Vec<String>,
    pub labels: Vec<String>,
    pub encoder: LabelEncoder,
    /// Rows skipped because the text or the label was empty.
    pub dropped: usize,
}

impl Dataset {
    pub fn encoded(&self) -> Vec<usize> {
        self.encoder.encode_all(&self.labels).expect("encoder was fit on these labels")
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

fn csv_error(e: csv::Error) -> TrainError {
    let line = e.position().map_or(0, |p| p.line());
    TrainError::MalformedCsv { line, reason: e.to_string() }
}

/// Read an RFC 4180 CSV with a header row.
pub fn read_dataset<R: Read>(reader: R, text_column: &str, label_column: &str) -> Result<Dataset, TrainError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| TrainError::MissingColumn(name.to_string()))
    };
    let (ti, li) = (find(text_column)?, find(label_column)?);
    let mut texts = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = 0;
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let text = record.get(ti).unwrap_or("").trim();
        let label = record.get(li).unwrap_or("").trim();
        if text.is_empty() || label.is_empty() {
            dropped += 1;
            continue;
        }
        texts.push(text.to_string());
        labels.push(label.to_string());
    }
    if texts.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let encoder = LabelEncoder::fit(&labels);
    if dropped > 0 {
        tracing::info!(dropped, "skipped rows with an empty text or label");
    }
    Ok(Dataset { texts, labels, encoder, dropped })
}

pub fn load_dataset(path: &Path, text_column: &str, label_column: &str) -> Result<Dataset, TrainError> {
    read_dataset(std::fs::File::open(path)?, text_column, label_column)
}

/// Per-class seeded shuffle; each class sends `round(n_c · eval_fraction)` items to
/// the eval side, capped so that at least one stays in training. Both index lists
/// come back sorted.
pub fn stratified_split(labels: &[usize], eval_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for mut members in by_class {
        members.shuffle(&mut rng);
        let n = members.len();
        let k = ((n as f64 * eval_fraction).round() as usize).min(n.saturating_sub(1));
        eval.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    (train, eval)
}

/// Seeded split of `0..n`; `round(n · eval_fraction)` items go to eval, keeping at
/// least one for training.
pub fn random_split(n: usize, eval_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64 * eval_fraction).round() as usize).min(n.saturating_sub(1));
    let mut eval = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    train.sort_unstable();
    eval.sort_unstable();
    (train, eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_occurrence_encoding() {
        let ds = read_dataset("text,label\na,pos\nb,neg\nc,pos\n".as_bytes(), "text", "label").unwrap();
        assert_eq!(ds.encoder.classes(), &["pos", "neg"]);
        assert_eq!(ds.encoded(), vec![0, 1, 0]);
        assert_eq!(ds.encoder.decode(1), Some("neg"));
        assert!(matches!(ds.encoder.encode("meh"), Err(TrainError::UnknownLabel(_))));
    }

    #[test]
    fn missing_column() {
        let err = read_dataset("text,tag\na,b\n".as_bytes(), "text", "label").unwrap_err();
        assert!(matches!(err, TrainError::MissingColumn(ref c) if c == "label"));
    }

    #[test]
    fn quoted_commas_and_dropped_rows() {
        let csv = "label,text\npos,\"good, really good\"\n,orphan\nneg,\"said \"\"no\"\"\"\nneg,\n";
        let ds = read_dataset(csv.as_bytes(), "text", "label").unwrap();
        assert_eq!(ds.texts, vec!["good, really good", "said \"no\""]);
        assert_eq!(ds.dropped, 2);
    }

    #[test]
    fn malformed_and_empty() {
        let err = read_dataset("text,label\na,b\nc,d,e\n".as_bytes(), "text", "label").unwrap_err();
        assert!(matches!(err, TrainError::MalformedCsv { line: 3, .. }), "{err:?}");
        assert!(matches!(
            read_dataset("text,label\n,\n".as_bytes(), "text", "label"),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn stratified_split_proportions() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).chain(std::iter::once(2)).collect();
        let (train, eval) = stratified_split(&labels, 0.2, 3);
        assert_eq!(train.len() + eval.len(), labels.len());
        assert_eq!(eval.iter().filter(|&&i| labels[i] == 0).count(), 4);
        assert_eq!(eval.iter().filter(|&&i| labels[i] == 1).count(), 4);
        // a singleton class stays in training
        assert!(train.contains(&40));
        assert_eq!(stratified_split(&labels, 0.2, 3), (train, eval));
    }

    #[test]
    fn random_split_is_a_partition() {
        let (train, eval) = random_split(10, 0.3, 1);
        assert_eq!(eval.len(), 3);
        let mut all: Vec<usize> = train.iter().chain(&eval).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn encoder_serde_roundtrip() {
        let enc = LabelEncoder::fit(["b", "a", "b"]);
        let s = serde_json::to_string(&enc).unwrap();
        assert_eq!(s, r#"["b","a"]"#);
        assert_eq!(serde_json::from_str::<LabelEncoder>(&s).unwrap(), enc);
        assert!(serde_json::from_str::<LabelEncoder>(r#"["x","x"]"#).is_err());
    }
}
