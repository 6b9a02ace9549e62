//! Reading the text files the subcommands consume.

use std::path::Path;

use anyhow::{bail, Context, Result};

/// One CSV row: the text, an optional id, and the remaining columns.
pub struct Row {
    pub text: String,
    pub id: Option<String>,
    pub extra: Vec<(String, String)>,
}

/// Read rows with a non-empty `text_col` from a headed CSV.
pub fn read_rows(path: &Path, text_col: &str, id_col: Option<&str>) -> Result<Vec<Row>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = rdr.headers().with_context(|| format!("reading header of {}", path.display()))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .with_context(|| format!("{}: no column named {name:?}", path.display()))
    };
    let ti = find(text_col)?;
    let ii = id_col.map(find).transpose()?;
    let mut rows = Vec::new();
    for (n, record) in rdr.records().enumerate() {
        let record = record.with_context(|| format!("{}: row {}", path.display(), n + 2))?;
        let text = record.get(ti).unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let extra = headers
            .iter()
            .zip(record.iter())
            .enumerate()
            .filter(|(i, _)| *i != ti && Some(*i) != ii)
            .map(|(_, (h, v))| (h.trim().to_string(), v.to_string()))
            .collect();
        rows.push(Row { text: text.to_string(), id: ii.and_then(|i| record.get(i)).map(str::to_string), extra });
    }
    if rows.is_empty() {
        bail!("{}: no rows with a non-empty {text_col:?} column", path.display());
    }
    Ok(rows)
}

pub fn read_texts(path: &Path, text_col: &str) -> Result<Vec<String>> {
    Ok(read_rows(path, text_col, None)?.into_iter().map(|r| r.text).collect())
}

/// Non-blank lines, trimmed.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// Whitespace-separated token ids, one sequence per line.
pub fn read_id_sequences(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split_whitespace()
                .map(|t| t.parse::<u32>().with_context(|| format!("{} line {}: bad token id {t:?}", path.display(), n + 1)))
                .collect()
        })
        .collect()
}
