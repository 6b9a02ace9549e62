//! Byte-level BPE tokenizer and the masked-language-model collator.
//!
//! Id layout:
//!
//! | ids        | tokens                                   |
//! |------------|------------------------------------------|
//! | 0..=4      | `‹pad›` `‹unk›` `‹s›` `‹/s›` `‹mask›`    |
//! | 5..=260    | the 256 byte values                      |
//! | 261        | end-of-word marker `‹/w›`                |
//! | 262..      | merge products, in training order        |
//!
//! Byte tokens are spelled with the GPT-2 printable byte mapping so that `vocab.json`
//! and `merges.txt` are plain UTF-8. Special tokens and the word marker use `‹ ›`,
//! which no byte spelling can produce, so merge products never collide with them.
//!
//! Pre-tokenization splits on Unicode whitespace. Decoding joins words with single
//! spaces, so `decode(encode(x))` equals `x` with whitespace runs collapsed and the
//! ends trimmed.

mod bpe;
mod masking;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, TokenizerConfig};

pub use bpe::{train_bpe, train_bpe_traced, PairCount};
pub use masking::{mask_batch, mask_tokens, MaskedSequence, MaskingCollator, MaskingConfig, IGNORE_INDEX};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["‹pad›", "‹unk›", "‹s›", "‹/s›", "‹mask›"];
pub const END_OF_WORD: &str = "‹/w›";
pub const END_OF_WORD_ID: u32 = (NUM_SPECIALS + 256) as u32;
/// Specials, bytes and the end-of-word marker.
pub const BASE_VOCAB_SIZE: usize = NUM_SPECIALS + 256 + 1;

const FORMAT_HEADER: &str = "#version: lmforge-bpe 1";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus contains no words")]
    EmptyCorpus,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("token id {0} is not in the vocabulary")]
    UnknownTokenId(u32),
    #[error("tokenizer file is invalid: {0}")]
    InvalidFile(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// GPT-2 byte → printable char mapping.
pub(crate) fn byte_chars() -> [char; 256] {
    let mut out = ['\0'; 256];
    let printable = |b: u32| (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
    let mut extra = 0u32;
    for b in 0..256u32 {
        out[b as usize] = if printable(b) {
            char::from_u32(b).unwrap()
        } else {
            extra += 1;
            char::from_u32(255 + extra).unwrap()
        };
    }
    out
}

pub(crate) fn byte_token(b: u8) -> u32 {
    NUM_SPECIALS as u32 + u32::from(b)
}

/// Collapse whitespace runs to single spaces and trim the ends.
pub fn canonicalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerModel {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    merges: Vec<(u32, u32)>,
    /// pair → (rank, product id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
    /// Decoded bytes per id, and whether the token closes a word.
    surface: Vec<(Vec<u8>, bool)>,
    config: TokenizerConfig,
}

impl TokenizerModel {
    /// Base model: specials, bytes and the word marker, no merges.
    pub(crate) fn base(config: TokenizerConfig) -> Self {
        let chars = byte_chars();
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(chars.iter().map(|c| c.to_string()));
        tokens.push(END_OF_WORD.to_string());
        let mut m = Self {
            index: HashMap::new(),
            tokens: Vec::new(),
            merges: Vec::new(),
            ranks: HashMap::new(),
            surface: Vec::new(),
            config,
        };
        for t in tokens {
            m.intern(t);
        }
        m
    }

    fn intern(&mut self, token: String) -> u32 {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.surface.push(surface_of(&token, id));
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Record a merge; returns the product id (existing when the spelling is already known).
    pub(crate) fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let spelled = format!("{}{}", self.tokens[left as usize], self.tokens[right as usize]);
        let id = self.intern(spelled);
        self.ranks.insert((left, right), (self.merges.len(), id));
        self.merges.push((left, right));
        id
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Merge rules as token spellings, in training order.
    pub fn merges(&self) -> Vec<(String, String)> {
        self.merges
            .iter()
            .map(|&(l, r)| (self.tokens[l as usize].clone(), self.tokens[r as usize].clone()))
            .collect()
    }

    pub fn merge_ids(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Symbols of one whitespace-free word before any merge.
    pub(crate) fn initial_symbols(word: &str) -> Vec<u32> {
        let mut s: Vec<u32> = word.bytes().map(byte_token).collect();
        s.push(END_OF_WORD_ID);
        s
    }

    /// Apply merges by rank until none applies.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut symbols = Self::initial_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, id)| (rank, (w[0], w[1]), id)))
                .min_by_key(|&(rank, _, _)| rank);
            let Some((_, pair, id)) = best else {
                return symbols;
            };
            symbols = bpe::merge_pair(&symbols, pair, id);
        }
    }

    /// `[bos, tokens…, eos]`, truncated to `max_length` with `eos` kept last.
    pub fn encode_with_limit(&self, text: &str, max_length: usize) -> Vec<u32> {
        let mut ids = vec![BOS_ID];
        for word in text.split_whitespace() {
            ids.extend(self.encode_word(word));
        }
        ids.push(EOS_ID);
        if ids.len() > max_length {
            ids.truncate(max_length.saturating_sub(1));
            ids.push(EOS_ID);
        }
        ids
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_with_limit(text, self.config.max_length)
    }

    /// Inverse of [`encode`](Self::encode) up to whitespace canonicalization.
    /// Special tokens are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let (surface, ends_word) = self
                .surface
                .get(id as usize)
                .ok_or(TokenizerError::UnknownTokenId(id))?;
            if Self::is_special(id) {
                continue;
            }
            bytes.extend_from_slice(surface);
            if *ends_word {
                bytes.push(b' ');
            }
        }
        while bytes.last() == Some(&b' ') {
            bytes.pop();
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Write `vocab.json` and `merges.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TokenizerError> {
        std::fs::create_dir_all(dir)?;
        let mut vocab = String::from("{\n");
        for (id, tok) in self.tokens.iter().enumerate() {
            let key = serde_json::to_string(tok).expect("string serializes");
            let sep = if id + 1 == self.tokens.len() { "" } else { "," };
            vocab.push_str(&format!("  {key}: {id}{sep}\n"));
        }
        vocab.push_str("}\n");
        std::fs::write(dir.join("vocab.json"), vocab)?;

        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("merges.txt"))?);
        writeln!(
            f,
            "{FORMAT_HEADER} max_length={} vocab_size={} min_frequency={}",
            self.config.max_length, self.config.vocab_size, self.config.min_frequency
        )?;
        for (l, r) in self.merges() {
            writeln!(f, "{l} {r}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TokenizerError> {
        let bad = |m: String| TokenizerError::InvalidFile(m);
        let vocab_raw = std::fs::read_to_string(dir.join("vocab.json"))?;
        let vocab: HashMap<String, u32> =
            serde_json::from_str(&vocab_raw).map_err(|e| bad(format!("vocab.json: {e}")))?;
        let merges_raw = std::fs::read_to_string(dir.join("merges.txt"))?;
        let mut lines = merges_raw.lines();
        let header = lines.next().ok_or_else(|| bad("merges.txt is empty".into()))?;
        let rest = header
            .strip_prefix(FORMAT_HEADER)
            .ok_or_else(|| bad(format!("unsupported merges.txt header {header:?}")))?;
        let mut config = TokenizerConfig::default();
        for kv in rest.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("header field {kv:?}")))?;
            let n: u64 = v.parse().map_err(|_| bad(format!("header field {kv:?}")))?;
            match k {
                "max_length" => config.max_length = n as usize,
                "vocab_size" => config.vocab_size = n as usize,
                "min_frequency" => config.min_frequency = n,
                _ => return Err(bad(format!("unknown header field {k:?}"))),
            }
        }

        let mut model = Self::base(config);
        for (i, line) in lines.enumerate() {
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("merges.txt line {}: expected `left right`", i + 2)))?;
            let (Some(li), Some(ri)) = (model.token_id(l), model.token_id(r)) else {
                return Err(bad(format!("merges.txt line {}: unknown symbol", i + 2)));
            };
            model.push_merge(li, ri);
        }
        if model.tokens.len() != vocab.len() {
            return Err(bad(format!(
                "vocab.json has {} tokens but merges produce {}",
                vocab.len(),
                model.tokens.len()
            )));
        }
        for (tok, id) in &vocab {
            if model.index.get(tok) != Some(id) {
                return Err(bad(format!("vocab.json entry {tok:?} → {id} disagrees with merges")));
            }
        }
        Ok(model)
    }
}

fn surface_of(token: &str, id: u32) -> (Vec<u8>, bool) {
    if (id as usize) < NUM_SPECIALS {
        return (Vec::new(), false);
    }
    let (body, ends_word) = match token.strip_suffix(END_OF_WORD) {
        Some(b) => (b, true),
        None => (token, false),
    };
    let chars = byte_chars();
    let bytes = body
        .chars()
        .map(|c| chars.iter().position(|&x| x == c).expect("byte spelling") as u8)
        .collect();
    (bytes, ends_word)
}

/// Task handle produced by the factory for `tokenizer-trainer`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerTrainer {
    pub config: TokenizerConfig,
}

impl TokenizerTrainer {
    pub fn new(config: TokenizerConfig) -> Result<Self, ConfigError> {
        Ok(Self { config: config.validate()? })
    }

    pub fn train<I, S>(&self, corpus: I) -> Result<TokenizerModel, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        train_bpe(corpus, self.config)
    }
}
