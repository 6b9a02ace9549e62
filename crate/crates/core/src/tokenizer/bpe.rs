//! BPE merge learning.
//!
//! Words are weighted by corpus frequency. Pair counts are maintained incrementally:
//! after each merge only the words containing the merged pair are recounted, and a
//! max-heap with lazy invalidation yields the next pair. Pair frequency counts every
//! adjacent window (so `a a a` holds `(a, a)` twice); merges apply left to right
//! without overlap.
//!
//! Ties on frequency go to the lexicographically smaller left spelling, then the
//! smaller right spelling (byte order of the vocabulary strings).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};

use serde::Serialize;

use super::{TokenizerError, TokenizerModel};
use crate::config::TokenizerConfig;

/// One training step: the pair that was merged and its frequency at that point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PairCount {
    pub left: String,
    pub right: String,
    pub count: u64,
}

#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: String,
    right: String,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Replace every non-overlapping occurrence of `pair`, scanning left to right.
pub(crate) fn merge_pair(symbols: &[u32], pair: (u32, u32), product: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            out.push(product);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

/// Learn merges from `corpus` (one text per item).
pub fn train_bpe<I, S>(corpus: I, config: TokenizerConfig) -> Result<TokenizerModel, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    train_bpe_traced(corpus, config).map(|(m, _)| m)
}

/// Like [`train_bpe`], also returning the merged pair and its count at every step.
pub fn train_bpe_traced<I, S>(
    corpus: I,
    config: TokenizerConfig,
) -> Result<(TokenizerModel, Vec<PairCount>), TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let config = config.validate()?;
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *word_counts.entry(w.to_string()).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut model = TokenizerModel::base(config);
    let mut words: Vec<(Vec<u32>, u64)> = word_counts
        .into_iter()
        .map(|(w, c)| (TokenizerModel::initial_symbols(&w), c))
        .collect();

    let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut locations: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, (symbols, c)) in words.iter().enumerate() {
        for w in symbols.windows(2) {
            let p = (w[0], w[1]);
            *counts.entry(p).or_default() += c;
            locations.entry(p).or_default().insert(wi);
        }
    }

    let candidate = |model: &TokenizerModel, pair: (u32, u32), count: u64| Candidate {
        count,
        left: model.token(pair.0).unwrap().to_string(),
        right: model.token(pair.1).unwrap().to_string(),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = counts
        .iter()
        .map(|(&p, &c)| candidate(&model, p, c))
        .collect();

    let mut trace = Vec::new();
    while model.vocab_size() < config.vocab_size {
        let best = loop {
            match heap.pop() {
                None => break None,
                Some(c) if counts.get(&c.pair) == Some(&c.count) && c.count > 0 => break Some(c),
                Some(_) => continue,
            }
        };
        let Some(best) = best else { break };
        if best.count < config.min_frequency {
            break;
        }
        let product = model.push_merge(best.pair.0, best.pair.1);
        trace.push(PairCount { left: best.left, right: best.right, count: best.count });

        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        let mut affected: Vec<usize> = locations.remove(&best.pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let (symbols, c) = &words[wi];
            let c = *c;
            let merged = merge_pair(symbols, best.pair, product);
            if merged.len() == symbols.len() {
                continue;
            }
            for w in symbols.windows(2) {
                let p = (w[0], w[1]);
                if let Some(n) = counts.get_mut(&p) {
                    *n -= c;
                }
                touched.insert(p);
            }
            for w in merged.windows(2) {
                let p = (w[0], w[1]);
                *counts.entry(p).or_default() += c;
                locations.entry(p).or_default().insert(wi);
                touched.insert(p);
            }
            words[wi].0 = merged;
        }
        counts.remove(&best.pair);
        for p in touched {
            if let Some(&n) = counts.get(&p) {
                if n > 0 {
                    heap.push(candidate(&model, p, n));
                }
            }
        }
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::super::{canonicalize, BASE_VOCAB_SIZE};
    use super::*;

    /// Brute-force oracle: recount all pairs from scratch at every step.
    fn oracle(corpus: &[&str], config: TokenizerConfig) -> Vec<PairCount> {
        let chars = super::super::byte_chars();
        let mut words: Vec<(Vec<String>, u64)> = Vec::new();
        let mut seen: BTreeMap<String, u64> = BTreeMap::new();
        for line in corpus {
            for w in line.split_whitespace() {
                *seen.entry(w.to_string()).or_default() += 1;
            }
        }
        for (w, c) in seen {
            let mut s: Vec<String> = w.bytes().map(|b| chars[b as usize].to_string()).collect();
            s.push(super::super::END_OF_WORD.to_string());
            words.push((s, c));
        }
        let mut vocab: HashSet<String> = HashSet::new();
        let mut size = BASE_VOCAB_SIZE;
        let mut steps = Vec::new();
        while size < config.vocab_size {
            let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
            for (s, c) in &words {
                for w in s.windows(2) {
                    *counts.entry((w[0].clone(), w[1].clone())).or_default() += c;
                }
            }
            // max count; BTreeMap iteration is ascending so the first max wins ties
            let Some(((l, r), n)) = counts
                .iter()
                .fold(None::<(&(String, String), u64)>, |acc, (k, &v)| match acc {
                    Some((_, best)) if best >= v => acc,
                    _ => Some((k, v)),
                })
            else {
                break;
            };
            if n < config.min_frequency {
                break;
            }
            let (l, r) = (l.clone(), r.clone());
            let joined = format!("{l}{r}");
            if vocab.insert(joined.clone()) {
                size += 1;
            }
            for (s, _) in words.iter_mut() {
                let mut out = Vec::new();
                let mut i = 0;
                while i < s.len() {
                    if i + 1 < s.len() && s[i] == l && s[i + 1] == r {
                        out.push(joined.clone());
                        i += 2;
                    } else {
                        out.push(s[i].clone());
                        i += 1;
                    }
                }
                *s = out;
            }
            steps.push(PairCount { left: l, right: r, count: n });
        }
        steps
    }

    fn cfg(extra: usize, min_frequency: u64) -> TokenizerConfig {
        TokenizerConfig { max_length: 128, vocab_size: BASE_VOCAB_SIZE + extra, min_frequency }
    }

    #[test]
    fn low_lower_lowest_matches_oracle() {
        let corpus = ["low low low lower lowest"];
        let config = cfg(3, 2);
        let (model, trace) = train_bpe_traced(corpus, config).unwrap();
        let expected = oracle(&corpus, config);
        assert_eq!(trace, expected);
        // l-o occurs in all five words
        assert_eq!((trace[0].left.as_str(), trace[0].right.as_str(), trace[0].count), ("l", "o", 5));
        assert_eq!(model.vocab_size(), BASE_VOCAB_SIZE + 3);
    }

    #[test]
    fn threshold_exhaustion_means_no_merges() {
        let model = train_bpe(["abc def"], cfg(50, 2)).unwrap();
        assert!(model.merge_ids().is_empty());
        assert_eq!(model.vocab_size(), BASE_VOCAB_SIZE);
    }

    #[test]
    fn repeated_word_collapses_to_one_token() {
        let corpus = ["aaaa aaaa"];
        let config = cfg(10, 1);
        let (model, trace) = train_bpe_traced(corpus, config).unwrap();
        assert_eq!(trace, oracle(&corpus, config));
        let ids = model.encode_word("aaaa");
        assert_eq!(ids.len(), 1, "{:?}", model.merges());
        assert_eq!(model.token(ids[0]), Some("aaaa‹/w›"));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(train_bpe(["   ", ""], cfg(5, 1)), Err(TokenizerError::EmptyCorpus)));
    }

    #[test]
    fn deterministic_and_matches_oracle_on_prose() {
        let corpus = [
            "the quick brown fox jumps over the lazy dog",
            "the lazy dog sleeps; the quick fox runs",
            "brown dogs and brown foxes",
        ];
        let config = cfg(40, 2);
        let a = train_bpe_traced(corpus, config).unwrap();
        let b = train_bpe_traced(corpus, config).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, oracle(&corpus, config));
    }

    #[test]
    fn roundtrip_on_training_lines() {
        let corpus = ["hello   world", "héllo wörld\tagain", "  padded  "];
        let model = train_bpe(corpus, cfg(30, 1)).unwrap();
        for line in corpus {
            let ids = model.encode(line);
            assert_eq!(model.decode(&ids).unwrap(), canonicalize(line));
            assert_eq!(model.encode(&model.decode(&ids).unwrap()), ids);
        }
    }
}
