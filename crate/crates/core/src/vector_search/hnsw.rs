//! Hierarchical navigable small-world graph over the index's vector slab.
//!
//! Similarity is the dot product of unit vectors; "closer" means larger.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SearchError, Vectors};
use crate::embeddings::dot;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HnswParams {
    /// Neighbor cap above layer 0; layer 0 allows `2 * m`.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub level_multiplier: f64,
    pub rng_seed: u64,
}

impl HnswParams {
    pub const DEFAULT_EF_CONSTRUCTION: usize = 200;
    pub const DEFAULT_EF_SEARCH: usize = 100;
    pub const DEFAULT_SEED: u64 = 42;

    pub fn new(m: usize) -> Self {
        Self {
            m,
            ef_construction: Self::DEFAULT_EF_CONSTRUCTION.max(m),
            ef_search: Self::DEFAULT_EF_SEARCH,
            level_multiplier: 1.0 / (m as f64).ln(),
            rng_seed: Self::DEFAULT_SEED,
        }
    }

    pub fn ef_construction(mut self, ef: usize) -> Self {
        self.ef_construction = ef;
        self
    }

    pub fn ef_search(mut self, ef: usize) -> Self {
        self.ef_search = ef;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(self) -> Result<Self, SearchError> {
        let bad = |field, reason: &str| Err(SearchError::InvalidParams { field, reason: reason.into() });
        if self.m < 2 {
            return bad("M", "must be at least 2");
        }
        if self.ef_construction < self.m {
            return bad("ef_construction", "must be at least M");
        }
        if self.ef_search == 0 {
            return bad("ef_search", "must be positive");
        }
        if !(self.level_multiplier.is_finite() && self.level_multiplier > 0.0) {
            return bad("level_multiplier", "must be a positive finite number");
        }
        Ok(self)
    }

    pub(crate) fn capacity(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

impl Default for HnswParams {
    fn default() -> Self {
        Self::new(16)
    }
}

/// Heap entry ordered by similarity, ties broken toward the smaller ordinal.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Near(f64, u32);

impl Eq for Near {}

impl Ord for Near {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for Near {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct HnswGraph {
    pub params: HnswParams,
    /// node → layer → neighbor ordinals
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
    rng: ChaCha8Rng,
}

impl HnswGraph {
    pub fn new(params: HnswParams) -> Self {
        Self {
            params,
            links: Vec::new(),
            entry: None,
            rng: ChaCha8Rng::seed_from_u64(params.rng_seed),
        }
    }

    /// Rebuild from stored adjacency. The level RNG is advanced past the draws
    /// already consumed, and the entry point is the first node of maximal level,
    /// which is where incremental construction leaves it.
    pub fn from_links(params: HnswParams, links: Vec<Vec<Vec<u32>>>) -> Self {
        let mut g = Self::new(params);
        for _ in 0..links.len() {
            g.draw_level();
        }
        let mut entry: Option<(usize, u32)> = None;
        for (i, l) in links.iter().enumerate() {
            if entry.is_none_or(|(top, _)| l.len() - 1 > top) {
                entry = Some((l.len() - 1, i as u32));
            }
        }
        g.entry = entry.map(|(_, i)| i);
        g.links = links;
        g
    }

    pub fn entry(&self) -> Option<u32> {
        self.entry
    }

    pub fn links(&self, node: u32) -> &[Vec<u32>] {
        &self.links[node as usize]
    }

    pub fn all_links(&self) -> &[Vec<Vec<u32>>] {
        &self.links
    }

    pub fn levels(&self) -> Vec<usize> {
        self.links.iter().map(|l| l.len() - 1).collect()
    }

    pub fn degrees(&self, layer: usize) -> Vec<usize> {
        self.links.iter().map(|l| l.get(layer).map_or(0, Vec::len)).collect()
    }

    fn draw_level(&mut self) -> usize {
        let u: f64 = 1.0 - self.rng.random::<f64>();
        (-u.ln() * self.params.level_multiplier).floor() as usize
    }

    fn top(&self) -> usize {
        self.entry.map_or(0, |e| self.links[e as usize].len() - 1)
    }

    /// Beam search on one layer. Returns up to `ef` nodes, best first.
    fn search_layer(&self, vectors: &Vectors, q: &[f32], entry_points: &[u32], ef: usize, layer: usize) -> Vec<Near> {
        let mut visited = vec![false; self.links.len()];
        let mut candidates = BinaryHeap::new();
        let mut results: BinaryHeap<std::cmp::Reverse<Near>> = BinaryHeap::new();
        for &e in entry_points {
            if !visited[e as usize] {
                visited[e as usize] = true;
                let n = Near(dot(q, vectors.get(e)), e);
                candidates.push(n);
                results.push(std::cmp::Reverse(n));
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(c) = candidates.pop() {
            let worst = results.peek().map(|r| r.0).expect("results start non-empty");
            if c < worst && results.len() >= ef {
                break;
            }
            for &nb in &self.links[c.1 as usize][layer] {
                if visited[nb as usize] {
                    continue;
                }
                visited[nb as usize] = true;
                let n = Near(dot(q, vectors.get(nb)), nb);
                let worst = results.peek().map(|r| r.0).expect("non-empty");
                if results.len() < ef || n > worst {
                    candidates.push(n);
                    results.push(std::cmp::Reverse(n));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Near> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Keep a candidate only if it is closer to the base than to every neighbor
    /// kept so far. `candidates` must be sorted best first.
    fn select_neighbors(&self, vectors: &Vectors, candidates: &[Near], cap: usize) -> Vec<u32> {
        let mut kept: Vec<u32> = Vec::with_capacity(cap);
        for c in candidates {
            if kept.len() >= cap {
                break;
            }
            let v = vectors.get(c.1);
            if kept.iter().all(|&r| dot(v, vectors.get(r)) < c.0) {
                kept.push(c.1);
            }
        }
        kept
    }

    /// Insert the node already stored at `node` in `vectors`.
    pub fn insert(&mut self, vectors: &Vectors, node: u32) {
        debug_assert_eq!(node as usize, self.links.len());
        let level = self.draw_level();
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(mut ep) = self.entry else {
            self.entry = Some(node);
            return;
        };
        let q = vectors.get(node);
        let top = self.top();
        for layer in (level + 1..=top).rev() {
            ep = self.search_layer(vectors, q, &[ep], 1, layer)[0].1;
        }
        let mut eps = vec![ep];
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(vectors, q, &eps, self.params.ef_construction, layer);
            let cap = self.params.capacity(layer);
            let chosen = self.select_neighbors(vectors, &found, cap);
            for &nb in &chosen {
                self.link(vectors, nb, node, layer, cap);
            }
            self.links[node as usize][layer] = chosen;
            eps = found.iter().map(|n| n.1).collect();
        }
        if level > top {
            self.entry = Some(node);
        }
    }

    fn link(&mut self, vectors: &Vectors, from: u32, to: u32, layer: usize, cap: usize) {
        let list = &mut self.links[from as usize][layer];
        list.push(to);
        if list.len() <= cap {
            return;
        }
        let base = vectors.get(from);
        let mut cands: Vec<Near> = list.iter().map(|&n| Near(dot(base, vectors.get(n)), n)).collect();
        cands.sort_by(|a, b| b.cmp(a));
        let pruned = self.select_neighbors(vectors, &cands, cap);
        self.links[from as usize][layer] = pruned;
    }

    /// Layer-0 candidates for `q`, best first, as (score, ordinal).
    pub fn search(&self, vectors: &Vectors, q: &[f32], ef: usize) -> Vec<(f64, u32)> {
        let Some(mut ep) = self.entry else { return Vec::new() };
        for layer in (1..=self.top()).rev() {
            ep = self.search_layer(vectors, q, &[ep], 1, layer)[0].1;
        }
        self.search_layer(vectors, q, &[ep], ef, 0)
            .into_iter()
            .map(|n| (n.0.clamp(-1.0, 1.0), n.1))
            .collect()
    }
}
