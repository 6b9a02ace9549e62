//! Binary index file.
//!
//! All integers little-endian:
//!
//! ```text
//! magic "LMFIDX1\0" | u32 version | u32 dim | u64 count | u32 backend (0 flat, 1 hnsw)
//! [hnsw] u32 M | u32 ef_construction | f64 level_multiplier | u64 rng_seed
//! count × dim × f32                                   normalized vectors
//! count × (u64 doc_id | u32 len | text | u32 len | metadata JSON)
//! [hnsw] count × (u8 max_level | per level: u32 degree | degree × u32 ordinal)
//! u32 CRC32 of everything above
//! ```
//!
//! `ef_search` is a query-time setting and is not stored; loaded HNSW indexes
//! start at [`HnswParams::DEFAULT_EF_SEARCH`].

use std::io::Write;
use std::path::Path;

use super::hnsw::HnswGraph;
use super::{Graph, HnswParams, Metadata, SearchError, StoredDoc, VectorIndex, Vectors};
use crate::util::{read_file, verify_crc, ByteReader, ShortRead};

pub const MAGIC: &[u8; 8] = b"LMFIDX1\0";
pub const FORMAT_VERSION: u32 = 1;

const TAG_FLAT: u32 = 0;
const TAG_HNSW: u32 = 1;

fn corrupt(offset: usize, reason: impl Into<String>) -> SearchError {
    SearchError::CorruptIndex { offset, reason: reason.into() }
}

impl From<ShortRead> for SearchError {
    fn from(e: ShortRead) -> Self {
        corrupt(e.offset, format!("truncated: needed {} more bytes", e.wanted))
    }
}

impl VectorIndex {
    /// Serialize. Tombstones are compacted first, so `self` afterwards answers
    /// queries exactly as the loaded copy will.
    pub fn to_bytes(&mut self) -> Vec<u8> {
        self.compact();
        let n = self.docs.len();
        let mut out = Vec::with_capacity(64 + n * (self.dim * 4 + 32));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        match &self.graph {
            Graph::Flat => out.extend_from_slice(&TAG_FLAT.to_le_bytes()),
            Graph::Hnsw(g) => {
                let p = g.params;
                out.extend_from_slice(&TAG_HNSW.to_le_bytes());
                out.extend_from_slice(&(p.m as u32).to_le_bytes());
                out.extend_from_slice(&(p.ef_construction as u32).to_le_bytes());
                out.extend_from_slice(&p.level_multiplier.to_le_bytes());
                out.extend_from_slice(&p.rng_seed.to_le_bytes());
            }
        }
        for x in &self.vectors.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for d in &self.docs {
            out.extend_from_slice(&d.doc_id.to_le_bytes());
            out.extend_from_slice(&(d.text.len() as u32).to_le_bytes());
            out.extend_from_slice(d.text.as_bytes());
            let meta = serde_json::to_vec(&d.metadata).expect("metadata serializes");
            out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
            out.extend_from_slice(&meta);
        }
        if let Graph::Hnsw(g) = &self.graph {
            for node in g.all_links() {
                out.push((node.len() - 1) as u8);
                for layer in node {
                    out.extend_from_slice(&(layer.len() as u32).to_le_bytes());
                    for &nb in layer {
                        out.extend_from_slice(&nb.to_le_bytes());
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn save(&mut self, path: &Path) -> Result<(), SearchError> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SearchError> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, SearchError> {
        if buf.len() < MAGIC.len() {
            return Err(corrupt(0, "file shorter than the magic number"));
        }
        if &buf[..8] != MAGIC {
            return Err(SearchError::VersionMismatch(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&buf[..8])
            )));
        }
        let body = verify_crc(buf).map_err(|at| corrupt(at, "checksum mismatch"))?;
        let mut r = ByteReader::new(body);
        r.take(8)?;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(SearchError::VersionMismatch(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let dim_at = r.offset();
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(corrupt(dim_at, "dimension is zero"));
        }
        let count_at = r.offset();
        let count = r.u64()?;
        // every node needs at least its vector and a doc header
        if count.saturating_mul(dim as u64 * 4 + 16) > r.remaining() as u64 {
            return Err(corrupt(count_at, format!("count {count} does not fit in the file")));
        }
        let count = count as usize;
        let tag_at = r.offset();
        let params = match r.u32()? {
            TAG_FLAT => None,
            TAG_HNSW => {
                let at = r.offset();
                let m = r.u32()? as usize;
                let ef_construction = r.u32()? as usize;
                let level_multiplier = r.f64()?;
                let rng_seed = r.u64()?;
                let p = HnswParams {
                    m,
                    ef_construction,
                    ef_search: HnswParams::DEFAULT_EF_SEARCH,
                    level_multiplier,
                    rng_seed,
                }
                .validate()
                .map_err(|e| corrupt(at, e.to_string()))?;
                Some(p)
            }
            other => return Err(corrupt(tag_at, format!("unknown backend tag {other}"))),
        };

        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            let at = r.offset();
            let x = r.f32()?;
            if !x.is_finite() {
                return Err(corrupt(at, "non-finite vector component"));
            }
            data.push(x);
        }

        let mut docs = Vec::with_capacity(count);
        let mut ordinals = std::collections::HashMap::with_capacity(count);
        for i in 0..count {
            let at = r.offset();
            let doc_id = r.u64()?;
            if ordinals.insert(doc_id, i as u32).is_some() {
                return Err(corrupt(at, format!("duplicate doc_id {doc_id}")));
            }
            let len = r.u32()? as usize;
            let text_at = r.offset();
            let text = std::str::from_utf8(r.take(len)?)
                .map_err(|e| corrupt(text_at, format!("text is not UTF-8: {e}")))?
                .to_string();
            let len = r.u32()? as usize;
            let meta_at = r.offset();
            let metadata: Metadata =
                serde_json::from_slice(r.take(len)?).map_err(|e| corrupt(meta_at, format!("metadata: {e}")))?;
            docs.push(StoredDoc { doc_id, text, metadata });
        }

        let graph = match params {
            None => Graph::Flat,
            Some(p) => {
                let mut links = Vec::with_capacity(count);
                for _ in 0..count {
                    let max_level = r.u8()? as usize;
                    let mut node = Vec::with_capacity(max_level + 1);
                    for layer in 0..=max_level {
                        let at = r.offset();
                        let degree = r.u32()? as usize;
                        if degree > p.capacity(layer) {
                            return Err(corrupt(at, format!("degree {degree} exceeds the layer {layer} cap")));
                        }
                        let mut nbs = Vec::with_capacity(degree);
                        for _ in 0..degree {
                            let at = r.offset();
                            let nb = r.u32()?;
                            if nb as usize >= count {
                                return Err(corrupt(at, format!("neighbor ordinal {nb} out of range")));
                            }
                            nbs.push(nb);
                        }
                        node.push(nbs);
                    }
                    links.push(node);
                }
                for (i, node) in links.iter().enumerate() {
                    for (layer, nbs) in node.iter().enumerate() {
                        if nbs.iter().any(|&nb| links[nb as usize].len() <= layer) {
                            return Err(corrupt(r.offset(), format!("node {i} links above a neighbor's top layer")));
                        }
                    }
                }
                Graph::Hnsw(HnswGraph::from_links(p, links))
            }
        };
        if r.remaining() != 0 {
            return Err(corrupt(r.offset(), "trailing bytes before the checksum"));
        }

        Ok(VectorIndex {
            dim,
            docs,
            vectors: Vectors { dim, data },
            ordinals,
            deleted: vec![false; count],
            live: count,
            graph,
        })
    }
}
