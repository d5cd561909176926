//! Exhaustive cosine-similarity reference retrieval.
//!
//! Embeddings are unit norm, so cosine similarity is a dot product. Results
//! are ordered by similarity, highest first; equal similarities are ordered
//! by ascending record id.
//!
//! On-disk layout (all integers little-endian):
//!
//! ```text
//! "RASRIDX1" | dim: u32 | count: u64 |
//!   count × ( id: u64 | len: u32 | category utf-8 | len: u32 | path utf-8 | dim × f32 )
//! ```

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, normalize_f64, Embedding, EncoderSpec};
use crate::error::{RasrError, Result};
use crate::rng;

pub const INDEX_MAGIC: &[u8; 8] = b"RASRIDX1";
const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub id: u64,
    pub category: String,
    pub path: String,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHit {
    pub id: u64,
    pub category: String,
    pub path: String,
    pub similarity: f64,
}

/// Immutable searchable collection of reference embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceIndex {
    dim: usize,
    records: Vec<ReferenceRecord>,
    encoder_spec: Option<EncoderSpec>,
}

pub fn build_index(
    mut records: Vec<ReferenceRecord>,
    encoder_spec: EncoderSpec,
) -> Result<ReferenceIndex> {
    let dim = encoder_spec.dim;
    let mut seen = HashSet::with_capacity(records.len());
    for r in &mut records {
        if r.embedding.dim() != dim {
            return Err(RasrError::DimMismatch {
                expected: dim,
                actual: r.embedding.dim(),
            });
        }
        if !seen.insert(r.id) {
            return Err(RasrError::DuplicateId(r.id));
        }
        let norm = dot(&r.embedding.vector, &r.embedding.vector).sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(RasrError::InvalidInput(format!(
                "record {} embedding has norm {norm}, expected 1",
                r.id
            )));
        }
        r.embedding.source_encoder.clone_from(&encoder_spec.name);
    }
    Ok(ReferenceIndex {
        dim,
        records,
        encoder_spec: Some(encoder_spec),
    })
}

#[derive(PartialEq)]
struct Scored {
    similarity: f64,
    pos: usize,
    id: u64,
}

impl Eq for Scored {}

impl Ord for Scored {
    /// `Less` means ranked earlier.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .similarity
            .total_cmp(&self.similarity)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl ReferenceIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ReferenceRecord] {
        &self.records
    }

    pub fn encoder_spec(&self) -> Option<&EncoderSpec> {
        self.encoder_spec.as_ref()
    }

    pub fn get(&self, id: u64) -> Option<&ReferenceRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Attaches the encoder the embeddings were produced with. The index file
    /// does not carry it.
    pub fn with_encoder(mut self, spec: EncoderSpec) -> Result<Self> {
        if spec.dim != self.dim {
            return Err(RasrError::DimMismatch {
                expected: self.dim,
                actual: spec.dim,
            });
        }
        for r in &mut self.records {
            r.embedding.source_encoder = spec.name.clone();
        }
        self.encoder_spec = Some(spec);
        Ok(self)
    }

    /// Top-`k` records by cosine similarity to `q`.
    pub fn query(&self, q: &Embedding, k: usize) -> Result<Vec<RankedHit>> {
        self.query_filtered(q, k, None)
    }

    /// Like [`ReferenceIndex::query`], restricted to one category when given.
    pub fn query_filtered(
        &self,
        q: &Embedding,
        k: usize,
        category: Option<&str>,
    ) -> Result<Vec<RankedHit>> {
        self.check_query(q, k)?;
        // max-heap on rank order: the root is the worst hit kept so far
        let mut heap: BinaryHeap<Scored> = BinaryHeap::with_capacity(k + 1);
        for (pos, r) in self.records.iter().enumerate() {
            if category.is_some_and(|c| c != r.category) {
                continue;
            }
            let cand = Scored {
                similarity: dot(&q.vector, &r.embedding.vector),
                pos,
                id: r.id,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|s| self.hit(s.pos, s.similarity))
            .collect())
    }

    fn check_query(&self, q: &Embedding, k: usize) -> Result<()> {
        if self.records.is_empty() {
            return Err(RasrError::EmptyIndex);
        }
        if q.dim() != self.dim {
            return Err(RasrError::DimMismatch {
                expected: self.dim,
                actual: q.dim(),
            });
        }
        if k == 0 {
            return Err(RasrError::InvalidInput("k must be positive".into()));
        }
        Ok(())
    }

    fn hit(&self, pos: usize, similarity: f64) -> RankedHit {
        let r = &self.records[pos];
        RankedHit {
            id: r.id,
            category: r.category.clone(),
            path: r.path.clone(),
            similarity,
        }
    }
}

/// Reference semantics for [`ReferenceIndex::query`]: score everything,
/// sort everything.
pub fn brute_force_topk(records: &[ReferenceRecord], q: &Embedding, k: usize) -> Result<Vec<RankedHit>> {
    if records.is_empty() {
        return Err(RasrError::EmptyIndex);
    }
    if let Some(bad) = records.iter().find(|r| r.embedding.dim() != q.dim()) {
        return Err(RasrError::DimMismatch {
            expected: bad.embedding.dim(),
            actual: q.dim(),
        });
    }
    let mut all: Vec<RankedHit> = records
        .iter()
        .map(|r| RankedHit {
            id: r.id,
            category: r.category.clone(),
            path: r.path.clone(),
            similarity: dot(&q.vector, &r.embedding.vector),
        })
        .collect();
    all.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(Ordering::Equal)
            .then(a.id.cmp(&b.id))
    });
    all.truncate(k);
    Ok(all)
}

pub fn save_index(index: &ReferenceIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::io::write_atomic(path, &encode_index(index)?)
}

pub fn load_index(path: impl AsRef<Path>) -> Result<ReferenceIndex> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| RasrError::io(path, e))?;
    decode_index(&bytes)
}

pub fn encode_index(index: &ReferenceIndex) -> Result<Vec<u8>> {
    let dim = u32::try_from(index.dim)
        .map_err(|_| RasrError::InvalidInput("dimension exceeds u32".into()))?;
    let mut out = Vec::with_capacity(20 + index.len() * (16 + index.dim * 4));
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    for r in &index.records {
        out.extend_from_slice(&r.id.to_le_bytes());
        for s in [&r.category, &r.path] {
            let len = u32::try_from(s.len())
                .map_err(|_| RasrError::InvalidInput("string exceeds u32 length".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        for v in &r.embedding.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| RasrError::CorruptIndex(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| RasrError::CorruptIndex("string is not valid utf-8".into()))
    }
}

pub fn decode_index(bytes: &[u8]) -> Result<ReferenceIndex> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(INDEX_MAGIC.as_slice()) {
        return Err(RasrError::CorruptIndex("bad magic".into()));
    }
    let dim = r.u32()? as usize;
    let count = r.u64()?;
    let min_record = 16 + dim as u64 * 4;
    if count.saturating_mul(min_record) > (bytes.len() - r.pos) as u64 {
        return Err(RasrError::CorruptIndex(format!(
            "declared {count} records do not fit in {} bytes",
            bytes.len()
        )));
    }
    let mut records = Vec::with_capacity(count as usize);
    let mut seen = HashSet::with_capacity(count as usize);
    for _ in 0..count {
        let id = r.u64()?;
        if !seen.insert(id) {
            return Err(RasrError::CorruptIndex(format!("duplicate id {id}")));
        }
        let category = r.string()?;
        let path = r.string()?;
        let raw = r.take(dim * 4)?;
        let vector = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(ReferenceRecord {
            id,
            category,
            path,
            embedding: Embedding {
                vector,
                source_encoder: String::new(),
            },
        });
    }
    if r.pos != bytes.len() {
        return Err(RasrError::CorruptIndex(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(ReferenceIndex {
        dim,
        records,
        encoder_spec: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n_queries: usize,
    pub records: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
}

/// Uniformly random unit vector of dimension `dim`.
pub fn random_unit(rng: &mut impl rand::Rng, dim: usize) -> Embedding {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok(e) = normalize_f64(&v, "random") {
            return e;
        }
    }
}

/// Wall-clock top-1 latency over `n_queries` random unit queries.
pub fn benchmark_query(index: &ReferenceIndex, n_queries: usize, seed: u64) -> Result<LatencyStats> {
    if index.is_empty() {
        return Err(RasrError::EmptyIndex);
    }
    if n_queries == 0 {
        return Err(RasrError::InvalidInput("n_queries must be positive".into()));
    }
    let mut rng = rng::stream(seed, &[0xbe4c]);
    let queries: Vec<Embedding> = (0..n_queries).map(|_| random_unit(&mut rng, index.dim)).collect();
    let mut times = Vec::with_capacity(n_queries);
    for q in &queries {
        let start = Instant::now();
        let hits = index.query(q, 1)?;
        std::hint::black_box(hits);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / n_queries as f64;
    times.sort_by(f64::total_cmp);
    let pct = |p: f64| times[((p * (n_queries - 1) as f64).round() as usize).min(n_queries - 1)];
    Ok(LatencyStats {
        n_queries,
        records: index.len(),
        mean_ms,
        p50_ms: pct(0.5),
        p99_ms: pct(0.99),
    })
}

/// Index of `count` random unit vectors with ids `0..count`.
pub fn synthetic_index(count: usize, dim: usize, seed: u64) -> ReferenceIndex {
    let mut rng = rng::stream(seed, &[0x5147]);
    let records = (0..count as u64)
        .map(|id| ReferenceRecord {
            id,
            category: format!("c{}", id % 30),
            path: format!("synthetic/{id}.png"),
            embedding: random_unit(&mut rng, dim),
        })
        .collect();
    build_index(records, EncoderSpec::toy(dim, seed)).expect("synthetic records are valid")
}
