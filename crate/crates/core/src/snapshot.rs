//! Immutable posting-list snapshots and their binary file format.
//!
//! Items are stored as one flat list segmented by cluster: `segs[k]` is the
//! exclusive end of cluster `k`'s segment, so cluster `k` owns
//! `items[segs[k-1]..segs[k]]` (with `segs[-1] = 0`). Within a segment items
//! are ordered by bias descending, then id ascending.
//!
//! File layout, all fields little-endian:
//!
//! ```text
//! header    magic "SVQSNAP\0" | format u32 | snapshot version u64 | K u64 | dim u64 | items u64
//! codebook  K u64 | dim u64 | alpha f64 | beta f64 | s f64 | tasks u64 | eta f64 x tasks
//!           K records of (c f64, w f64 x dim)
//! postings  segs u64 x K | item ids u64 x n | biases f64 x n | embeddings f64 x (n * dim)
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;
use thiserror::Error;

use crate::codebook::{Codebook, CodebookParams};
use crate::codec::{Decoder, Encoder, Truncated};

pub const MAGIC: &[u8; 8] = b"SVQSNAP\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum SnapshotError {
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("inconsistent payload: {0}")]
    Inconsistent(String),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("io error: {0}")]
    Io(String),
}

impl From<Truncated> for SnapshotError {
    fn from(t: Truncated) -> Self {
        SnapshotError::Truncated {
            offset: t.offset,
            needed: t.needed,
        }
    }
}

impl From<std::io::Error> for SnapshotError {
    fn from(e: std::io::Error) -> Self {
        SnapshotError::Io(e.to_string())
    }
}

/// A structural violation found by [`PostingListSnapshot::check_integrity`].
#[derive(Debug, Clone, Error, PartialEq)]
pub enum IntegrityError {
    #[error("item {0} appears more than once")]
    DuplicateItem(u64),
    #[error("segment boundaries decrease at cluster {0}")]
    NonMonotoneSegments(usize),
    #[error("expected {expected} segment boundaries, found {found}")]
    SegmentCount { expected: usize, found: usize },
    #[error("last boundary {last} differs from item count {items}")]
    LastBoundary { last: u64, items: usize },
    #[error("cluster {cluster} is not ordered by bias at position {position}")]
    BiasOrder { cluster: usize, position: usize },
    #[error("array lengths disagree: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostingListSnapshot {
    pub version: u64,
    pub codebook: Codebook,
    pub items: Vec<u64>,
    pub segs: Vec<u64>,
    pub biases: Vec<f64>,
    /// Row-major `items.len() x dim` item embeddings, used by rescoring.
    pub embeddings: Vec<f64>,
}

impl PostingListSnapshot {
    pub fn k(&self) -> usize {
        self.codebook.k()
    }

    pub fn dim(&self) -> usize {
        self.codebook.dim()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn segment(&self, k: usize) -> Range<usize> {
        let start = if k == 0 { 0 } else { self.segs[k - 1] as usize };
        start..self.segs[k] as usize
    }

    pub fn cluster_items(&self, k: usize) -> &[u64] {
        &self.items[self.segment(k)]
    }

    pub fn cluster_biases(&self, k: usize) -> &[f64] {
        &self.biases[self.segment(k)]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        (0..self.k()).map(|k| self.segment(k).len()).collect()
    }

    pub fn embedding(&self, pos: usize) -> &[f64] {
        let d = self.dim();
        &self.embeddings[pos * d..(pos + 1) * d]
    }

    /// Exclusivity, segment monotonicity and per-segment bias ordering.
    pub fn check_integrity(&self) -> Result<(), IntegrityError> {
        let n = self.items.len();
        if self.biases.len() != n || self.embeddings.len() != n * self.dim() {
            return Err(IntegrityError::Shape(format!(
                "{} items, {} biases, {} embedding values",
                n,
                self.biases.len(),
                self.embeddings.len()
            )));
        }
        if self.segs.len() != self.k() {
            return Err(IntegrityError::SegmentCount {
                expected: self.k(),
                found: self.segs.len(),
            });
        }
        let mut prev = 0u64;
        for (k, &s) in self.segs.iter().enumerate() {
            if s < prev {
                return Err(IntegrityError::NonMonotoneSegments(k));
            }
            prev = s;
        }
        if prev as usize != n {
            return Err(IntegrityError::LastBoundary { last: prev, items: n });
        }
        let mut seen = HashSet::with_capacity(n);
        for &id in &self.items {
            if !seen.insert(id) {
                return Err(IntegrityError::DuplicateItem(id));
            }
        }
        for k in 0..self.k() {
            let seg = self.segment(k);
            for p in seg.start + 1..seg.end {
                let (a, b) = (self.biases[p - 1], self.biases[p]);
                let ordered = a > b || (a == b && self.items[p - 1] < self.items[p]);
                if !ordered {
                    return Err(IntegrityError::BiasOrder {
                        cluster: k,
                        position: p,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let p = self.codebook.params();
        let mut enc = Encoder::new();
        enc.bytes(MAGIC);
        enc.u32(FORMAT_VERSION);
        enc.u64(self.version);
        enc.u64(p.k as u64);
        enc.u64(p.dim as u64);
        enc.u64(self.items.len() as u64);
        encode_codebook(&mut enc, &self.codebook);
        enc.u64s(&self.segs);
        enc.u64s(&self.items);
        enc.f64s(&self.biases);
        enc.f64s(&self.embeddings);
        enc.finish()
    }

    /// Decodes a snapshot. Never returns a partially filled snapshot.
    pub fn decode(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let mut dec = Decoder::new(bytes);
        let magic = dec
            .take(MAGIC.len())
            .map_err(|_| SnapshotError::CorruptHeader("file shorter than magic".into()))?;
        if magic != MAGIC {
            return Err(SnapshotError::CorruptHeader("bad magic".into()));
        }
        let format = dec.u32()?;
        if format != FORMAT_VERSION {
            return Err(SnapshotError::VersionMismatch {
                found: format,
                expected: FORMAT_VERSION,
            });
        }
        let version = dec.u64()?;
        let k = dec.u64()?;
        let dim = dec.u64()?;
        let n = dec.u64()?;
        if k == 0 || dim == 0 {
            return Err(SnapshotError::CorruptHeader(format!("K = {k}, dim = {dim}")));
        }
        let codebook = decode_codebook(&mut dec)?;
        if codebook.k() as u64 != k || codebook.dim() as u64 != dim {
            return Err(SnapshotError::Inconsistent(format!(
                "header says K={k} dim={dim}, codebook says K={} dim={}",
                codebook.k(),
                codebook.dim()
            )));
        }
        let segs = dec.u64s(k)?;
        let items = dec.u64s(n)?;
        let biases = dec.f64s(n)?;
        let emb_len = n
            .checked_mul(dim)
            .ok_or_else(|| SnapshotError::CorruptHeader("item count overflows".into()))?;
        let embeddings = dec.f64s(emb_len)?;
        if dec.remaining() > 0 {
            return Err(SnapshotError::TrailingBytes(dec.remaining()));
        }
        Ok(Self {
            version,
            codebook,
            items,
            segs,
            biases,
            embeddings,
        })
    }

    /// Writes through a temporary file and renames it into place, so a
    /// reader never observes a half-written snapshot.
    pub fn save(&self, path: &Path) -> Result<(), SnapshotError> {
        write_atomic(path, &self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SnapshotError> {
        Self::decode(&fs::read(path)?)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub(crate) fn encode_codebook(enc: &mut Encoder, cb: &Codebook) {
    let p = cb.params();
    enc.u64(p.k as u64);
    enc.u64(p.dim as u64);
    enc.f64(p.alpha);
    enc.f64(p.beta);
    enc.f64(p.s);
    enc.u64(p.eta.len() as u64);
    enc.f64s(&p.eta);
    for k in 0..p.k {
        enc.f64(cb.counter(k));
        enc.f64s(cb.preliminary(k));
    }
}

pub(crate) fn decode_codebook(dec: &mut Decoder<'_>) -> Result<Codebook, SnapshotError> {
    let k = dec.u64()?;
    let dim = dec.u64()?;
    let alpha = dec.f64()?;
    let beta = dec.f64()?;
    let s = dec.f64()?;
    let tasks = dec.u64()?;
    let eta = dec.f64s(tasks)?;
    let k_us = dec.ensure(k, 8)?;
    let dim_us = dim as usize;
    let record = dim.checked_add(1).and_then(|r| r.checked_mul(k));
    let record = record.ok_or_else(|| SnapshotError::Inconsistent("codebook size overflows".into()))?;
    dec.ensure(record, 8)?;
    let mut counters = Vec::with_capacity(k_us);
    let mut prelim = Vec::with_capacity(k_us * dim_us);
    for _ in 0..k_us {
        counters.push(dec.f64()?);
        prelim.extend(dec.f64s(dim)?);
    }
    let params = CodebookParams {
        k: k_us,
        dim: dim_us,
        alpha,
        beta,
        s,
        eta,
    };
    Codebook::from_state(params, counters, prelim).map_err(|e| SnapshotError::Inconsistent(e.to_string()))
}

/// Publication point for the latest snapshot. Writers swap in a new `Arc`;
/// readers clone the current one and keep it for as long as they need.
#[derive(Debug, Default)]
pub struct SnapshotStore {
    current: RwLock<Option<Arc<PostingListSnapshot>>>,
}

impl SnapshotStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Publishes `snap` if its version is newer than the current one.
    /// Returns whether it was installed.
    pub fn publish(&self, snap: PostingListSnapshot) -> bool {
        let snap = Arc::new(snap);
        let mut cur = self.current.write();
        if let Some(old) = cur.as_ref() {
            if old.version >= snap.version {
                return false;
            }
        }
        *cur = Some(snap);
        true
    }

    pub fn latest(&self) -> Option<Arc<PostingListSnapshot>> {
        self.current.read().clone()
    }

    pub fn version(&self) -> Option<u64> {
        self.current.read().as_ref().map(|s| s.version)
    }
}
