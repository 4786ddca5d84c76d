//! Query-time retrieval: rank clusters, then merge their posting lists.
//!
//! An item's score is `u . e_k + b` where `e_k` is the embedding of the
//! item's cluster and `b` its bias. Inside one posting list the first term is
//! constant, so bias order is score order and a heap over list heads yields
//! the global ranking. Lists are consumed in chunks of `l` items.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::snapshot::PostingListSnapshot;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServeError {
    #[error("no snapshot has been published")]
    NoSnapshot,
    #[error("unknown user {0}")]
    UnknownUser(u64),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("no initialized clusters")]
    NoClusters,
    #[error("query vector has {got} dims, snapshot has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub u: Vec<f64>,
    pub probe: usize,
    /// Target result size `S`.
    pub target_size: usize,
    /// Chunk size `l`.
    pub chunk: usize,
    /// Keep the top `n` after re-ranking with unquantized embeddings.
    pub rescore: Option<usize>,
}

impl Query {
    pub fn new(u: Vec<f64>) -> Self {
        Self {
            u,
            probe: 64,
            target_size: 100,
            chunk: 8,
            rescore: None,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), ServeError> {
        if self.u.len() != dim {
            return Err(ServeError::DimensionMismatch {
                expected: dim,
                got: self.u.len(),
            });
        }
        if self.chunk == 0 || self.target_size == 0 || self.probe == 0 {
            return Err(ServeError::InvalidQuery(
                "probe, target size and chunk must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCluster {
    pub cluster: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub item: u64,
    pub score: f64,
    /// Position of the item inside the snapshot arrays.
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
    pub snapshot: u64,
    pub clusters_probed: usize,
    pub heap_pops: usize,
    /// Indices into `hits` where each appended chunk starts.
    pub chunk_starts: Vec<usize>,
}

impl RetrievalResult {
    pub fn items(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.item).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(score desc, id asc)`.
pub fn rank_order(a: (f64, u64), b: (f64, u64)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Initialized clusters holding at least one item, best first. Ties keep
/// index order.
pub fn score_clusters(u: &[f64], snapshot: &PostingListSnapshot) -> Result<Vec<ScoredCluster>, ServeError> {
    let cb = &snapshot.codebook;
    if u.len() != cb.dim() {
        return Err(ServeError::DimensionMismatch {
            expected: cb.dim(),
            got: u.len(),
        });
    }
    let mut out: Vec<ScoredCluster> = (0..cb.k())
        .filter(|&k| cb.is_initialized(k))
        .filter(|&k| !snapshot.segment(k).is_empty())
        .map(|k| ScoredCluster {
            cluster: k,
            score: dot(u, cb.embedding_unchecked(k)),
        })
        .collect();
    if out.is_empty() && cb.initialized_count() == 0 {
        return Err(ServeError::NoClusters);
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cluster.cmp(&b.cluster)));
    Ok(out)
}

#[derive(Debug, PartialEq)]
struct Head {
    score: f64,
    item: u64,
    list: usize,
    cursor: usize,
}

impl Eq for Head {}

impl Ord for Head {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap: "greater" pops first
        rank_order((other.score, other.item), (self.score, self.item))
    }
}

impl PartialOrd for Head {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Chunked k-way merge over the posting lists of `clusters`.
pub fn merge_sort_retrieve(
    clusters: &[ScoredCluster],
    snapshot: &PostingListSnapshot,
    target_size: usize,
    chunk: usize,
) -> RetrievalResult {
    assert!(chunk >= 1, "chunk size must be positive");
    let lists: Vec<(f64, std::ops::Range<usize>)> = clusters
        .iter()
        .map(|c| (c.score, snapshot.segment(c.cluster)))
        .collect();
    let head = |list: usize, cursor: usize| -> Option<Head> {
        let (cs, seg) = &lists[list];
        let pos = seg.start + cursor;
        (pos < seg.end).then(|| Head {
            score: cs + snapshot.biases[pos],
            item: snapshot.items[pos],
            list,
            cursor,
        })
    };

    let mut heap: BinaryHeap<Head> = (0..lists.len()).filter_map(|i| head(i, 0)).collect();
    let mut hits = Vec::with_capacity(target_size + chunk);
    let mut chunk_starts = Vec::new();
    let mut pops = 0;
    while hits.len() < target_size {
        let Some(top) = heap.pop() else { break };
        pops += 1;
        chunk_starts.push(hits.len());
        let (cs, seg) = &lists[top.list];
        let from = seg.start + top.cursor;
        let to = (from + chunk).min(seg.end);
        for pos in from..to {
            hits.push(Hit {
                item: snapshot.items[pos],
                score: cs + snapshot.biases[pos],
                position: pos,
            });
        }
        if let Some(next) = head(top.list, top.cursor + chunk) {
            heap.push(next);
        }
    }
    hits.truncate(target_size);
    chunk_starts.retain(|&s| s < hits.len());
    RetrievalResult {
        hits,
        snapshot: snapshot.version,
        clusters_probed: lists.len(),
        heap_pops: pops,
        chunk_starts,
    }
}

/// Cluster ranking, merge, and the optional re-ranking pass.
pub fn serve_query(query: &Query, snapshot: &PostingListSnapshot) -> Result<RetrievalResult, ServeError> {
    query.validate(snapshot.dim())?;
    let mut clusters = score_clusters(&query.u, snapshot)?;
    clusters.truncate(query.probe);
    let mut res = merge_sort_retrieve(&clusters, snapshot, query.target_size, query.chunk);
    if let Some(n) = query.rescore {
        for h in &mut res.hits {
            h.score = dot(&query.u, snapshot.embedding(h.position)) + snapshot.biases[h.position];
        }
        res.hits
            .sort_by(|a, b| rank_order((a.score, a.item), (b.score, b.item)));
        res.hits.truncate(n);
        res.chunk_starts.clear();
    }
    Ok(res)
}
