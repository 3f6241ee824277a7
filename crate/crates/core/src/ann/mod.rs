//! Nearest-neighbor search over descriptor pools: a randomized k-d tree
//! forest with shared-queue prioritized search, and the exhaustive scan it
//! is checked against.

mod brute;
mod kdforest;
mod pool;

use thiserror::Error;

pub use brute::brute_force_knn;
pub use kdforest::{build_forest, ForestParams, KdForest};
pub use pool::{dist_sq, DescriptorPool, ImageId, Owner, PoolFingerprint};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("descriptor pool is empty")]
    EmptyPool,
    #[error("pool ownership: {0}")]
    Ownership(String),
    #[error("index cache: {0}")]
    Cache(String),
    #[error("index cache was built for a different pool")]
    FingerprintMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Neighbors sorted by non-decreasing squared distance (ties by index).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborList {
    pub indices: Vec<u32>,
    pub distances_sq: Vec<f32>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f32)> + '_ {
        self.indices.iter().copied().zip(self.distances_sq.iter().copied())
    }

    /// Keeps the `k` smallest `(distance, index)` pairs seen so far.
    pub(crate) fn from_sorted(mut pairs: Vec<(f32, u32)>) -> Self {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Self {
            indices: pairs.iter().map(|p| p.1).collect(),
            distances_sq: pairs.iter().map(|p| p.0).collect(),
        }
    }
}

/// Bounded max-heap of the best `k` candidates under `(distance, index)` order.
#[derive(Debug)]
pub(crate) struct TopK {
    k: usize,
    heap: std::collections::BinaryHeap<Candidate>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate(f32, u32);

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        Self { k, heap: std::collections::BinaryHeap::with_capacity(k + 1) }
    }

    #[inline]
    pub(crate) fn push(&mut self, dist: f32, idx: u32) {
        if self.k == 0 {
            return;
        }
        let c = Candidate(dist, idx);
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if c < *self.heap.peek().expect("non-empty") {
            self.heap.pop();
            self.heap.push(c);
        }
    }

    pub(crate) fn is_full(&self) -> bool {
        self.heap.len() >= self.k
    }

    /// Current k-th best distance, `+∞` until full.
    pub(crate) fn worst(&self) -> f32 {
        if self.is_full() {
            self.heap.peek().map_or(f32::INFINITY, |c| c.0)
        } else {
            f32::INFINITY
        }
    }

    pub(crate) fn into_list(self) -> NeighborList {
        NeighborList::from_sorted(self.heap.into_iter().map(|c| (c.0, c.1)).collect())
    }
}

/// Little-endian cursor over a cache file.
pub(crate) struct Reader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| IndexError::Cache("truncated cache".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
