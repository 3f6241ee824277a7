use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dist_sq, DescriptorPool, IndexError, NeighborList, Reader, TopK};
use crate::features::{Descriptor, DESCRIPTOR_DIM};

const LEAF_SIZE: usize = 8;
const SPLIT_CANDIDATES: usize = 5;
const VARIANCE_SAMPLE: usize = 100;
const CACHE_MAGIC: &[u8; 4] = b"HSKD";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub num_trees: usize,
    /// Leaf-vector comparisons per query; `None` means exhaustive (exact).
    pub max_checks: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self { num_trees: 4, max_checks: Some(128), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Node {
    /// Left subtree holds coordinates `<= value` along `dim`, right `>= value`.
    Split { dim: u16, value: f32, left: u32, right: u32 },
    Leaf { start: u32, end: u32 },
}

#[derive(Debug, Clone, PartialEq)]
struct KdTree {
    nodes: Vec<Node>,
    indices: Vec<u32>,
}

/// Randomized k-d trees over one shared pool. Immutable once built.
#[derive(Debug, Clone)]
pub struct KdForest {
    pool: Arc<DescriptorPool>,
    trees: Vec<KdTree>,
    params: ForestParams,
}

impl PartialEq for KdForest {
    fn eq(&self, other: &Self) -> bool {
        self.trees == other.trees && self.params == other.params
    }
}

pub fn build_forest(pool: Arc<DescriptorPool>, num_trees: usize, seed: u64) -> Result<KdForest, IndexError> {
    KdForest::build(pool, ForestParams { num_trees, seed, ..ForestParams::default() })
}

struct TreeBuilder<'a> {
    pool: &'a DescriptorPool,
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    /// Split value chosen for the node currently being built.
    split_value: f32,
}

impl TreeBuilder<'_> {
    fn build(&mut self, idx: &mut [u32], offset: usize) -> u32 {
        let id = self.nodes.len() as u32;
        if idx.len() <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start: offset as u32, end: (offset + idx.len()) as u32 });
            return id;
        }
        self.nodes.push(Node::Leaf { start: 0, end: 0 });

        let dim = self.choose_dim(idx);
        let mid = self.partition(idx, dim);
        let value = self.split_value;
        let (lo, hi) = idx.split_at_mut(mid);
        let left = self.build(lo, offset);
        let right = self.build(hi, offset + mid);
        self.nodes[id as usize] = Node::Split { dim: dim as u16, value, left, right };
        id
    }

    fn choose_dim(&mut self, idx: &[u32]) -> usize {
        let sample = &idx[..idx.len().min(VARIANCE_SAMPLE)];
        let n = sample.len() as f64;
        let mut mean = [0.0f64; DESCRIPTOR_DIM];
        for &i in sample {
            for (m, &v) in mean.iter_mut().zip(self.pool.vector(i as usize).0.iter()) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0f64; DESCRIPTOR_DIM];
        for &i in sample {
            for ((s, &v), m) in var.iter_mut().zip(self.pool.vector(i as usize).0.iter()).zip(mean.iter()) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let mut dims: Vec<usize> = (0..DESCRIPTOR_DIM).collect();
        dims.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
        let dim = dims[self.rng.random_range(0..SPLIT_CANDIDATES)];
        self.split_value = mean[dim] as f32;
        dim
    }

    /// Partitions `idx` around the current split value; falls back to a
    /// median split when the mean leaves one side empty.
    fn partition(&mut self, idx: &mut [u32], dim: usize) -> usize {
        let pool = self.pool;
        let coord = |i: u32| pool.vector(i as usize).0[dim];
        let value = self.split_value;
        let mut mid = 0;
        for k in 0..idx.len() {
            if coord(idx[k]) < value {
                idx.swap(k, mid);
                mid += 1;
            }
        }
        if mid == 0 || mid == idx.len() {
            idx.sort_by(|&a, &b| coord(a).total_cmp(&coord(b)).then(a.cmp(&b)));
            mid = idx.len() / 2;
            self.split_value = coord(idx[mid]);
        }
        mid
    }
}

#[derive(Debug)]
struct QueueEntry {
    bound: f64,
    seq: u32,
    tree: u16,
    node: u32,
    link: u32,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    // Reversed so the std max-heap pops the smallest bound first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.bound.total_cmp(&self.bound).then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const NO_LINK: u32 = u32::MAX;

/// One step of a branch's path: the squared offset of the query from the
/// cell along `dim` once that constraint was applied.
#[derive(Debug, Clone, Copy)]
struct PathLink {
    parent: u32,
    dim: u16,
    off_sq: f64,
}

fn previous_offset(links: &[PathLink], mut link: u32, dim: u16) -> f64 {
    while link != NO_LINK {
        let l = links[link as usize];
        if l.dim == dim {
            return l.off_sq;
        }
        link = l.parent;
    }
    0.0
}

impl KdForest {
    pub fn build(pool: Arc<DescriptorPool>, params: ForestParams) -> Result<Self, IndexError> {
        if pool.is_empty() {
            return Err(IndexError::EmptyPool);
        }
        let num_trees = params.num_trees.max(1);
        let mut seeder = ChaCha8Rng::seed_from_u64(params.seed);
        let seeds: Vec<u64> = (0..num_trees).map(|_| seeder.random()).collect();
        let trees = seeds
            .into_par_iter()
            .map(|s| {
                let mut indices: Vec<u32> = (0..pool.len() as u32).collect();
                let mut builder = TreeBuilder {
                    pool: &pool,
                    nodes: Vec::new(),
                    rng: ChaCha8Rng::seed_from_u64(s),
                    split_value: 0.0,
                };
                builder.build(&mut indices, 0);
                KdTree { nodes: builder.nodes, indices }
            })
            .collect();
        Ok(Self { pool, trees, params: ForestParams { num_trees, ..params } })
    }

    pub fn pool(&self) -> &Arc<DescriptorPool> {
        &self.pool
    }

    pub fn params(&self) -> ForestParams {
        self.params
    }

    pub fn len(&self) -> usize {
        self.pool.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pool.is_empty()
    }

    /// Search with the forest's configured check budget.
    pub fn knn(&self, q: &Descriptor, k: usize) -> NeighborList {
        self.knn_search(q, k, self.params.max_checks)
    }

    /// Best-first search over all trees through one priority queue.
    ///
    /// `k` is clipped to the pool size. With `max_checks = None` the result
    /// is exact; otherwise the search stops after that many distinct leaf
    /// vectors (at least `k`) have been compared.
    pub fn knn_search(&self, q: &Descriptor, k: usize, max_checks: Option<usize>) -> NeighborList {
        let k = k.min(self.pool.len());
        let limit = max_checks.map_or(usize::MAX, |c| c.max(k));
        let mut top = TopK::new(k);
        let mut visited = vec![0u64; self.pool.len().div_ceil(64)];
        let mut links: Vec<PathLink> = Vec::new();
        let mut heap = BinaryHeap::new();
        let mut seq = 0u32;
        for t in 0..self.trees.len() {
            heap.push(QueueEntry { bound: 0.0, seq, tree: t as u16, node: 0, link: NO_LINK });
            seq += 1;
        }
        let mut checks = 0usize;

        'search: while let Some(entry) = heap.pop() {
            let worst = top.worst() as f64;
            let prune = |b: f64| b > worst * (1.0 + 1e-6) + 1e-12;
            if prune(entry.bound) || checks >= limit {
                break;
            }
            let tree = &self.trees[entry.tree as usize];
            let mut node = entry.node;
            loop {
                match tree.nodes[node as usize] {
                    Node::Split { dim, value, left, right } => {
                        let diff = q.0[dim as usize] as f64 - value as f64;
                        let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                        let new_sq = diff * diff;
                        let far_bound = entry.bound - previous_offset(&links, entry.link, dim) + new_sq;
                        if !prune(far_bound) {
                            links.push(PathLink { parent: entry.link, dim, off_sq: new_sq });
                            heap.push(QueueEntry {
                                bound: far_bound,
                                seq,
                                tree: entry.tree,
                                node: far,
                                link: (links.len() - 1) as u32,
                            });
                            seq += 1;
                        }
                        node = near;
                    }
                    Node::Leaf { start, end } => {
                        for &i in &tree.indices[start as usize..end as usize] {
                            let (word, bit) = (i as usize / 64, i as usize % 64);
                            if visited[word] >> bit & 1 == 1 {
                                continue;
                            }
                            visited[word] |= 1 << bit;
                            top.push(dist_sq(q, self.pool.vector(i as usize)), i);
                            checks += 1;
                            if checks >= limit {
                                break 'search;
                            }
                        }
                        break;
                    }
                }
            }
        }
        top.into_list()
    }

    /// Writes the versioned `HSKD` cache.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut buf = Vec::new();
        let fp = self.pool.fingerprint();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&fp.count.to_le_bytes());
        let checksum = fp.checksum.as_bytes();
        buf.extend_from_slice(&(checksum.len() as u32).to_le_bytes());
        buf.extend_from_slice(checksum);
        buf.extend_from_slice(&(self.params.num_trees as u32).to_le_bytes());
        buf.extend_from_slice(&self.params.seed.to_le_bytes());
        buf.extend_from_slice(&self.params.max_checks.map_or(u64::MAX, |c| c as u64).to_le_bytes());
        for tree in &self.trees {
            buf.extend_from_slice(&(tree.nodes.len() as u32).to_le_bytes());
            for node in &tree.nodes {
                match *node {
                    Node::Split { dim, value, left, right } => {
                        buf.push(0);
                        buf.extend_from_slice(&dim.to_le_bytes());
                        buf.extend_from_slice(&value.to_le_bytes());
                        buf.extend_from_slice(&left.to_le_bytes());
                        buf.extend_from_slice(&right.to_le_bytes());
                    }
                    Node::Leaf { start, end } => {
                        buf.push(1);
                        buf.extend_from_slice(&start.to_le_bytes());
                        buf.extend_from_slice(&end.to_le_bytes());
                    }
                }
            }
            buf.extend_from_slice(&(tree.indices.len() as u32).to_le_bytes());
            for i in &tree.indices {
                buf.extend_from_slice(&i.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&buf)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Loads a cache written by [`save`](Self::save), rejecting it when the
    /// pool fingerprint differs.
    pub fn load(path: &Path, pool: Arc<DescriptorPool>) -> Result<Self, IndexError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = Reader { buf: &bytes, pos: 0 };
        if r.take(4)? != CACHE_MAGIC {
            return Err(IndexError::Cache("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(IndexError::Cache(format!("unsupported version {version}")));
        }
        let count = r.u64()?;
        let len = r.u32()? as usize;
        let checksum = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| IndexError::Cache(e.to_string()))?;
        let fp = pool.fingerprint();
        if fp.count != count || fp.checksum != checksum {
            return Err(IndexError::FingerprintMismatch);
        }
        let num_trees = r.u32()? as usize;
        let seed = r.u64()?;
        let max_checks = match r.u64()? {
            u64::MAX => None,
            c => Some(c as usize),
        };
        let mut trees = Vec::with_capacity(num_trees);
        for _ in 0..num_trees {
            let n_nodes = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                nodes.push(match r.take(1)?[0] {
                    0 => Node::Split {
                        dim: u16::from_le_bytes(r.take(2)?.try_into().unwrap()),
                        value: f32::from_le_bytes(r.take(4)?.try_into().unwrap()),
                        left: r.u32()?,
                        right: r.u32()?,
                    },
                    1 => Node::Leaf { start: r.u32()?, end: r.u32()? },
                    t => return Err(IndexError::Cache(format!("bad node tag {t}"))),
                });
            }
            let n_idx = r.u32()? as usize;
            if n_idx != pool.len() {
                return Err(IndexError::Cache("tree does not cover the pool".into()));
            }
            let indices = (0..n_idx).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            trees.push(KdTree { nodes, indices });
        }
        Ok(Self { pool, trees, params: ForestParams { num_trees, max_checks, seed } })
    }

    #[cfg(test)]
    fn tree_indices(&self, t: usize) -> &[u32] {
        &self.trees[t].indices
    }

    #[cfg(test)]
    fn max_leaf(&self) -> usize {
        self.trees
            .iter()
            .flat_map(|t| t.nodes.iter())
            .filter_map(|n| match n {
                Node::Leaf { start, end } => Some((end - start) as usize),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }
}
