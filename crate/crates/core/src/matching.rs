//! Match sets between a query and database images: one-vs-one ratio-test
//! matching, and one-vs-many competitive matching over a shared index.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ann::{DescriptorPool, ForestParams, ImageId, KdForest, NeighborList};
use crate::features::{Descriptor, FeatureSet};
use crate::pq::PqIndex;

/// Guard for zero squared distances in ratio-style scores.
pub const EPSILON: f64 = 1e-8;
/// Default ratio threshold on squared distances (1.6²).
pub const DEFAULT_T_RATIO: f64 = 2.56;
/// Query sizes up to this many descriptors are searched exactly in 1v1.
pub const EXACT_QUERY_LIMIT: usize = 2000;
/// Extra neighbors fetched so self-owned hits can be skipped.
pub const SELF_EXCLUSION_PAD: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("delta requires 0 <= p <= norm, got p={p}, norm={norm}")]
    Contract { p: f64, norm: f64 },
    #[error("database has {available} foreign descriptors, need at least {needed}")]
    InsufficientDatabase { needed: usize, available: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchTriple {
    pub db_index: u32,
    pub query_index: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchSet {
    pub image_id: ImageId,
    pub triples: Vec<MatchTriple>,
}

impl MatchSet {
    pub fn new(image_id: ImageId) -> Self {
        Self { image_id, triples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ScoringFn {
    #[serde(rename = "LNBNN")]
    Lnbnn,
    #[serde(rename = "ratio")]
    Ratio,
    #[default]
    #[serde(rename = "lnrat")]
    Lnrat,
    #[serde(rename = "count")]
    Count,
}

impl ScoringFn {
    pub const ALL: [ScoringFn; 4] = [ScoringFn::Lnbnn, ScoringFn::Ratio, ScoringFn::Lnrat, ScoringFn::Count];

    pub fn name(self) -> &'static str {
        match self {
            ScoringFn::Lnbnn => "LNBNN",
            ScoringFn::Ratio => "ratio",
            ScoringFn::Lnrat => "lnrat",
            ScoringFn::Count => "count",
        }
    }
}

impl std::str::FromStr for ScoringFn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScoringFn::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown scoring function {s:?} (LNBNN, ratio, lnrat, count)"))
    }
}

impl std::fmt::Display for ScoringFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Score of neighbor `p` against the normalizing `(k+1)`-th neighbor, both
/// given as squared distances from the query descriptor.
pub fn delta(f: ScoringFn, dist_sq_p: f64, dist_sq_norm: f64) -> Result<f64, MatchError> {
    if !(0.0 <= dist_sq_p && dist_sq_p <= dist_sq_norm) || !dist_sq_norm.is_finite() {
        return Err(MatchError::Contract { p: dist_sq_p, norm: dist_sq_norm });
    }
    let ratio = || dist_sq_norm / dist_sq_p.max(EPSILON);
    Ok(match f {
        ScoringFn::Lnbnn => dist_sq_norm - dist_sq_p,
        ScoringFn::Ratio => ratio(),
        ScoringFn::Lnrat => ratio().ln(),
        ScoringFn::Count => 1.0,
    })
}

/// Forest over a query's own descriptors, used by one-vs-one matching.
pub fn build_query_forest(query: &FeatureSet, params: ForestParams) -> Option<KdForest> {
    if query.descriptors.len() < 2 {
        return None;
    }
    let pool = Arc::new(DescriptorPool::from_descriptors(query.descriptors.clone()));
    KdForest::build(pool, params).ok()
}

/// Ratio-test matching of one database image against the query: every
/// database descriptor looks up its two nearest query descriptors and is
/// kept when `d₂²/d₁² > t_ratio`.
pub fn match_one_vs_one(
    image_id: ImageId,
    db: &FeatureSet,
    query: &FeatureSet,
    t_ratio: f64,
    query_forest: Option<&KdForest>,
) -> MatchSet {
    let mut out = MatchSet::new(image_id);
    let Some(forest) = query_forest.filter(|_| query.descriptors.len() >= 2) else {
        log::debug!("query has fewer than two descriptors; no 1v1 matches");
        return out;
    };
    let checks = if query.descriptors.len() <= EXACT_QUERY_LIMIT { None } else { forest.params().max_checks };
    for (i, d) in db.descriptors.iter().enumerate() {
        let nl = forest.knn_search(d, 2, checks);
        if nl.len() < 2 {
            continue;
        }
        let r = nl.distances_sq[1] as f64 / (nl.distances_sq[0] as f64).max(EPSILON);
        if r > t_ratio {
            out.triples.push(MatchTriple { db_index: i as u32, query_index: nl.indices[0], score: r });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    KdForest,
    Pq,
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "kdforest" => Ok(Backend::KdForest),
            "pq" => Ok(Backend::Pq),
            _ => Err(format!("unknown backend {s:?} (kdforest, pq)")),
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Backend::KdForest => "kdforest",
            Backend::Pq => "pq",
        })
    }
}

/// Nearest-neighbor index over every database descriptor.
#[derive(Debug, Clone)]
pub enum SearchIndex {
    KdForest(KdForest),
    Pq(PqIndex),
}

impl SearchIndex {
    pub fn backend(&self) -> Backend {
        match self {
            SearchIndex::KdForest(_) => Backend::KdForest,
            SearchIndex::Pq(_) => Backend::Pq,
        }
    }

    pub fn pool(&self) -> &Arc<DescriptorPool> {
        match self {
            SearchIndex::KdForest(f) => f.pool(),
            SearchIndex::Pq(p) => p.pool(),
        }
    }

    /// k-NN with a forest check budget (`None` searches exactly); the PQ
    /// scan is always exhaustive over codes.
    pub fn knn(&self, q: &Descriptor, k: usize, max_checks: Option<usize>) -> NeighborList {
        match self {
            SearchIndex::KdForest(f) => f.knn_search(q, k, max_checks),
            SearchIndex::Pq(p) => p.knn(q, k),
        }
    }
}

/// `k + 1` nearest neighbors of `q` not owned by `exclude`.
fn foreign_neighbors(
    index: &SearchIndex,
    q: &Descriptor,
    k: usize,
    exclude: Option<ImageId>,
    max_checks: Option<usize>,
) -> Vec<(u32, f32)> {
    let pool = index.pool();
    let want = k + 1;
    if let (SearchIndex::Pq(pq), Some(id)) = (index, exclude) {
        return pq.knn_filtered(q, want, |i| pool.owner(i).image_id != id).iter().collect();
    }
    let mut fetch = (want + if exclude.is_some() { SELF_EXCLUSION_PAD } else { 0 }).min(pool.len());
    let mut checks = max_checks;
    loop {
        let nl = index.knn(q, fetch, checks);
        let foreign: Vec<(u32, f32)> = nl
            .iter()
            .filter(|&(i, _)| Some(pool.owner(i as usize).image_id) != exclude)
            .take(want)
            .collect();
        if foreign.len() == want || (fetch == pool.len() && checks.is_none()) {
            return foreign;
        }
        if fetch == pool.len() {
            // A bounded forest search may miss vectors even when asked for all.
            checks = None;
        }
        fetch = (fetch * 2).min(pool.len());
    }
}

/// Competitive matching of all query descriptors against the whole database.
///
/// For query descriptor `j` the `k + 1` nearest foreign neighbors are found;
/// each of the first `k` scores `δ(fn, d_p, d_{k+1})` toward its owner image.
/// Only the best triple per `(j, image)` survives. Returns one set per
/// touched image, ordered by image id. `max_checks` bounds each forest
/// search (`None` is exact).
pub fn match_one_vs_many(
    query: &FeatureSet,
    index: &SearchIndex,
    k: usize,
    f: ScoringFn,
    exclude: Option<ImageId>,
    max_checks: Option<usize>,
) -> Result<Vec<MatchSet>, MatchError> {
    let k = k.max(1);
    let pool = index.pool();
    let available = pool.len() - exclude.map_or(0, |id| pool.count_owned_by(id));
    if available < k + 1 {
        return Err(MatchError::InsufficientDatabase { needed: k + 1, available });
    }

    let per_query: Vec<Vec<(ImageId, MatchTriple)>> = query
        .descriptors
        .par_iter()
        .enumerate()
        .map(|(j, q)| -> Result<_, MatchError> {
            let nn = foreign_neighbors(index, q, k, exclude, max_checks);
            let norm = nn[k].1 as f64;
            let mut best: Vec<(ImageId, MatchTriple)> = Vec::with_capacity(k);
            for &(idx, d) in &nn[..k] {
                let owner = pool.owner(idx as usize);
                let score = delta(f, d as f64, norm)?;
                let triple = MatchTriple { db_index: owner.local_index, query_index: j as u32, score };
                match best.iter_mut().find(|(img, _)| *img == owner.image_id) {
                    Some((_, t)) if score > t.score => *t = triple,
                    Some(_) => {}
                    None => best.push((owner.image_id, triple)),
                }
            }
            Ok(best)
        })
        .collect::<Result<_, _>>()?;

    let mut sets: BTreeMap<ImageId, MatchSet> = BTreeMap::new();
    for (img, triple) in per_query.into_iter().flatten() {
        sets.entry(img).or_insert_with(|| MatchSet::new(img)).triples.push(triple);
    }
    Ok(sets.into_values().collect())
}
