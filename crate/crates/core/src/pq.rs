//! Product quantization: 16 sub-codebooks of 128 words over 8-dim
//! subvectors, and k-NN by asymmetric distance computation (the query stays
//! unquantized, database items are compared through their codes).

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ann::{DescriptorPool, IndexError, NeighborList, Reader, TopK};
use crate::features::{Descriptor, DESCRIPTOR_DIM};

pub const PQ_M: usize = 16;
pub const PQ_SUB_DIM: usize = DESCRIPTOR_DIM / PQ_M;
pub const PQ_WORDS: usize = 128;
pub const KMEANS_ITERATIONS: usize = 25;

const CODEBOOK_MAGIC: &[u8; 4] = b"HSPQ";
const CODES_MAGIC: &[u8; 4] = b"HSPC";
const FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PqError {
    #[error("need at least {PQ_WORDS} training vectors, got {0}")]
    InsufficientData(usize),
    #[error("code pool is empty")]
    EmptyPool,
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Sixteen sub-codebooks, each 128 centroids of dimension 8.
#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook {
    /// `m × words × sub_dim` floats, subspace-major.
    centroids: Vec<f32>,
    train_seed: u32,
}

/// One encoded descriptor: a word index per subspace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PqCode(pub [u8; PQ_M]);

/// Objective recorded while training: mean squared quantization error of
/// the sample (summed over subspaces) at each k-means assignment step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub objective: Vec<f64>,
}

type Sub = [f32; PQ_SUB_DIM];

#[inline]
fn sub_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn subvector(d: &Descriptor, s: usize) -> &[f32] {
    &d.0[s * PQ_SUB_DIM..(s + 1) * PQ_SUB_DIM]
}

/// Nearest centroid, ties to the lower index.
fn nearest(centroids: &[Sub], x: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (w, c) in centroids.iter().enumerate() {
        let d = sub_dist(c, x);
        if d < best.1 {
            best = (w, d);
        }
    }
    best
}

/// Index drawn with probability proportional to `weights`; uniform when all
/// weights vanish.
fn weighted_pick(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return rng.random_range(0..weights.len());
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if acc > u {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn kmeans(data: &[Sub], seed: u64) -> (Vec<Sub>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.len();

    let mut centroids: Vec<Sub> = Vec::with_capacity(PQ_WORDS);
    centroids.push(data[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = data.iter().map(|x| sub_dist(x, &centroids[0]) as f64).collect();
    while centroids.len() < PQ_WORDS {
        let c = data[weighted_pick(&d2, &mut rng)];
        for (x, d) in data.iter().zip(d2.iter_mut()) {
            *d = d.min(sub_dist(x, &c) as f64);
        }
        centroids.push(c);
    }

    let mut assign = vec![0usize; n];
    let mut err = vec![0f32; n];
    let mut objective = Vec::with_capacity(KMEANS_ITERATIONS);
    for _ in 0..KMEANS_ITERATIONS {
        for (i, x) in data.iter().enumerate() {
            let (w, d) = nearest(&centroids, x);
            assign[i] = w;
            err[i] = d;
        }
        objective.push(err.iter().map(|&e| e as f64).sum::<f64>() / n as f64);

        let mut sums = vec![[0f64; PQ_SUB_DIM]; PQ_WORDS];
        let mut counts = vec![0usize; PQ_WORDS];
        for (x, &w) in data.iter().zip(&assign) {
            counts[w] += 1;
            for (s, v) in sums[w].iter_mut().zip(x) {
                *s += *v as f64;
            }
        }
        for w in 0..PQ_WORDS {
            if counts[w] > 0 {
                for (c, s) in centroids[w].iter_mut().zip(&sums[w]) {
                    *c = (s / counts[w] as f64) as f32;
                }
            } else {
                // Reseed from the point worst served by its centroid.
                let far = (0..n).fold(0, |b, i| if err[i] > err[b] { i } else { b });
                centroids[w] = data[far];
                err[far] = 0.0;
            }
        }
    }
    (centroids, objective)
}

/// Trains the sub-codebooks with k-means++ seeding and 25 Lloyd iterations.
pub fn train_codebooks(sample: &DescriptorPool, seed: u32) -> Result<PqCodebook, PqError> {
    train_codebooks_logged(sample, seed).map(|(cb, _)| cb)
}

pub fn train_codebooks_logged(sample: &DescriptorPool, seed: u32) -> Result<(PqCodebook, TrainingLog), PqError> {
    if sample.len() < PQ_WORDS {
        return Err(PqError::InsufficientData(sample.len()));
    }
    let per_subspace: Vec<(Vec<Sub>, Vec<f64>)> = (0..PQ_M)
        .into_par_iter()
        .map(|s| {
            let data: Vec<Sub> = sample
                .vectors()
                .iter()
                .map(|d| subvector(d, s).try_into().expect("sub_dim"))
                .collect();
            let sub_seed = (seed as u64) << 8 | s as u64;
            kmeans(&data, sub_seed)
        })
        .collect();

    let mut objective = vec![0.0; KMEANS_ITERATIONS];
    let mut centroids = Vec::with_capacity(PQ_M * PQ_WORDS * PQ_SUB_DIM);
    for (cents, obj) in &per_subspace {
        for (o, v) in objective.iter_mut().zip(obj) {
            *o += v;
        }
        centroids.extend(cents.iter().flatten());
    }
    log::debug!("pq training objective: {objective:?}");
    Ok((PqCodebook { centroids, train_seed: seed }, TrainingLog { objective }))
}

impl PqCodebook {
    pub fn train_seed(&self) -> u32 {
        self.train_seed
    }

    fn subspace(&self, s: usize) -> &[Sub] {
        let base = s * PQ_WORDS * PQ_SUB_DIM;
        let flat = &self.centroids[base..base + PQ_WORDS * PQ_SUB_DIM];
        let (words, rest) = flat.as_chunks::<PQ_SUB_DIM>();
        debug_assert!(rest.is_empty());
        words
    }

    pub fn centroid(&self, s: usize, w: usize) -> &[f32; PQ_SUB_DIM] {
        &self.subspace(s)[w]
    }

    pub fn encode(&self, d: &Descriptor) -> PqCode {
        let mut code = [0u8; PQ_M];
        for (s, c) in code.iter_mut().enumerate() {
            *c = nearest(self.subspace(s), subvector(d, s)).0 as u8;
        }
        PqCode(code)
    }

    pub fn reconstruct(&self, code: &PqCode) -> Descriptor {
        let mut out = [0f32; DESCRIPTOR_DIM];
        for (s, &w) in code.0.iter().enumerate() {
            out[s * PQ_SUB_DIM..(s + 1) * PQ_SUB_DIM].copy_from_slice(self.centroid(s, w as usize));
        }
        Descriptor(out)
    }

    /// Squared distances from each query subvector to every word.
    pub fn lookup_table(&self, q: &Descriptor) -> Vec<[f32; PQ_WORDS]> {
        (0..PQ_M)
            .map(|s| {
                let x = subvector(q, s);
                let mut row = [0f32; PQ_WORDS];
                for (r, c) in row.iter_mut().zip(self.subspace(s)) {
                    *r = sub_dist(c, x);
                }
                row
            })
            .collect()
    }

    /// Writes the `HSPQ` codebook file.
    pub fn save(&self, path: &Path) -> Result<(), PqError> {
        let mut buf = Vec::with_capacity(16 + self.centroids.len() * 4);
        buf.extend_from_slice(CODEBOOK_MAGIC);
        buf.extend_from_slice(&FILE_VERSION.to_le_bytes());
        buf.extend_from_slice(&[PQ_M as u8, PQ_SUB_DIM as u8, PQ_WORDS as u8]);
        buf.extend_from_slice(&self.train_seed.to_le_bytes());
        for c in &self.centroids {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self, PqError> {
        let bytes = std::fs::read(path).map_err(IndexError::from)?;
        let mut r = Reader { buf: &bytes, pos: 0 };
        if r.take(4)? != CODEBOOK_MAGIC {
            return Err(cache_err("bad codebook magic"));
        }
        if r.u32()? != FILE_VERSION {
            return Err(cache_err("unsupported codebook version"));
        }
        if r.take(3)? != [PQ_M as u8, PQ_SUB_DIM as u8, PQ_WORDS as u8] {
            return Err(cache_err("unsupported codebook geometry"));
        }
        let train_seed = r.u32()?;
        let n = PQ_M * PQ_WORDS * PQ_SUB_DIM;
        let raw = r.take(n * 4)?;
        let centroids: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(cache_err("non-finite centroid"));
        }
        Ok(Self { centroids, train_seed })
    }
}

fn cache_err(msg: &str) -> PqError {
    PqError::Index(IndexError::Cache(msg.into()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PqError> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(IndexError::from)?;
    f.write_all(bytes).map_err(IndexError::from)?;
    std::fs::rename(tmp, path).map_err(IndexError::from)?;
    Ok(())
}

/// Encoded descriptor pool searched by exhaustive ADC scan. The source
/// pool is kept for ownership lookups only.
#[derive(Debug, Clone)]
pub struct PqIndex {
    codebook: Arc<PqCodebook>,
    codes: Vec<u8>,
    pool: Arc<DescriptorPool>,
}

impl PqIndex {
    pub fn build(codebook: Arc<PqCodebook>, pool: Arc<DescriptorPool>) -> Result<Self, PqError> {
        if pool.is_empty() {
            return Err(PqError::EmptyPool);
        }
        let codes = pool
            .vectors()
            .par_iter()
            .flat_map_iter(|d| codebook.encode(d).0)
            .collect();
        Ok(Self { codebook, codes, pool })
    }

    pub fn codebook(&self) -> &Arc<PqCodebook> {
        &self.codebook
    }

    pub fn pool(&self) -> &Arc<DescriptorPool> {
        &self.pool
    }

    pub fn len(&self) -> usize {
        self.codes.len() / PQ_M
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Bytes held by the codes themselves.
    pub fn code_bytes(&self) -> usize {
        self.codes.len()
    }

    pub fn code(&self, idx: usize) -> PqCode {
        PqCode(self.codes[idx * PQ_M..(idx + 1) * PQ_M].try_into().unwrap())
    }

    /// Top-k by ADC distance, ties to the lower pool index.
    pub fn knn(&self, q: &Descriptor, k: usize) -> NeighborList {
        self.knn_filtered(q, k, |_| true)
    }

    /// Top-k among pool entries accepted by `keep`. `keep` is consulted only
    /// for entries that would enter the current top-k.
    pub fn knn_filtered(&self, q: &Descriptor, k: usize, keep: impl Fn(usize) -> bool) -> NeighborList {
        // Rows padded to 256 so a code byte always indexes in bounds.
        let mut table = vec![[0f32; 256]; PQ_M];
        for (dst, src) in table.iter_mut().zip(self.codebook.lookup_table(q)) {
            dst[..PQ_WORDS].copy_from_slice(&src);
        }
        let table: &[[f32; 256]; PQ_M] = table.as_slice().try_into().expect("PQ_M rows");
        let mut top = TopK::new(k.min(self.len()));
        let mut bound = f32::INFINITY;
        const BLOCK: usize = 64;
        let mut dists = [0f32; BLOCK];
        for (b, block) in self.codes.chunks(PQ_M * BLOCK).enumerate() {
            // Branch-free distance pass first, so independent codes overlap.
            for (d, code) in dists.iter_mut().zip(block.chunks_exact(PQ_M)) {
                let code: &[u8; PQ_M] = code.try_into().expect("code width");
                let mut acc = 0f32;
                for s in 0..PQ_M {
                    acc += table[s][code[s] as usize];
                }
                *d = acc;
            }
            for (o, &d) in dists[..block.len() / PQ_M].iter().enumerate() {
                let i = b * BLOCK + o;
                if d <= bound && keep(i) {
                    top.push(d, i as u32);
                    bound = top.worst();
                }
            }
        }
        top.into_list()
    }

    /// Writes the `HSPC` code pool, tagged with the source pool fingerprint.
    pub fn save_codes(&self, path: &Path) -> Result<(), PqError> {
        let fp = self.pool.fingerprint();
        let mut buf = Vec::with_capacity(64 + self.codes.len());
        buf.extend_from_slice(CODES_MAGIC);
        buf.extend_from_slice(&FILE_VERSION.to_le_bytes());
        buf.extend_from_slice(&fp.count.to_le_bytes());
        buf.extend_from_slice(&(fp.checksum.len() as u32).to_le_bytes());
        buf.extend_from_slice(fp.checksum.as_bytes());
        buf.extend_from_slice(&self.codes);
        write_atomic(path, &buf)
    }

    pub fn load_codes(path: &Path, codebook: Arc<PqCodebook>, pool: Arc<DescriptorPool>) -> Result<Self, PqError> {
        let bytes = std::fs::read(path).map_err(IndexError::from)?;
        let mut r = Reader { buf: &bytes, pos: 0 };
        if r.take(4)? != CODES_MAGIC {
            return Err(cache_err("bad code pool magic"));
        }
        if r.u32()? != FILE_VERSION {
            return Err(cache_err("unsupported code pool version"));
        }
        let count = r.u64()?;
        let len = r.u32()? as usize;
        let checksum = r.take(len)?;
        let fp = pool.fingerprint();
        if fp.count != count || fp.checksum.as_bytes() != checksum {
            return Err(IndexError::FingerprintMismatch.into());
        }
        let codes = r.take(count as usize * PQ_M)?.to_vec();
        if codes.iter().any(|&c| c as usize >= PQ_WORDS) {
            return Err(cache_err("word index out of range"));
        }
        Ok(Self { codebook, codes, pool })
    }
}
