//! On-disk catalog of images, ROIs, labels and feature sidecars, plus
//! immutable index generations built from it.
//!
//! Layout under the catalog root:
//!
//! ```text
//! manifest.json            images, labels, generation metadata
//! features/<id>.hsft       feature sidecars, written at ingest
//! images/<id>.png          images uploaded without a source file
//! index/<generation>/      forest.hskd, or codebook.hspq + codes.hspc
//! ```

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::ann::{DescriptorPool, ForestParams, ImageId, IndexError, KdForest, PoolFingerprint};
use crate::features::{self, convert_variant, DescriptorVariant, FeatureError, FeatureSet, GrayImage, Roi};
use crate::matching::{Backend, SearchIndex};
use crate::pq::{self, PqCodebook, PqError, PqIndex};
use crate::scoring::{LabelId, LabelMap};

pub const MANIFEST_VERSION: u32 = 1;
/// Descriptors sampled from the pool to train PQ codebooks.
pub const PQ_TRAIN_SAMPLE: usize = 25_000;

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("image {0} not found")]
    ImageNotFound(ImageId),
    #[error("label {0:?} already exists")]
    LabelExists(String),
    #[error("label name must be non-empty")]
    InvalidLabelName,
    #[error("catalog has no descriptors to index")]
    EmptyPool,
    #[error("no index generation has been built")]
    NoGeneration,
    #[error("catalog integrity: {0}")]
    Integrity(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Pq(#[from] PqError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub source_uri: String,
    pub roi: Roi,
    pub label_id: Option<LabelId>,
    /// Sidecar path relative to the catalog root.
    pub feature_ref: String,
    pub ingest_time: DateTime<Utc>,
    #[serde(default)]
    pub descriptor_count: usize,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub label_id: LabelId,
    pub name: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuildParams {
    pub backend: Backend,
    pub forest: ForestParams,
    /// Seeds forest randomization and PQ training.
    pub seed: u64,
    pub variant: DescriptorVariant,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            backend: Backend::KdForest,
            forest: ForestParams::default(),
            seed: 0,
            variant: DescriptorVariant::RootSift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub generation: u64,
    pub backend: Backend,
    pub fingerprint: PoolFingerprint,
    pub params: BuildParams,
    pub built_at: DateTime<Utc>,
    /// Images in pool order.
    pub image_ids: Vec<ImageId>,
    /// Label assignment frozen at build time.
    pub image_labels: Vec<(ImageId, Option<LabelId>)>,
    pub labels: Vec<LabelRecord>,
    /// Size of the PQ code pool, when that backend is used.
    #[serde(default)]
    pub code_bytes: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(default)]
    flank: Option<String>,
    descriptor_variant: DescriptorVariant,
    next_image_id: ImageId,
    next_label_id: LabelId,
    images: Vec<ImageRecord>,
    labels: Vec<LabelRecord>,
    #[serde(default)]
    dirty: bool,
    #[serde(default)]
    current_generation: Option<u64>,
    #[serde(default)]
    generations: Vec<GenerationMeta>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

impl Manifest {
    fn new(variant: DescriptorVariant) -> Self {
        Self {
            version: MANIFEST_VERSION,
            flank: None,
            descriptor_variant: variant,
            next_image_id: 1,
            next_label_id: 1,
            images: Vec::new(),
            labels: Vec::new(),
            dirty: false,
            current_generation: None,
            generations: Vec::new(),
            extra: Map::new(),
        }
    }
}

/// A built index together with the catalog state it was built from.
#[derive(Debug)]
pub struct Generation {
    pub meta: GenerationMeta,
    pub index: SearchIndex,
    features: HashMap<ImageId, Arc<FeatureSet>>,
    image_labels: HashMap<ImageId, Option<LabelId>>,
    label_ids: Vec<LabelId>,
}

impl Generation {
    pub fn id(&self) -> u64 {
        self.meta.generation
    }

    pub fn variant(&self) -> DescriptorVariant {
        self.meta.params.variant
    }

    pub fn features(&self, id: ImageId) -> Option<Arc<FeatureSet>> {
        self.features.get(&id).cloned()
    }

    pub fn image_ids(&self) -> &[ImageId] {
        &self.meta.image_ids
    }

    pub fn label_of(&self, id: ImageId) -> Option<LabelId> {
        self.image_labels.get(&id).copied().flatten()
    }

    pub fn label_ids(&self) -> &[LabelId] {
        &self.label_ids
    }

    pub fn label_name(&self, id: LabelId) -> Option<&str> {
        self.meta.labels.iter().find(|l| l.label_id == id).map(|l| l.name.as_str())
    }

    pub fn label_map(&self) -> LabelMap<'_> {
        LabelMap { image_labels: &self.image_labels, labels: &self.label_ids }
    }

    /// Number of images carrying `label`.
    pub fn label_multiplicity(&self, label: LabelId) -> usize {
        self.image_labels.values().filter(|l| **l == Some(label)).count()
    }
}

#[derive(Debug)]
pub struct Catalog {
    root: PathBuf,
    manifest: Manifest,
    feature_cache: HashMap<ImageId, Arc<FeatureSet>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    std::fs::rename(tmp, path)
}

impl Catalog {
    pub fn create(root: &Path, variant: DescriptorVariant) -> Result<Self, CatalogError> {
        if root.join(MANIFEST).exists() {
            return Err(CatalogError::Manifest(format!("{} already holds a catalog", root.display())));
        }
        std::fs::create_dir_all(root.join("features"))?;
        let catalog = Self { root: root.to_path_buf(), manifest: Manifest::new(variant), feature_cache: HashMap::new() };
        catalog.save()?;
        Ok(catalog)
    }

    pub fn open(root: &Path) -> Result<Self, CatalogError> {
        let text = std::fs::read_to_string(root.join(MANIFEST))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CatalogError::Manifest(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(CatalogError::Manifest(format!("unsupported version {}", manifest.version)));
        }
        Ok(Self { root: root.to_path_buf(), manifest, feature_cache: HashMap::new() })
    }

    pub fn open_or_create(root: &Path, variant: DescriptorVariant) -> Result<Self, CatalogError> {
        if root.join(MANIFEST).exists() {
            Self::open(root)
        } else {
            Self::create(root, variant)
        }
    }

    fn save(&self) -> Result<(), CatalogError> {
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CatalogError::Manifest(e.to_string()))?;
        write_atomic(&self.root.join(MANIFEST), text.as_bytes())?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn descriptor_variant(&self) -> DescriptorVariant {
        self.manifest.descriptor_variant
    }

    pub fn flank(&self) -> Option<&str> {
        self.manifest.flank.as_deref()
    }

    pub fn set_flank(&mut self, flank: Option<String>) -> Result<(), CatalogError> {
        self.manifest.flank = flank;
        self.save()
    }

    pub fn is_dirty(&self) -> bool {
        self.manifest.dirty
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.manifest.images
    }

    pub fn labels(&self) -> &[LabelRecord] {
        &self.manifest.labels
    }

    pub fn get_image(&self, id: ImageId) -> Result<&ImageRecord, CatalogError> {
        self.manifest.images.iter().find(|r| r.image_id == id).ok_or(CatalogError::ImageNotFound(id))
    }

    pub fn label(&self, id: LabelId) -> Option<&LabelRecord> {
        self.manifest.labels.iter().find(|l| l.label_id == id)
    }

    pub fn label_by_name(&self, name: &str) -> Option<&LabelRecord> {
        self.manifest.labels.iter().find(|l| l.name == name)
    }

    /// Creates a label, failing when the name is taken.
    pub fn create_label(&mut self, name: &str) -> Result<LabelId, CatalogError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(CatalogError::InvalidLabelName);
        }
        if self.label_by_name(name).is_some() {
            return Err(CatalogError::LabelExists(name.to_string()));
        }
        let id = self.insert_label(name);
        self.save()?;
        Ok(id)
    }

    fn insert_label(&mut self, name: &str) -> LabelId {
        let id = self.manifest.next_label_id;
        self.manifest.next_label_id += 1;
        self.manifest.labels.push(LabelRecord { label_id: id, name: name.to_string(), extra: Map::new() });
        id
    }

    fn resolve_label(&mut self, name: &str) -> Result<LabelId, CatalogError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(CatalogError::InvalidLabelName);
        }
        Ok(match self.label_by_name(name) {
            Some(l) => l.label_id,
            None => self.insert_label(name),
        })
    }

    /// Registers already extracted features. The ROI is stored clipped to
    /// the source image.
    pub fn add_features(
        &mut self,
        source_uri: &str,
        roi: Roi,
        label: Option<&str>,
        features: FeatureSet,
    ) -> Result<ImageRecord, CatalogError> {
        if self.manifest.images.iter().any(|r| r.source_uri == source_uri && r.roi == roi) {
            log::warn!("duplicate image {source_uri} roi {roi}");
        }
        let label_id = label.map(|n| self.resolve_label(n)).transpose()?;
        let image_id = self.manifest.next_image_id;
        let feature_ref = format!("features/{image_id}.hsft");
        features::sidecar::save(&features, &self.root.join(&feature_ref))?;
        let record = ImageRecord {
            image_id,
            source_uri: source_uri.to_string(),
            roi,
            label_id,
            feature_ref,
            ingest_time: Utc::now(),
            descriptor_count: features.len(),
            extra: Map::new(),
        };
        self.manifest.next_image_id += 1;
        self.manifest.images.push(record.clone());
        self.manifest.dirty = true;
        self.feature_cache.insert(image_id, Arc::new(features));
        self.save()?;
        Ok(record)
    }

    /// Extracts features from `image` and registers it under `source_uri`.
    pub fn add_decoded(
        &mut self,
        source_uri: &str,
        image: &GrayImage,
        roi: Option<Roi>,
        label: Option<&str>,
    ) -> Result<ImageRecord, CatalogError> {
        let roi = roi.unwrap_or_else(|| Roi::full(image));
        let clipped = roi.clip(image.width(), image.height()).ok_or(FeatureError::InvalidRoi(roi))?;
        let fs = features::extract_features(image, clipped, self.manifest.descriptor_variant)?;
        self.add_features(source_uri, clipped, label, fs)
    }

    /// Loads, extracts and registers an image file.
    pub fn add_image(&mut self, source: &Path, roi: Option<Roi>, label: Option<&str>) -> Result<ImageRecord, CatalogError> {
        let image = GrayImage::open(source)?;
        self.add_decoded(&source.to_string_lossy(), &image, roi, label)
    }

    /// Stores uploaded image bytes inside the catalog and registers them.
    pub fn add_upload(&mut self, image: &GrayImage, roi: Option<Roi>, label: Option<&str>) -> Result<ImageRecord, CatalogError> {
        let dir = self.root.join("images");
        std::fs::create_dir_all(&dir)?;
        let rel = format!("images/{}.png", self.manifest.next_image_id);
        image.save_png(&self.root.join(&rel))?;
        self.add_decoded(&rel, image, roi, label)
    }

    /// Links an image to the label called `name`, creating it if needed.
    pub fn assign_label(&mut self, image_id: ImageId, name: &str) -> Result<ImageRecord, CatalogError> {
        self.get_image(image_id)?;
        let label_id = self.resolve_label(name)?;
        let record = self.manifest.images.iter_mut().find(|r| r.image_id == image_id).expect("checked above");
        record.label_id = Some(label_id);
        let record = record.clone();
        self.manifest.dirty = true;
        self.save()?;
        Ok(record)
    }

    /// Removes an image record. Its sidecar stays on disk while a retained
    /// generation may still reference it.
    pub fn remove_image(&mut self, image_id: ImageId) -> Result<(), CatalogError> {
        let pos = self
            .manifest
            .images
            .iter()
            .position(|r| r.image_id == image_id)
            .ok_or(CatalogError::ImageNotFound(image_id))?;
        self.manifest.images.remove(pos);
        self.feature_cache.remove(&image_id);
        self.manifest.dirty = true;
        self.save()
    }

    /// Feature set of a live image, as stored at ingest.
    pub fn features(&mut self, image_id: ImageId) -> Result<Arc<FeatureSet>, CatalogError> {
        if let Some(f) = self.feature_cache.get(&image_id) {
            return Ok(f.clone());
        }
        let rel = self.get_image(image_id)?.feature_ref.clone();
        let fs = Arc::new(features::sidecar::load(&self.root.join(rel))?);
        self.feature_cache.insert(image_id, fs.clone());
        Ok(fs)
    }

    fn load_sidecar(&self, image_id: ImageId) -> Result<FeatureSet, CatalogError> {
        Ok(features::sidecar::load(&self.root.join(format!("features/{image_id}.hsft")))?)
    }

    pub fn current_generation_id(&self) -> Option<u64> {
        self.manifest.current_generation
    }

    pub fn generations(&self) -> &[GenerationMeta] {
        &self.manifest.generations
    }

    fn index_dir(&self, generation: u64) -> PathBuf {
        self.root.join("index").join(generation.to_string())
    }

    /// Builds and publishes a new generation over every live image.
    pub fn build_generation(&mut self, params: BuildParams) -> Result<Arc<Generation>, CatalogError> {
        let stored_variant = self.manifest.descriptor_variant;
        let mut ids: Vec<ImageId> = self.manifest.images.iter().map(|r| r.image_id).collect();
        ids.sort_unstable();
        let mut features_map = HashMap::with_capacity(ids.len());
        let mut pool = DescriptorPool::default();
        for &id in &ids {
            let raw = self.features(id)?;
            let fs = if raw.variant == params.variant {
                raw
            } else {
                let mut converted = (*raw).clone();
                converted.descriptors.iter_mut().for_each(|d| *d = convert_variant(d, raw.variant, params.variant));
                converted.variant = params.variant;
                Arc::new(converted)
            };
            pool.push_image(id, &fs.descriptors);
            features_map.insert(id, fs);
        }
        if pool.is_empty() {
            return Err(CatalogError::EmptyPool);
        }
        log::info!("building {} index over {} descriptors from {} images ({stored_variant} stored)", params.backend, pool.len(), ids.len());

        let generation = self.manifest.generations.last().map_or(1, |g| g.generation + 1);
        let dir = self.index_dir(generation);
        std::fs::create_dir_all(&dir)?;
        let pool = Arc::new(pool);
        let (index, code_bytes) = build_index(&pool, &params, &dir)?;

        let meta = GenerationMeta {
            generation,
            backend: params.backend,
            fingerprint: pool.fingerprint(),
            params,
            built_at: Utc::now(),
            image_ids: ids.clone(),
            image_labels: self.manifest.images.iter().map(|r| (r.image_id, r.label_id)).collect(),
            labels: self.manifest.labels.clone(),
            code_bytes,
        };
        self.manifest.generations.push(meta.clone());
        self.manifest.current_generation = Some(generation);
        self.manifest.dirty = false;
        self.save()?;
        self.prune(generation);
        Ok(Arc::new(assemble(meta, index, features_map)))
    }

    /// Drops index directories and sidecars no longer needed by the current
    /// or previous generation.
    fn prune(&mut self, current: u64) {
        let keep: Vec<&GenerationMeta> =
            self.manifest.generations.iter().filter(|g| g.generation + 1 >= current).collect();
        for g in &self.manifest.generations {
            if g.generation + 1 < current {
                let _ = std::fs::remove_dir_all(self.index_dir(g.generation));
            }
        }
        let live: HashSet<ImageId> = self
            .manifest
            .images
            .iter()
            .map(|r| r.image_id)
            .chain(keep.iter().flat_map(|g| g.image_ids.iter().copied()))
            .collect();
        if let Ok(entries) = std::fs::read_dir(self.root.join("features")) {
            for e in entries.flatten() {
                let name = e.file_name().to_string_lossy().to_string();
                let id = name.strip_suffix(".hsft").and_then(|s| s.parse::<ImageId>().ok());
                if id.is_some_and(|id| !live.contains(&id)) {
                    let _ = std::fs::remove_file(e.path());
                }
            }
        }
    }

    /// Loads the current generation from disk.
    pub fn load_current_generation(&self) -> Result<Arc<Generation>, CatalogError> {
        let current = self.manifest.current_generation.ok_or(CatalogError::NoGeneration)?;
        self.load_generation(current)
    }

    pub fn load_generation(&self, generation: u64) -> Result<Arc<Generation>, CatalogError> {
        let meta = self
            .manifest
            .generations
            .iter()
            .find(|g| g.generation == generation)
            .cloned()
            .ok_or(CatalogError::NoGeneration)?;
        let mut pool = DescriptorPool::default();
        let mut features_map = HashMap::with_capacity(meta.image_ids.len());
        for &id in &meta.image_ids {
            let mut fs = self.load_sidecar(id)?;
            if fs.variant != meta.params.variant {
                let from = fs.variant;
                fs.descriptors.iter_mut().for_each(|d| *d = convert_variant(d, from, meta.params.variant));
                fs.variant = meta.params.variant;
            }
            pool.push_image(id, &fs.descriptors);
            features_map.insert(id, Arc::new(fs));
        }
        let pool = Arc::new(pool);
        if pool.fingerprint() != meta.fingerprint {
            return Err(IndexError::FingerprintMismatch.into());
        }
        let dir = self.index_dir(generation);
        let index = match meta.backend {
            Backend::KdForest => SearchIndex::KdForest(KdForest::load(&dir.join("forest.hskd"), pool)?),
            Backend::Pq => {
                let cb = Arc::new(PqCodebook::load(&dir.join("codebook.hspq"))?);
                SearchIndex::Pq(PqIndex::load_codes(&dir.join("codes.hspc"), cb, pool)?)
            }
        };
        Ok(Arc::new(assemble(meta, index, features_map)))
    }
}

fn build_index(pool: &Arc<DescriptorPool>, params: &BuildParams, dir: &Path) -> Result<(SearchIndex, Option<usize>), CatalogError> {
    Ok(match params.backend {
        Backend::KdForest => {
            let forest = KdForest::build(pool.clone(), ForestParams { seed: params.seed, ..params.forest })?;
            forest.save(&dir.join("forest.hskd"))?;
            (SearchIndex::KdForest(forest), None)
        }
        Backend::Pq => {
            let sample = training_sample(pool, params.seed);
            let cb = Arc::new(pq::train_codebooks(&sample, params.seed as u32)?);
            let index = PqIndex::build(cb.clone(), pool.clone())?;
            cb.save(&dir.join("codebook.hspq"))?;
            index.save_codes(&dir.join("codes.hspc"))?;
            let bytes = index.code_bytes();
            log::info!(
                "pq code pool: {bytes} bytes for {} descriptors ({} bytes raw, {:.0}x smaller)",
                index.len(),
                index.len() * 512,
                (index.len() * 512) as f64 / bytes as f64
            );
            (SearchIndex::Pq(index), Some(bytes))
        }
    })
}

/// Uniform sample of at most [`PQ_TRAIN_SAMPLE`] pool vectors, in pool order.
fn training_sample(pool: &DescriptorPool, seed: u64) -> DescriptorPool {
    if pool.len() <= PQ_TRAIN_SAMPLE {
        return DescriptorPool::from_descriptors(pool.vectors().to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, pool.len(), PQ_TRAIN_SAMPLE).into_vec();
    idx.sort_unstable();
    DescriptorPool::from_descriptors(idx.into_iter().map(|i| *pool.vector(i)).collect())
}

fn assemble(meta: GenerationMeta, index: SearchIndex, features: HashMap<ImageId, Arc<FeatureSet>>) -> Generation {
    let image_labels: HashMap<ImageId, Option<LabelId>> = meta.image_labels.iter().copied().collect();
    let mut label_ids: Vec<LabelId> = meta.labels.iter().map(|l| l.label_id).collect();
    label_ids.sort_unstable();
    Generation { meta, index, features, image_labels, label_ids }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Descriptor, EllipseKeypoint, DESCRIPTOR_DIM};
    use crate::geometry::AffineShape;
    use rand::Rng;

    fn synthetic_features(n: usize, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSet {
            keypoints: (0..n)
                .map(|_| EllipseKeypoint::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), AffineShape::isotropic(3.0)))
                .collect(),
            descriptors: (0..n)
                .map(|_| {
                    let mut d = [0f32; DESCRIPTOR_DIM];
                    d.iter_mut().for_each(|v| *v = rng.random());
                    Descriptor(d)
                })
                .collect(),
            roi_width: 100,
            roi_height: 100,
            variant: DescriptorVariant::RootSift,
        }
    }

    fn catalog_with(n_images: usize, per_image: usize) -> (tempfile::TempDir, Catalog) {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Catalog::create(dir.path(), DescriptorVariant::RootSift).unwrap();
        for i in 0..n_images {
            let label = format!("animal-{}", i / 2);
            c.add_features(&format!("img{i}.png"), Roi::new(0, 0, 100, 100), Some(&label), synthetic_features(per_image, i as u64))
                .unwrap();
        }
        (dir, c)
    }

    #[test]
    fn add_then_get_round_trips() {
        let (dir, mut c) = catalog_with(2, 5);
        let rec = c.add_features("x.png", Roi::new(1, 2, 30, 40), None, synthetic_features(4, 9)).unwrap();
        assert_eq!(c.get_image(rec.image_id).unwrap(), &rec);
        let reopened = Catalog::open(dir.path()).unwrap();
        assert_eq!(reopened.get_image(rec.image_id).unwrap(), &rec);
        assert_eq!(*c.features(rec.image_id).unwrap(), synthetic_features(4, 9));
        assert!(matches!(c.get_image(999), Err(CatalogError::ImageNotFound(999))));
    }

    #[test]
    fn labels_are_created_and_linked() {
        let (_dir, mut c) = catalog_with(1, 5);
        let id = c.images()[0].image_id;
        let rec = c.assign_label(id, "stripes").unwrap();
        let label = c.label_by_name("stripes").unwrap();
        assert_eq!(rec.label_id, Some(label.label_id));
        assert!(matches!(c.create_label("stripes"), Err(CatalogError::LabelExists(_))));
        assert!(matches!(c.create_label("  "), Err(CatalogError::InvalidLabelName)));
        assert!(matches!(c.assign_label(42, "x"), Err(CatalogError::ImageNotFound(42))));
    }

    #[test]
    fn pool_bookkeeping_and_determinism() {
        let (_dir, mut c) = catalog_with(3, 10);
        let g1 = c.build_generation(BuildParams::default()).unwrap();
        let pool = g1.index.pool();
        assert_eq!(pool.len(), 30);
        for (k, o) in pool.owners().iter().enumerate() {
            assert_eq!(o.image_id, c.images()[k / 10].image_id);
            assert_eq!(o.local_index as usize, k % 10);
        }
        let g2 = c.build_generation(BuildParams::default()).unwrap();
        assert_eq!(g1.meta.fingerprint, g2.meta.fingerprint);
        assert_eq!(g2.id(), g1.id() + 1);

        c.add_features("new.png", Roi::new(0, 0, 10, 10), None, synthetic_features(7, 99)).unwrap();
        assert!(c.is_dirty());
        let g3 = c.build_generation(BuildParams::default()).unwrap();
        assert_eq!(g3.id(), g2.id() + 1);
        assert!(!c.is_dirty());
        assert_eq!(g3.index.pool().len(), 37);
    }

    #[test]
    fn remove_then_rebuild() {
        let (_dir, mut c) = catalog_with(3, 10);
        let before = c.build_generation(BuildParams::default()).unwrap();
        let victim = c.images()[1].image_id;
        c.remove_image(victim).unwrap();
        assert!(matches!(c.remove_image(victim), Err(CatalogError::ImageNotFound(_))));
        let after = c.build_generation(BuildParams::default()).unwrap();
        assert_ne!(before.meta.fingerprint, after.meta.fingerprint);
        assert_eq!(after.meta.fingerprint.count, before.meta.fingerprint.count - 10);
        // The retired generation remains usable.
        assert_eq!(before.index.pool().count_owned_by(victim), 10);
        assert!(before.features(victim).is_some());
    }

    #[test]
    fn empty_catalog_cannot_build() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Catalog::create(dir.path(), DescriptorVariant::RootSift).unwrap();
        assert!(matches!(c.build_generation(BuildParams::default()), Err(CatalogError::EmptyPool)));
        assert!(matches!(c.load_current_generation(), Err(CatalogError::NoGeneration)));
    }

    #[test]
    fn generations_reload_from_disk() {
        let (dir, mut c) = catalog_with(4, 60);
        for backend in [Backend::KdForest, Backend::Pq] {
            let built = c.build_generation(BuildParams { backend, seed: 3, ..Default::default() }).unwrap();
            let reopened = Catalog::open(dir.path()).unwrap();
            let loaded = reopened.load_current_generation().unwrap();
            assert_eq!(loaded.meta, built.meta);
            assert_eq!(loaded.index.backend(), backend);
            let q = built.index.pool().vector(17);
            assert_eq!(loaded.index.knn(q, 5, Some(64)), built.index.knn(q, 5, Some(64)));
            if backend == Backend::Pq {
                assert_eq!(built.meta.code_bytes, Some(16 * 240));
            }
        }
    }

    #[test]
    fn variant_conversion_at_build() {
        let (_dir, mut c) = catalog_with(2, 10);
        let g = c.build_generation(BuildParams { variant: DescriptorVariant::Sift, ..Default::default() }).unwrap();
        assert_eq!(g.variant(), DescriptorVariant::Sift);
        let fs = g.features(c.images()[0].image_id).unwrap();
        assert_eq!(fs.variant, DescriptorVariant::Sift);
    }

    #[test]
    fn unknown_fields_survive_rewrite() {
        let (dir, _c) = catalog_with(1, 3);
        let path = dir.path().join(MANIFEST);
        let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v["site"] = Value::String("north plains".into());
        v["images"][0]["photographer"] = Value::String("field team".into());
        std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();

        let mut c = Catalog::open(dir.path()).unwrap();
        c.create_label("zed").unwrap();
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["site"], "north plains");
        assert_eq!(v["images"][0]["photographer"], "field team");
    }

    #[test]
    fn interrupted_write_keeps_previous_state() {
        let (dir, c) = catalog_with(2, 3);
        // A half-written replacement never reaches the manifest name.
        std::fs::write(dir.path().join("manifest.tmp"), b"{\"version\": 1, \"imag").unwrap();
        let reopened = Catalog::open(dir.path()).unwrap();
        assert_eq!(reopened.images(), c.images());
    }

    #[test]
    fn generation_label_snapshot_is_frozen() {
        let (_dir, mut c) = catalog_with(2, 5);
        let g = c.build_generation(BuildParams::default()).unwrap();
        let id = c.images()[0].image_id;
        let before = g.label_of(id);
        c.assign_label(id, "renamed").unwrap();
        assert_eq!(g.label_of(id), before);
        let g2 = c.build_generation(BuildParams::default()).unwrap();
        assert_eq!(g2.label_of(id), c.label_by_name("renamed").map(|l| l.label_id));
    }
}
