use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::catalog::{Catalog, ImageRecord};
use crate::features::{extract_features, FeatureError, GrayImage, Roi};

/// File name of the listing written next to generated datasets.
pub const INGEST_MANIFEST: &str = "ingest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestEntry {
    /// Image path, relative to the listing's directory unless absolute.
    pub path: String,
    #[serde(default)]
    pub label: Option<String>,
    /// Defaults to the whole image.
    #[serde(default)]
    pub roi: Option<Roi>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub images: Vec<IngestEntry>,
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    out.sort();
    Ok(out)
}

/// Listing for a directory: `ingest.json` when present, otherwise images at
/// the top level (unlabeled) and in subdirectories named after their label.
fn discover(dir: &Path) -> Result<(PathBuf, IngestManifest), HarnessError> {
    let listing = dir.join(INGEST_MANIFEST);
    if listing.is_file() {
        return read_manifest(&listing);
    }
    let mut images = Vec::new();
    for p in sorted_entries(dir)? {
        if p.is_dir() {
            let label = p.file_name().map(|n| n.to_string_lossy().to_string());
            for f in sorted_entries(&p)?.into_iter().filter(|f| is_image(f)) {
                images.push(IngestEntry { path: f.to_string_lossy().to_string(), label: label.clone(), roi: None });
            }
        } else if is_image(&p) {
            images.push(IngestEntry { path: p.to_string_lossy().to_string(), label: None, roi: None });
        }
    }
    Ok((dir.to_path_buf(), IngestManifest { images }))
}

fn read_manifest(path: &Path) -> Result<(PathBuf, IngestManifest), HarnessError> {
    let manifest: IngestManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((base, manifest))
}

/// Adds every image listed by `source` (a directory or an ingest listing)
/// to the catalog. Features are extracted in parallel and registered in
/// listing order.
pub fn ingest(catalog: &mut Catalog, source: &Path) -> Result<Vec<ImageRecord>, HarnessError> {
    let (base, manifest) = if source.is_dir() { discover(source)? } else { read_manifest(source)? };
    let variant = catalog.descriptor_variant();
    let extracted: Vec<_> = manifest
        .images
        .par_iter()
        .map(|entry| -> Result<_, HarnessError> {
            let path = base.join(&entry.path);
            let image = GrayImage::open(&path)?;
            let roi = entry.roi.unwrap_or_else(|| Roi::full(&image));
            let clipped = roi.clip(image.width(), image.height()).ok_or(FeatureError::InvalidRoi(roi))?;
            let features = extract_features(&image, clipped, variant)?;
            Ok((path, clipped, features))
        })
        .collect::<Result<_, _>>()?;
    let mut records = Vec::with_capacity(extracted.len());
    for ((path, roi, features), entry) in extracted.into_iter().zip(&manifest.images) {
        records.push(catalog.add_features(&path.to_string_lossy(), roi, entry.label.as_deref(), features)?);
    }
    log::info!("ingested {} images", records.len());
    Ok(records)
}
