//! Request and response bodies. Field names are part of the `/api/v1`
//! contract.

use hotspot::ann::ImageId;
use hotspot::catalog::{ImageRecord, LabelRecord};
use hotspot::features::{EllipseKeypoint, FeatureSet, Roi};
use hotspot::harness::{QueryConfig, QueryTiming, RankedResult};
use hotspot::matching::Backend;
use hotspot::scoring::{LabelId, ScoredLabel};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRequest {
    pub name: String,
    /// Fail with 400 instead of reusing an existing label of that name.
    #[serde(default)]
    pub new: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RebuildRequest {
    #[serde(default)]
    pub backend: Option<Backend>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RebuildResponse {
    pub generation: u64,
    pub backend: Backend,
    pub image_count: usize,
    pub descriptor_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSummary {
    pub label_id: LabelId,
    pub name: String,
    pub image_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelsResponse {
    pub generation: Option<u64>,
    pub labels: Vec<LabelSummary>,
}

impl LabelsResponse {
    pub fn new(generation: Option<u64>, images: &[ImageRecord], labels: &[LabelRecord]) -> Self {
        let labels = labels
            .iter()
            .map(|l| LabelSummary {
                label_id: l.label_id,
                name: l.name.clone(),
                image_count: images.iter().filter(|r| r.label_id == Some(l.label_id)).count(),
            })
            .collect();
        Self { generation, labels }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatusResponse {
    pub generation: Option<u64>,
    /// Catalog changed since the current generation was built.
    pub dirty: bool,
    pub image_count: usize,
    pub label_count: usize,
    pub default_config: QueryConfig,
}

/// Keypoint ellipse in its image's normalized ROI frame: center `(x, y)`
/// and lower-triangular shape `[[a, 0], [b, c]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub x: f32,
    pub y: f32,
    pub a: f32,
    pub b: f32,
    pub c: f32,
}

impl From<&EllipseKeypoint> for Ellipse {
    fn from(k: &EllipseKeypoint) -> Self {
        Self { x: k.x, y: k.y, a: k.shape.a, b: k.shape.b, c: k.shape.c }
    }
}

/// Maps ROI-frame coordinates back to source pixels:
/// `source = roi.xy + frame_xy * roi.wh / frame_wh`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub roi: Roi,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayPair {
    pub query_index: u32,
    pub db_index: u32,
    pub query: Ellipse,
    pub database: Ellipse,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLabel {
    pub label_id: LabelId,
    pub name: String,
    pub score: f64,
    pub best_image_id: Option<ImageId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub image_id: ImageId,
    pub label_id: Option<LabelId>,
    pub label_name: Option<String>,
    pub score: f64,
    pub initial_score: f64,
    pub reranked_score: Option<f64>,
    pub frame: Frame,
    /// Spatially verified matches when reranked, initial matches otherwise.
    pub matches: Vec<OverlayPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub generation: u64,
    /// Label scoring, best first.
    pub labels: Vec<RankedLabel>,
    /// Image scoring, best first.
    pub image_scoring: Vec<RankedLabel>,
    pub candidates: Vec<Candidate>,
    pub query_frame: Frame,
    pub query_keypoints: usize,
    pub config: QueryConfig,
    pub timing: QueryTiming,
}

/// Context the response builder needs from the pinned generation.
pub trait LabelLookup {
    fn label_of(&self, image: ImageId) -> Option<LabelId>;
    fn label_name(&self, label: LabelId) -> Option<String>;
    fn features(&self, image: ImageId) -> Option<std::sync::Arc<FeatureSet>>;
    fn roi(&self, image: ImageId) -> Option<Roi>;
}

impl QueryResponse {
    pub fn build(
        result: &RankedResult,
        query: &FeatureSet,
        query_roi: Roi,
        max_candidates: usize,
        ctx: &impl LabelLookup,
    ) -> Self {
        let ranked = |labels: &[ScoredLabel]| -> Vec<RankedLabel> {
            labels
                .iter()
                .map(|l| RankedLabel {
                    label_id: l.label_id,
                    name: ctx.label_name(l.label_id).unwrap_or_default(),
                    score: l.score,
                    best_image_id: l.best_image_id,
                })
                .collect()
        };
        let candidates = result
            .images
            .iter()
            .take(max_candidates)
            .filter_map(|img| {
                let db = ctx.features(img.image_id)?;
                let initial = result.match_sets.get(&img.image_id)?;
                let matches = img
                    .current_matches(initial)
                    .iter()
                    .map(|t| OverlayPair {
                        query_index: t.query_index,
                        db_index: t.db_index,
                        query: (&query.keypoints[t.query_index as usize]).into(),
                        database: (&db.keypoints[t.db_index as usize]).into(),
                        score: t.score,
                    })
                    .collect();
                let label_id = ctx.label_of(img.image_id);
                Some(Candidate {
                    image_id: img.image_id,
                    label_id,
                    label_name: label_id.and_then(|l| ctx.label_name(l)),
                    score: img.score(),
                    initial_score: img.initial_score,
                    reranked_score: img.reranked_score,
                    frame: Frame {
                        roi: ctx.roi(img.image_id).unwrap_or(Roi::new(0, 0, db.roi_width, db.roi_height)),
                        width: db.roi_width,
                        height: db.roi_height,
                    },
                    matches,
                })
            })
            .collect();
        Self {
            generation: result.generation,
            labels: ranked(&result.labels),
            image_scoring: ranked(&result.image_scoring),
            candidates,
            query_frame: Frame { roi: query_roi, width: query.roi_width, height: query.roi_height },
            query_keypoints: query.len(),
            config: result.config,
            timing: result.timing,
        }
    }
}
