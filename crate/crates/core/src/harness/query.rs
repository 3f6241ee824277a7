use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{HarnessError, QueryConfig};
use crate::ann::ImageId;
use crate::catalog::Generation;
use crate::features::{extract_features, FeatureSet, GrayImage, Roi};
use crate::harness::Algorithm;
use crate::matching::{build_query_forest, match_one_vs_many, match_one_vs_one, MatchSet};
use crate::scoring::{image_score_labels, initial_ranking, label_score, spatial_rerank, ScoredImage, ScoredLabel};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryTiming {
    pub matching_secs: f64,
    pub rerank_secs: f64,
    pub total_secs: f64,
}

/// Labels ranked under both label scoring and image scoring, plus the image
/// ranking they derive from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub generation: u64,
    /// Label scoring (de-duplicated matches pooled per label).
    pub labels: Vec<ScoredLabel>,
    /// Image scoring (each label takes its best image's score).
    pub image_scoring: Vec<ScoredLabel>,
    pub images: Vec<ScoredImage>,
    /// Initial (pre-verification) matches per database image.
    #[serde(skip)]
    pub match_sets: HashMap<ImageId, MatchSet>,
    pub config: QueryConfig,
    pub timing: QueryTiming,
}

fn check_compatible(generation: &Generation, config: &QueryConfig) -> Result<(), HarnessError> {
    config.validate()?;
    if generation.variant() != config.descriptor_variant {
        return Err(HarnessError::VariantMismatch { built: generation.variant(), requested: config.descriptor_variant });
    }
    if config.algorithm == Algorithm::OneVsMany && generation.index.backend() != config.backend {
        return Err(HarnessError::BackendMismatch { built: generation.index.backend(), requested: config.backend });
    }
    Ok(())
}

/// Preprocesses and describes the ROI, then runs [`run_query_features`].
pub fn run_query(
    generation: &Generation,
    image: &GrayImage,
    roi: Roi,
    config: &QueryConfig,
) -> Result<(RankedResult, FeatureSet), HarnessError> {
    check_compatible(generation, config)?;
    let features = extract_features(image, roi, generation.variant())?;
    let result = run_query_features(generation, &features, None, config)?;
    Ok((result, features))
}

/// Match, score, rerank and rank labels for an already described query.
/// `exclude` removes one database image from consideration (evaluation
/// queries drawn from the catalog itself).
pub fn run_query_features(
    generation: &Generation,
    query: &FeatureSet,
    exclude: Option<ImageId>,
    config: &QueryConfig,
) -> Result<RankedResult, HarnessError> {
    check_compatible(generation, config)?;
    let start = Instant::now();
    let sets: Vec<MatchSet> = match config.algorithm {
        Algorithm::OneVsOne => {
            let forest = build_query_forest(query, config.forest_params());
            generation
                .image_ids()
                .par_iter()
                .filter(|&&id| Some(id) != exclude)
                .filter_map(|&id| {
                    let db = generation.features(id)?;
                    let set = match_one_vs_one(id, &db, query, config.t_ratio, forest.as_ref());
                    (!set.is_empty()).then_some(set)
                })
                .collect()
        }
        Algorithm::OneVsMany => {
            if query.is_empty() {
                Vec::new()
            } else {
                match_one_vs_many(query, &generation.index, config.k, config.delta, exclude, config.max_checks)?
            }
        }
    };
    let matching_secs = start.elapsed().as_secs_f64();

    let rerank_start = Instant::now();
    let match_sets: HashMap<ImageId, MatchSet> = sets.iter().map(|s| (s.image_id, s.clone())).collect();
    let images = spatial_rerank(
        query,
        initial_ranking(&sets),
        &match_sets,
        |id| generation.features(id),
        config.k_sr,
        config.t_sp_frac,
    );
    let map = generation.label_map();
    let labels = label_score(&images, &match_sets, &map)?;
    let image_scoring = image_score_labels(&images, &map)?;
    let rerank_secs = rerank_start.elapsed().as_secs_f64();

    Ok(RankedResult {
        generation: generation.id(),
        labels,
        image_scoring,
        images,
        match_sets,
        config: *config,
        timing: QueryTiming { matching_secs, rerank_secs, total_secs: start.elapsed().as_secs_f64() },
    })
}
