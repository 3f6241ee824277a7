//! Image scores, spatial reranking, and the two ways of turning image
//! results into label results (label scoring and image scoring).

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ann::ImageId;
use crate::features::FeatureSet;
use crate::geometry::{affine_hypothesis, count_inliers, estimate_homography};
use crate::matching::{MatchSet, MatchTriple};

pub type LabelId = u64;

/// Inlier threshold as a fraction of the database ROI diagonal.
pub const DEFAULT_T_SP_FRAC: f64 = 0.10;
pub const DEFAULT_K_SR: usize = 50;
const MIN_HOMOGRAPHY_INLIERS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("image {0} has no label mapping in the catalog")]
    UnknownImage(ImageId),
    #[error("image {image} refers to unknown label {label}")]
    UnknownLabel { image: ImageId, label: LabelId },
}

/// `Sim`: the sum of triple scores.
pub fn image_score(triples: &[MatchTriple]) -> f64 {
    triples.iter().map(|t| t.score).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub image_id: ImageId,
    pub initial_score: f64,
    pub reranked_score: Option<f64>,
    /// Spatially verified matches; present iff the image was reranked.
    pub inlier_matches: Option<MatchSet>,
}

impl ScoredImage {
    pub fn new(set: &MatchSet) -> Self {
        Self { image_id: set.image_id, initial_score: image_score(&set.triples), reranked_score: None, inlier_matches: None }
    }

    pub fn score(&self) -> f64 {
        self.reranked_score.unwrap_or(self.initial_score)
    }

    /// Reranked inliers when available, otherwise the initial matches.
    pub fn current_matches<'a>(&'a self, initial: &'a MatchSet) -> &'a [MatchTriple] {
        self.inlier_matches.as_ref().map_or(&initial.triples, |m| &m.triples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub label_id: LabelId,
    pub score: f64,
    pub best_image_id: Option<ImageId>,
}

/// Descending score, ties by ascending image id.
pub fn sort_images(images: &mut [ScoredImage]) {
    images.sort_by(|a, b| b.score().total_cmp(&a.score()).then(a.image_id.cmp(&b.image_id)));
}

/// Descending score, ties by ascending label id.
pub fn sort_labels(labels: &mut [ScoredLabel]) {
    labels.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.label_id.cmp(&b.label_id)));
}

/// Initial image list from match sets, sorted.
pub fn initial_ranking(sets: &[MatchSet]) -> Vec<ScoredImage> {
    let mut images: Vec<ScoredImage> = sets.iter().map(ScoredImage::new).collect();
    sort_images(&mut images);
    images
}

/// Spatially consistent subset of one image's matches.
///
/// Every match proposes an affine hypothesis; the one with the most inliers
/// (ties: higher match score, then lower database index) seeds a homography
/// fit whose inliers at the same threshold are returned. With fewer than
/// four inliers, or when the fit fails, the hypothesis inliers are returned.
pub fn verify_matches(triples: &[MatchTriple], db: &FeatureSet, query: &FeatureSet, t_sp: f64) -> Vec<MatchTriple> {
    let mut best: Option<(usize, Vec<usize>)> = None;
    for (idx, m) in triples.iter().enumerate() {
        let Ok(hyp) = affine_hypothesis(&db.keypoints[m.db_index as usize], &query.keypoints[m.query_index as usize])
        else {
            continue;
        };
        let inliers = count_inliers(&hyp, triples, &db.keypoints, &query.keypoints, t_sp);
        let better = match &best {
            None => true,
            Some((b, b_in)) => {
                let bm = &triples[*b];
                inliers.len() > b_in.len()
                    || (inliers.len() == b_in.len()
                        && (m.score > bm.score || (m.score == bm.score && m.db_index < bm.db_index)))
            }
        };
        if better {
            best = Some((idx, inliers));
        }
    }
    let Some((_, affine_inliers)) = best else {
        return Vec::new();
    };

    let mut keep = affine_inliers;
    if keep.len() >= MIN_HOMOGRAPHY_INLIERS {
        let pairs: Vec<_> = keep
            .iter()
            .map(|&i| {
                let m = &triples[i];
                (query.keypoints[m.query_index as usize].location(), db.keypoints[m.db_index as usize].location())
            })
            .collect();
        if let Ok(h) = estimate_homography(&pairs) {
            keep = count_inliers(&h, triples, &db.keypoints, &query.keypoints, t_sp);
        }
    }
    keep.into_iter().map(|i| triples[i]).collect()
}

/// Reranks the top `k_sr` candidates (`None` reranks all) by the score of
/// their spatially verified matches and re-sorts the whole list.
pub fn spatial_rerank<F>(
    query: &FeatureSet,
    candidates: Vec<ScoredImage>,
    match_sets: &HashMap<ImageId, MatchSet>,
    features: F,
    k_sr: Option<usize>,
    t_sp_frac: f64,
) -> Vec<ScoredImage>
where
    F: Fn(ImageId) -> Option<Arc<FeatureSet>> + Sync,
{
    let n = k_sr.map_or(candidates.len(), |k| k.min(candidates.len()));
    let mut out = candidates;
    out[..n].par_iter_mut().for_each(|img| {
        let (Some(set), Some(db)) = (match_sets.get(&img.image_id), features(img.image_id)) else {
            return;
        };
        let t_sp = t_sp_frac * db.diagonal();
        let inliers = verify_matches(&set.triples, &db, query, t_sp);
        img.reranked_score = Some(image_score(&inliers));
        img.inlier_matches = Some(MatchSet { image_id: img.image_id, triples: inliers });
    });
    sort_images(&mut out);
    out
}

/// Image-to-label assignment. `None` marks an unlabeled image, which takes
/// part in image ranking but not in label results.
pub struct LabelMap<'a> {
    pub image_labels: &'a HashMap<ImageId, Option<LabelId>>,
    pub labels: &'a [LabelId],
}

impl LabelMap<'_> {
    fn group<'b>(&self, images: &'b [ScoredImage]) -> Result<BTreeMap<LabelId, Vec<&'b ScoredImage>>, ScoringError> {
        let mut groups: BTreeMap<LabelId, Vec<&ScoredImage>> = self.labels.iter().map(|&l| (l, Vec::new())).collect();
        for img in images {
            let label = self.image_labels.get(&img.image_id).ok_or(ScoringError::UnknownImage(img.image_id))?;
            if let Some(label) = label {
                groups
                    .get_mut(label)
                    .ok_or(ScoringError::UnknownLabel { image: img.image_id, label: *label })?
                    .push(img);
            }
        }
        Ok(groups)
    }
}

fn best_image(imgs: &[&ScoredImage]) -> Option<ImageId> {
    imgs.iter()
        .max_by(|a, b| a.score().total_cmp(&b.score()).then(b.image_id.cmp(&a.image_id)))
        .map(|i| i.image_id)
}

/// Label scoring: pool the current matches of all a label's images, keep the
/// best triple per query descriptor (ties: lower image id, then lower
/// database index), and sum. Every catalog label is listed.
pub fn label_score(
    images: &[ScoredImage],
    match_sets: &HashMap<ImageId, MatchSet>,
    map: &LabelMap<'_>,
) -> Result<Vec<ScoredLabel>, ScoringError> {
    let empty = MatchSet::default();
    let mut out = Vec::with_capacity(map.labels.len());
    for (label_id, imgs) in map.group(images)? {
        let mut best: BTreeMap<u32, (f64, ImageId, u32)> = BTreeMap::new();
        for img in &imgs {
            let initial = match_sets.get(&img.image_id).unwrap_or(&empty);
            for t in img.current_matches(initial) {
                let cand = (t.score, img.image_id, t.db_index);
                best.entry(t.query_index)
                    .and_modify(|cur| {
                        let wins = cand.0 > cur.0 || (cand.0 == cur.0 && (cand.1, cand.2) < (cur.1, cur.2));
                        if wins {
                            *cur = cand;
                        }
                    })
                    .or_insert(cand);
            }
        }
        let score = best.values().map(|b| b.0).sum();
        out.push(ScoredLabel { label_id, score, best_image_id: best_image(&imgs) });
    }
    sort_labels(&mut out);
    Ok(out)
}

/// Image scoring: a label takes the score of its best image.
pub fn image_score_labels(images: &[ScoredImage], map: &LabelMap<'_>) -> Result<Vec<ScoredLabel>, ScoringError> {
    let mut out: Vec<ScoredLabel> = map
        .group(images)?
        .into_iter()
        .map(|(label_id, imgs)| {
            let best_image_id = best_image(&imgs);
            let score = imgs.iter().map(|i| i.score()).fold(0.0, f64::max);
            ScoredLabel { label_id, score, best_image_id }
        })
        .collect();
    sort_labels(&mut out);
    Ok(out)
}

/// 1-based position of `label` in a sorted label list. Equal scores are
/// resolved by list order, so ties never improve a rank.
pub fn rank_of(labels: &[ScoredLabel], label: LabelId) -> Option<usize> {
    let pos = labels.iter().position(|l| l.label_id == label)?;
    let score = labels[pos].score;
    let greater = labels.iter().filter(|l| l.score > score).count();
    let equal_before = labels[..pos].iter().filter(|l| l.score == score).count();
    Some(1 + greater + equal_before)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{DescriptorVariant, EllipseKeypoint};
    use crate::geometry::AffineShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(i: u32, j: u32, score: f64) -> MatchTriple {
        MatchTriple { db_index: i, query_index: j, score }
    }

    fn fs(points: &[(f32, f32)]) -> FeatureSet {
        FeatureSet {
            keypoints: points.iter().map(|&(x, y)| EllipseKeypoint::new(x, y, AffineShape::isotropic(4.0))).collect(),
            descriptors: vec![Default::default(); points.len()],
            roi_width: 400,
            roi_height: 300,
            variant: DescriptorVariant::RootSift,
        }
    }

    #[test]
    fn sim_examples() {
        assert_eq!(image_score(&[]), 0.0);
        assert!((image_score(&[t(0, 0, 2.6), t(1, 1, 3.0)]) - 5.6).abs() < 1e-12);
    }

    #[test]
    fn sim_matches_reverse_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let ts: Vec<MatchTriple> = (0..rng.random_range(0..200)).map(|i| t(i, i, rng.random::<f64>() * 10.0)).collect();
            let oracle = ts.iter().rev().fold(0.0, |acc, m| acc + m.score);
            let s = image_score(&ts);
            assert!((s - oracle).abs() <= 1e-9 * oracle.max(1.0));
        }
    }

    #[test]
    fn identity_geometry_keeps_all_matches() {
        let pts: Vec<(f32, f32)> = (0..30).map(|i| (10.0 + 12.0 * (i % 6) as f32, 20.0 + 30.0 * (i / 6) as f32)).collect();
        let f = fs(&pts);
        let triples: Vec<MatchTriple> = (0..30).map(|i| t(i, i, 1.0 + i as f64)).collect();
        let kept = verify_matches(&triples, &f, &f, 50.0);
        assert_eq!(kept, triples);
    }

    #[test]
    fn rerank_recovers_known_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (lin, tr) = ([[1.05f32, 0.1], [-0.08, 0.95]], (15.0f32, -8.0f32));
        let map = |x: f32, y: f32| (lin[0][0] * x + lin[0][1] * y + tr.0, lin[1][0] * x + lin[1][1] * y + tr.1);
        let mut q_pts = Vec::new();
        let mut db_pts = Vec::new();
        for _ in 0..100 {
            let (x, y) = (rng.random_range(20.0..380.0f32), rng.random_range(20.0..280.0f32));
            q_pts.push((x, y));
        }
        // Scrambled matches land well away from where the map sends them.
        for (i, &(x, y)) in q_pts.iter().enumerate() {
            let truth = map(x, y);
            db_pts.push(if i < 60 {
                truth
            } else {
                loop {
                    let p = (rng.random_range(0.0..400.0f32), rng.random_range(0.0..300.0f32));
                    if (p.0 - truth.0).hypot(p.1 - truth.1) > 100.0 {
                        break p;
                    }
                }
            });
        }
        // Shapes consistent with the map for inliers.
        let a = nalgebra::Matrix2::new(lin[0][0] as f64, lin[0][1] as f64, lin[1][0] as f64, lin[1][1] as f64);
        let q_shape = AffineShape::isotropic(4.0);
        let db_shape = AffineShape::from_ellipse_matrix(&(a * q_shape.matrix() * q_shape.matrix().transpose() * a.transpose())).unwrap();
        let mut q = fs(&q_pts);
        let mut db = fs(&db_pts);
        q.keypoints.iter_mut().for_each(|k| k.shape = q_shape);
        db.keypoints.iter_mut().for_each(|k| k.shape = db_shape);
        let triples: Vec<MatchTriple> = (0..100).map(|i| t(i, i, 1.0)).collect();
        let kept = verify_matches(&triples, &db, &q, 0.1 * db.diagonal());
        assert!(kept.iter().all(|m| m.db_index < 60), "outlier kept");
        assert!((55..=65).contains(&kept.len()), "{}", kept.len());
    }

    #[test]
    fn zero_k_sr_preserves_order() {
        let sets = vec![
            MatchSet { image_id: 3, triples: vec![t(0, 0, 5.0)] },
            MatchSet { image_id: 1, triples: vec![t(0, 0, 5.0)] },
            MatchSet { image_id: 2, triples: vec![t(0, 0, 9.0)] },
        ];
        let initial = initial_ranking(&sets);
        assert_eq!(initial.iter().map(|i| i.image_id).collect::<Vec<_>>(), vec![2, 1, 3]);
        let map: HashMap<_, _> = sets.iter().map(|s| (s.image_id, s.clone())).collect();
        let out = spatial_rerank(&fs(&[(0.0, 0.0)]), initial.clone(), &map, |_| None, Some(0), 0.1);
        assert_eq!(out, initial);
    }

    #[test]
    fn rerank_never_increases_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<(f32, f32)> = (0..40).map(|_| (rng.random_range(0.0..400.0), rng.random_range(0.0..300.0))).collect();
        let db = Arc::new(fs(&pts));
        let q_pts: Vec<(f32, f32)> = (0..40).map(|_| (rng.random_range(0.0..400.0), rng.random_range(0.0..300.0))).collect();
        let q = fs(&q_pts);
        let sets: Vec<MatchSet> = (0..5)
            .map(|img| MatchSet {
                image_id: img,
                triples: (0..20).map(|k| t(rng.random_range(0..40), k, rng.random::<f64>() * 3.0)).collect(),
            })
            .collect();
        let map: HashMap<_, _> = sets.iter().map(|s| (s.image_id, s.clone())).collect();
        let out = spatial_rerank(&q, initial_ranking(&sets), &map, |_| Some(db.clone()), None, 0.1);
        for img in &out {
            let r = img.reranked_score.unwrap();
            assert!(r <= img.initial_score + 1e-12);
            let inl = img.inlier_matches.as_ref().unwrap();
            assert!(inl.triples.iter().all(|m| map[&img.image_id].triples.contains(m)));
            assert!((image_score(&inl.triples) - r).abs() < 1e-12);
        }
        assert!(out.windows(2).all(|w| w[0].score() >= w[1].score()));
    }

    fn scored(id: ImageId, triples: Vec<MatchTriple>) -> (ScoredImage, MatchSet) {
        let set = MatchSet { image_id: id, triples };
        (ScoredImage::new(&set), set)
    }

    #[test]
    fn label_score_example() {
        let (a, sa) = scored(1, vec![t(0, 7, 3.0), t(1, 8, 2.0)]);
        let (b, sb) = scored(2, vec![t(4, 7, 5.0)]);
        let sets: HashMap<_, _> = [(1, sa), (2, sb)].into();
        let image_labels: HashMap<ImageId, Option<LabelId>> = [(1, Some(10)), (2, Some(10))].into();
        let map = LabelMap { image_labels: &image_labels, labels: &[10, 11] };
        let labels = label_score(&[b.clone(), a.clone()], &sets, &map).unwrap();
        assert_eq!(labels[0], ScoredLabel { label_id: 10, score: 7.0, best_image_id: Some(1) });
        assert_eq!(labels[1], ScoredLabel { label_id: 11, score: 0.0, best_image_id: None });

        let by_image = image_score_labels(&[a, b], &map).unwrap();
        assert_eq!(by_image[0].score, 5.0);
        assert_eq!(by_image[0].best_image_id, Some(1));
    }

    #[test]
    fn single_image_label_scores_agree() {
        let (a, sa) = scored(1, vec![t(0, 1, 2.0), t(3, 2, 4.0)]);
        let sets: HashMap<_, _> = [(1, sa)].into();
        let image_labels: HashMap<ImageId, Option<LabelId>> = [(1, Some(5))].into();
        let map = LabelMap { image_labels: &image_labels, labels: &[5] };
        let l = label_score(std::slice::from_ref(&a), &sets, &map).unwrap();
        let i = image_score_labels(&[a], &map).unwrap();
        assert_eq!(l, i);
        assert_eq!(l[0].score, 6.0);
    }

    #[test]
    fn mapping_errors() {
        let (a, sa) = scored(1, vec![t(0, 1, 2.0)]);
        let sets: HashMap<_, _> = [(1, sa)].into();
        let none: HashMap<ImageId, Option<LabelId>> = HashMap::new();
        let map = LabelMap { image_labels: &none, labels: &[5] };
        assert_eq!(label_score(std::slice::from_ref(&a), &sets, &map), Err(ScoringError::UnknownImage(1)));
        let bad: HashMap<ImageId, Option<LabelId>> = [(1, Some(9))].into();
        let map = LabelMap { image_labels: &bad, labels: &[5] };
        assert_eq!(image_score_labels(&[a.clone()], &map), Err(ScoringError::UnknownLabel { image: 1, label: 9 }));
        let unlabeled: HashMap<ImageId, Option<LabelId>> = [(1, None)].into();
        let map = LabelMap { image_labels: &unlabeled, labels: &[5] };
        assert_eq!(label_score(&[a], &sets, &map).unwrap()[0].score, 0.0);
    }

    /// Random per-image match sets with one triple per query descriptor,
    /// as produced by one-vs-many matching.
    fn random_case(rng: &mut ChaCha8Rng) -> (Vec<ScoredImage>, HashMap<ImageId, MatchSet>, HashMap<ImageId, Option<LabelId>>, Vec<LabelId>) {
        let n_labels = rng.random_range(1..6);
        let labels: Vec<LabelId> = (0..n_labels).collect();
        let mut images = Vec::new();
        let mut sets = HashMap::new();
        let mut image_labels = HashMap::new();
        for id in 0..rng.random_range(1..12) {
            let mut js: Vec<u32> = (0..30).filter(|_| rng.random_bool(0.4)).collect();
            js.dedup();
            let triples = js.iter().map(|&j| t(rng.random_range(0..50), j, (rng.random_range(0..20) as f64) * 0.5)).collect();
            let (img, set) = scored(id, triples);
            images.push(img);
            sets.insert(id, set);
            image_labels.insert(id, Some(rng.random_range(0..n_labels)));
        }
        sort_images(&mut images);
        (images, sets, image_labels, labels)
    }

    #[test]
    fn label_scoring_dominates_image_scoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let (images, sets, image_labels, labels) = random_case(&mut rng);
            let map = LabelMap { image_labels: &image_labels, labels: &labels };
            let by_label = label_score(&images, &sets, &map).unwrap();
            let by_image = image_score_labels(&images, &map).unwrap();
            for l in &by_image {
                let agg = by_label.iter().find(|x| x.label_id == l.label_id).unwrap();
                assert!(agg.score >= l.score - 1e-12);
            }
            // The leading label under image scoring owns a top-scoring image.
            if let Some(top) = images.first() {
                assert_eq!(by_image[0].score, top.score());
                let lead = by_image[0].best_image_id.unwrap();
                assert_eq!(images.iter().find(|i| i.image_id == lead).unwrap().score(), top.score());
            }
        }
    }

    #[test]
    fn pessimistic_rank() {
        let labels = vec![
            ScoredLabel { label_id: 1, score: 5.0, best_image_id: None },
            ScoredLabel { label_id: 2, score: 5.0, best_image_id: None },
            ScoredLabel { label_id: 3, score: 1.0, best_image_id: None },
        ];
        assert_eq!(rank_of(&labels, 1), Some(1));
        assert_eq!(rank_of(&labels, 2), Some(2));
        assert_eq!(rank_of(&labels, 3), Some(3));
        assert_eq!(rank_of(&labels, 4), None);
    }
}
