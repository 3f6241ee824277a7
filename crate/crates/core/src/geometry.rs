//! Affine shapes, per-match affine hypotheses, inlier counting and
//! normalized-DLT homography estimation.
//!
//! All maps go from query-image coordinates into database-image coordinates.

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::EllipseKeypoint;
use crate::matching::MatchTriple;

/// Shapes whose determinant falls below this are rejected at extraction.
pub const MIN_SHAPE_DET: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid affine shape a={a}, b={b}, c={c}")]
    InvalidShape { a: f64, b: f64, c: f64 },
    #[error("homography estimation needs at least 4 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("homography estimation failed: {0}")]
    EstimationFailed(&'static str),
}

/// Lower-triangular shape matrix `[[a, 0], [b, c]]` in pixel units.
///
/// Maps the unit circle onto the keypoint's elliptical region, so `A·Aᵀ`
/// is the ellipse's covariance-like matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineShape {
    pub a: f32,
    pub b: f32,
    pub c: f32,
}

impl AffineShape {
    pub fn new(a: f32, b: f32, c: f32) -> Result<Self, GeometryError> {
        let shape = Self { a, b, c };
        shape.validate()?;
        Ok(shape)
    }

    pub fn isotropic(radius: f32) -> Self {
        Self { a: radius, b: 0.0, c: radius }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let (a, b, c) = (self.a as f64, self.b as f64, self.c as f64);
        if !(a > 0.0 && c > 0.0 && b.is_finite() && a.is_finite() && c.is_finite()) {
            return Err(GeometryError::InvalidShape { a, b, c });
        }
        Ok(())
    }

    pub fn det(&self) -> f64 {
        self.a as f64 * self.c as f64
    }

    pub fn matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.a as f64, 0.0, self.b as f64, self.c as f64)
    }

    /// Canonical (gravity-aligned) shape for the ellipse `x ↦ xᵀ M⁻¹ x ≤ 1`,
    /// i.e. the Cholesky factor of the symmetric positive-definite `M`.
    pub fn from_ellipse_matrix(m: &Matrix2<f64>) -> Option<Self> {
        let chol = m.cholesky()?;
        let l = chol.l();
        let shape = Self {
            a: l[(0, 0)] as f32,
            b: l[(1, 0)] as f32,
            c: l[(1, 1)] as f32,
        };
        (shape.validate().is_ok() && shape.det() >= MIN_SHAPE_DET).then_some(shape)
    }
}

/// Anything that can carry query points into the database frame.
pub trait PointMap {
    /// `None` when the point maps to infinity.
    fn project(&self, p: Vector2<f64>) -> Option<Vector2<f64>>;
}

/// Affine map built from a single correspondence of elliptical keypoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineHypothesis {
    pub linear: Matrix2<f64>,
    pub translation: Vector2<f64>,
}

impl AffineHypothesis {
    pub fn identity() -> Self {
        Self { linear: Matrix2::identity(), translation: Vector2::zeros() }
    }
}

impl PointMap for AffineHypothesis {
    fn project(&self, p: Vector2<f64>) -> Option<Vector2<f64>> {
        Some(self.linear * p + self.translation)
    }
}

/// Hypothesis taking the query ellipse onto the database ellipse:
/// linear part `A_db · A_q⁻¹`, translation chosen so the query location
/// lands exactly on the database location.
pub fn affine_hypothesis(
    kp_db: &EllipseKeypoint,
    kp_q: &EllipseKeypoint,
) -> Result<AffineHypothesis, GeometryError> {
    kp_db.shape.validate()?;
    kp_q.shape.validate()?;
    let q = kp_q.shape.matrix();
    // Lower-triangular inverse, written out to avoid a general solve.
    let q_inv = Matrix2::new(
        1.0 / q[(0, 0)],
        0.0,
        -q[(1, 0)] / (q[(0, 0)] * q[(1, 1)]),
        1.0 / q[(1, 1)],
    );
    let linear = kp_db.shape.matrix() * q_inv;
    let translation = kp_db.location() - linear * kp_q.location();
    Ok(AffineHypothesis { linear, translation })
}

/// Indices (into `matches`) of the matches whose projected query location
/// lies strictly within `t_sp` pixels of the database location.
pub fn count_inliers<M: PointMap + ?Sized>(
    map: &M,
    matches: &[MatchTriple],
    kps_db: &[EllipseKeypoint],
    kps_q: &[EllipseKeypoint],
    t_sp: f64,
) -> Vec<usize> {
    let t_sq = t_sp * t_sp;
    matches
        .iter()
        .enumerate()
        .filter_map(|(idx, m)| {
            let db = kps_db[m.db_index as usize].location();
            let projected = map.project(kps_q[m.query_index as usize].location())?;
            ((projected - db).norm_squared() < t_sq).then_some(idx)
        })
        .collect()
}

/// Projective map, stored with `h[2][2] == 1` whenever that entry is nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn from_matrix(h: Matrix3<f64>) -> Result<Self, GeometryError> {
        let h = if h[(2, 2)].abs() > 1e-12 { h / h[(2, 2)] } else { h };
        if !h.iter().all(|v| v.is_finite()) || h.determinant().abs() <= 1e-12 {
            return Err(GeometryError::EstimationFailed("singular homography"));
        }
        Ok(Self(h))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

impl PointMap for Homography {
    fn project(&self, p: Vector2<f64>) -> Option<Vector2<f64>> {
        let v = self.0 * Vector3::new(p.x, p.y, 1.0);
        (v.z.abs() > 1e-12).then(|| Vector2::new(v.x / v.z, v.y / v.z))
    }
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn hartley_normalizer(points: impl Iterator<Item = Vector2<f64>> + Clone) -> Option<Matrix3<f64>> {
    let n = points.clone().count() as f64;
    let centroid = points.clone().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.map(|p| (p - centroid).norm()).sum::<f64>() / n;
    if mean_dist <= f64::EPSILON {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * centroid.x, 0.0, s, -s * centroid.y, 0.0, 0.0, 1.0))
}

fn apply_affine3(t: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(
        t[(0, 0)] * p.x + t[(0, 1)] * p.y + t[(0, 2)],
        t[(1, 0)] * p.x + t[(1, 1)] * p.y + t[(1, 2)],
    )
}

/// Least-squares homography from `(src, dst)` pairs via the normalized DLT.
pub fn estimate_homography(pairs: &[(Vector2<f64>, Vector2<f64>)]) -> Result<Homography, GeometryError> {
    if pairs.len() < 4 {
        return Err(GeometryError::TooFewCorrespondences(pairs.len()));
    }
    let t_src = hartley_normalizer(pairs.iter().map(|p| p.0))
        .ok_or(GeometryError::EstimationFailed("coincident source points"))?;
    let t_dst = hartley_normalizer(pairs.iter().map(|p| p.1))
        .ok_or(GeometryError::EstimationFailed("coincident destination points"))?;

    // Pad to at least 9 rows so the SVD exposes the full right null space.
    let rows = (2 * pairs.len()).max(9);
    let mut design = DMatrix::<f64>::zeros(rows, 9);
    for (k, (src, dst)) in pairs.iter().enumerate() {
        let s = apply_affine3(&t_src, src);
        let d = apply_affine3(&t_dst, dst);
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r = 2 * k;
        for (col, val) in [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u].into_iter().enumerate() {
            design[(r, col)] = val;
        }
        for (col, val) in [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v].into_iter().enumerate() {
            design[(r + 1, col)] = val;
        }
    }

    let svd = design.svd(false, true);
    let v_t = svd.v_t.ok_or(GeometryError::EstimationFailed("svd did not converge"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let s_max = svd.singular_values[order[order.len() - 1]];
    let s_second = svd.singular_values[order[1]];
    if s_max <= 0.0 || s_second / s_max < 1e-9 {
        return Err(GeometryError::EstimationFailed("rank-deficient design matrix"));
    }
    let null = v_t.row(order[0]);
    let h_norm = Matrix3::from_row_slice(null.clone_owned().as_slice());
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or(GeometryError::EstimationFailed("singular normalizer"))?;
    Homography::from_matrix(t_dst_inv * h_norm * t_src)
}
