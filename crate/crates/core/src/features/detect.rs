//! Determinant-of-Hessian scale-space detector with a single second-moment
//! shape adaptation step.

use nalgebra::{Matrix2, SymmetricEigen};

use super::descriptor::describe_patch;
use super::{Descriptor, DescriptorVariant, EllipseKeypoint, FeatureError, GrayImage, MIN_DETECT_SIZE};
use crate::geometry::AffineShape;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub octaves: usize,
    pub scales_per_octave: usize,
    /// Blur of the first level of every octave, in octave pixels.
    pub sigma0: f32,
    /// Minimum scale-normalized determinant-of-Hessian response.
    pub threshold: f32,
    /// Ellipse radius in units of the detection scale.
    pub ellipse_radius: f32,
    /// Second-moment integration window, in units of the detection scale.
    pub integration_factor: f32,
    /// Upper bound on the ellipse axis ratio.
    pub max_anisotropy: f32,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            octaves: 3,
            scales_per_octave: 4,
            sigma0: 1.6,
            threshold: 0.001,
            ellipse_radius: 2.0,
            integration_factor: 2.0,
            max_anisotropy: 4.0,
        }
    }
}

impl DetectorParams {
    fn level_sigma(&self, s: f32) -> f32 {
        self.sigma0 * 2f32.powf(s / self.scales_per_octave as f32)
    }
}

/// Keypoints only, with default parameters.
pub fn detect_keypoints(image: &GrayImage) -> Result<Vec<EllipseKeypoint>, FeatureError> {
    Ok(run(image, &DetectorParams::default(), None)?.0)
}

pub(crate) fn detect_and_describe(
    image: &GrayImage,
    variant: DescriptorVariant,
    params: &DetectorParams,
) -> Result<(Vec<EllipseKeypoint>, Vec<Descriptor>), FeatureError> {
    run(image, params, Some(variant))
}

/// Scale-normalized determinant of the Hessian; zero on the one-pixel border.
fn hessian_response(level: &GrayImage, sigma: f32) -> Vec<f32> {
    let (w, h) = (level.width(), level.height());
    let norm = sigma.powi(4);
    let mut out = vec![0.0f32; w * h];
    let d = level.data();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let c = d[i];
            let lxx = d[i + 1] - 2.0 * c + d[i - 1];
            let lyy = d[i + w] - 2.0 * c + d[i - w];
            let lxy = (d[i + w + 1] - d[i + w - 1] - d[i - w + 1] + d[i - w - 1]) * 0.25;
            out[i] = norm * (lxx * lyy - lxy * lxy);
        }
    }
    out
}

/// Strict maximum over the 3×3×3 neighborhood under the total order
/// (response, then earlier position wins), so a two-pixel plateau still
/// yields exactly one extremum.
fn is_strict_max(responses: &[Vec<f32>], s: usize, x: usize, y: usize, w: usize) -> bool {
    let v = responses[s][y * w + x];
    for (ds, r) in responses[s - 1..=s + 1].iter().enumerate() {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                let rank = (ds, yy, xx).cmp(&(1, y, x));
                if rank == std::cmp::Ordering::Equal {
                    continue;
                }
                let other = r[yy * w + xx];
                if other > v || (other == v && rank == std::cmp::Ordering::Less) {
                    return false;
                }
            }
        }
    }
    true
}

/// Vertex offset of the parabola through `(-1, a), (0, b), (1, c)`, clamped to ±0.5.
fn parabolic_offset(a: f32, b: f32, c: f32) -> f32 {
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

/// Inverse square root of the second-moment matrix at `(x, y)`, scaled to
/// unit determinant. Falls back to identity for flat neighborhoods.
fn adapted_shape(grad_img: &GrayImage, x: usize, y: usize, window_sigma: f32, max_anisotropy: f32) -> Matrix2<f64> {
    let radius = (3.0 * window_sigma).ceil() as isize;
    let inv2s2 = 1.0 / (2.0 * window_sigma as f64 * window_sigma as f64);
    let (mut sxx, mut sxy, mut syy) = (0.0f64, 0.0f64, 0.0f64);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let px = x as isize + dx;
            let py = y as isize + dy;
            let gx = 0.5 * (grad_img.get_clamped(px + 1, py) - grad_img.get_clamped(px - 1, py)) as f64;
            let gy = 0.5 * (grad_img.get_clamped(px, py + 1) - grad_img.get_clamped(px, py - 1)) as f64;
            let wgt = (-((dx * dx + dy * dy) as f64) * inv2s2).exp();
            sxx += wgt * gx * gx;
            sxy += wgt * gx * gy;
            syy += wgt * gy * gy;
        }
    }
    let mu = Matrix2::new(sxx, sxy, sxy, syy);
    let eig = SymmetricEigen::new(mu);
    let (l0, l1) = (eig.eigenvalues[0], eig.eigenvalues[1]);
    let (hi, lo) = if l0 >= l1 { (l0, l1) } else { (l1, l0) };
    if !(hi > 1e-20) {
        return Matrix2::identity();
    }
    let max_ratio = (max_anisotropy as f64).powi(2);
    let lo = lo.max(hi / max_ratio);
    let clamped = |l: f64| if l >= hi { hi } else { lo };
    let scale = (l0.max(l1) * lo).powf(0.25);
    let d0 = scale / clamped(l0).sqrt();
    let d1 = scale / clamped(l1).sqrt();
    let v = eig.eigenvectors;
    v * Matrix2::new(d0, 0.0, 0.0, d1) * v.transpose()
}

fn run(
    image: &GrayImage,
    params: &DetectorParams,
    variant: Option<DescriptorVariant>,
) -> Result<(Vec<EllipseKeypoint>, Vec<Descriptor>), FeatureError> {
    if image.width() < MIN_DETECT_SIZE || image.height() < MIN_DETECT_SIZE {
        return Err(FeatureError::TooSmall {
            width: image.width(),
            height: image.height(),
            min: MIN_DETECT_SIZE,
        });
    }
    let spo = params.scales_per_octave;
    let n_levels = spo + 2;
    let mut keypoints = Vec::new();
    let mut descriptors = Vec::new();

    // Input is assumed to carry a nominal 0.5 px blur.
    let initial = (params.sigma0 * params.sigma0 - 0.25).max(0.0).sqrt();
    let mut base = image.gaussian_blur(initial);

    for octave in 0..params.octaves {
        let (w, h) = (base.width(), base.height());
        if w < 8 || h < 8 {
            break;
        }
        let mut levels = Vec::with_capacity(n_levels);
        levels.push(base.clone());
        for s in 1..n_levels {
            let prev = params.level_sigma((s - 1) as f32);
            let cur = params.level_sigma(s as f32);
            let inc = (cur * cur - prev * prev).sqrt();
            let next = levels[s - 1].gaussian_blur(inc);
            levels.push(next);
        }
        let responses: Vec<Vec<f32>> = levels
            .iter()
            .enumerate()
            .map(|(s, l)| hessian_response(l, params.level_sigma(s as f32)))
            .collect();
        let to_image = (1usize << octave) as f32;

        for s in 1..=spo {
            let r = &responses[s];
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let v = r[y * w + x];
                    if v <= params.threshold || !is_strict_max(&responses, s, x, y, w) {
                        continue;
                    }
                    let i = y * w + x;
                    let dx = parabolic_offset(r[i - 1], v, r[i + 1]);
                    let dy = parabolic_offset(r[i - w], v, r[i + w]);
                    let ds = parabolic_offset(responses[s - 1][i], v, responses[s + 1][i]);
                    let sigma = params.level_sigma(s as f32 + ds);

                    let unit = adapted_shape(
                        &base,
                        x,
                        y,
                        params.integration_factor * sigma,
                        params.max_anisotropy,
                    );
                    let radius = (params.ellipse_radius * sigma * to_image) as f64;
                    let ellipse = unit * unit.transpose() * (radius * radius);
                    let Some(shape) = AffineShape::from_ellipse_matrix(&ellipse) else {
                        continue;
                    };
                    let kp = EllipseKeypoint::new(
                        (x as f32 + dx) * to_image,
                        (y as f32 + dy) * to_image,
                        shape,
                    );
                    if let Some(variant) = variant {
                        let center = ((x as f32 + dx) as f64, (y as f32 + dy) as f64);
                        let linear = shape.matrix() / to_image as f64;
                        let Some(desc) = describe_patch(&levels[s], center, &linear, variant) else {
                            continue;
                        };
                        descriptors.push(desc);
                    }
                    keypoints.push(kp);
                }
            }
        }
        base = levels[spo].downsample2();
    }
    Ok((keypoints, descriptors))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(w: usize, h: usize, cx: f32, cy: f32, sx: f32, sy: f32) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            0.1 + 0.8 * (-(dx * dx) / (2.0 * sx * sx) - (dy * dy) / (2.0 * sy * sy)).exp()
        })
    }

    /// Independent scan for the strongest scale-normalized DoH response over
    /// every pixel and a fine grid of scales, blurring the full-resolution
    /// image directly (no pyramid).
    fn brute_force_peak(img: &GrayImage) -> (usize, usize, f32) {
        let mut best = (0, 0, f32::MIN);
        for step in 0..24 {
            let sigma = 1.6 * 2f32.powf(step as f32 / 8.0);
            let l = img.gaussian_blur(sigma);
            for y in 1..img.height() - 1 {
                for x in 1..img.width() - 1 {
                    let c = l.get(x, y);
                    let lxx = l.get(x + 1, y) - 2.0 * c + l.get(x - 1, y);
                    let lyy = l.get(x, y + 1) - 2.0 * c + l.get(x, y - 1);
                    let lxy = (l.get(x + 1, y + 1) - l.get(x - 1, y + 1) - l.get(x + 1, y - 1)
                        + l.get(x - 1, y - 1))
                        * 0.25;
                    let r = sigma.powi(4) * (lxx * lyy - lxy * lxy);
                    if r > best.2 {
                        best = (x, y, r);
                    }
                }
            }
        }
        best
    }

    #[test]
    fn too_small_rejected() {
        let img = GrayImage::new(15, 40);
        assert!(matches!(detect_keypoints(&img), Err(FeatureError::TooSmall { .. })));
    }

    #[test]
    fn constant_image_yields_nothing() {
        let img = GrayImage::from_fn(64, 64, |_, _| 0.7);
        assert!(detect_keypoints(&img).unwrap().is_empty());
    }

    #[test]
    fn isotropic_blob_single_keypoint() {
        let img = blob(128, 128, 64.0, 64.0, 6.0, 6.0);
        let (bx, by, peak) = brute_force_peak(&img);
        assert_eq!((bx, by), (64, 64));
        assert!(peak > DetectorParams::default().threshold);

        let kps = detect_keypoints(&img).unwrap();
        assert_eq!(kps.len(), 1, "{kps:?}");
        let kp = kps[0];
        assert!(((kp.x - 64.0).powi(2) + (kp.y - 64.0).powi(2)).sqrt() < 1.5);
        let ratio = kp.shape.a / kp.shape.c;
        assert!((0.8..=1.25).contains(&ratio), "ratio {ratio}");
        assert_eq!(kp.theta(), 0.0);
    }

    #[test]
    fn stretched_blob_is_anisotropic() {
        let img = blob(160, 128, 80.0, 64.0, 12.0, 6.0);
        let (bx, by, _) = brute_force_peak(&img);
        assert_eq!((bx, by), (80, 64));

        let kps = detect_keypoints(&img).unwrap();
        assert_eq!(kps.len(), 1, "{kps:?}");
        let kp = kps[0];
        assert!(((kp.x - 80.0).powi(2) + (kp.y - 64.0).powi(2)).sqrt() < 1.5);
        let ratio = kp.shape.a / kp.shape.c;
        assert!((1.6..=2.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn translation_equivariance() {
        for (ox, oy) in [(8usize, 4usize), (5, 3), (1, 6)] {
            let a = blob(160, 160, 60.0, 70.0, 5.0, 5.0);
            let b = blob(160, 160, 60.0 + ox as f32, 70.0 + oy as f32, 5.0, 5.0);
            let ka = detect_keypoints(&a).unwrap();
            let kb = detect_keypoints(&b).unwrap();
            assert_eq!(ka.len(), 1);
            assert_eq!(kb.len(), 1);
            assert!((kb[0].x - ka[0].x - ox as f32).abs() < 0.5, "{ka:?} {kb:?}");
            assert!((kb[0].y - ka[0].y - oy as f32).abs() < 0.5, "{ka:?} {kb:?}");
        }
    }

    #[test]
    fn keypoints_lie_inside_image() {
        let img = GrayImage::from_fn(96, 80, |x, y| {
            (((x as f32) * 0.4).sin() * ((y as f32) * 0.3).cos() * 0.5 + 0.5).clamp(0.0, 1.0)
        });
        let kps = detect_keypoints(&img).unwrap();
        assert!(!kps.is_empty());
        for kp in kps {
            assert!(kp.x >= 0.0 && kp.x <= 95.0 && kp.y >= 0.0 && kp.y <= 79.0);
            assert!(kp.shape.det() >= crate::geometry::MIN_SHAPE_DET);
        }
    }
}
