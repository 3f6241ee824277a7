//! SIFT-style gradient histograms over affinely normalized patches.

use nalgebra::Matrix2;

use super::{Descriptor, DescriptorVariant, EllipseKeypoint, FeatureError, GrayImage};

pub const DESCRIPTOR_DIM: usize = 128;
const SPATIAL_BINS: usize = 4;
const ORIENTATION_BINS: usize = 8;
const PATCH_SIZE: usize = 41;
/// Measurement region relative to the keypoint ellipse.
const MAGNIFICATION: f64 = 3.0;
const CLAMP: f32 = 0.2;

/// Descriptor of the region `(x, y) + 3·A·u`, `u ∈ [-1, 1]²`, sampled from
/// `image`. The image should already be smoothed to roughly the keypoint's
/// scale; [`extract_features`](super::extract_features) takes care of that.
pub fn extract_descriptor(
    image: &GrayImage,
    kp: &EllipseKeypoint,
    variant: DescriptorVariant,
) -> Result<Descriptor, FeatureError> {
    kp.shape.validate().map_err(|e| FeatureError::InvalidInput(e.to_string()))?;
    describe_patch(image, (kp.x as f64, kp.y as f64), &kp.shape.matrix(), variant)
        .ok_or(FeatureError::OutOfBounds)
}

pub(crate) fn describe_patch(
    image: &GrayImage,
    center: (f64, f64),
    shape: &Matrix2<f64>,
    variant: DescriptorVariant,
) -> Option<Descriptor> {
    let map = shape * MAGNIFICATION;
    let ext_x = map[(0, 0)].abs() + map[(0, 1)].abs();
    let ext_y = map[(1, 0)].abs() + map[(1, 1)].abs();
    let (w, h) = (image.width() as f64, image.height() as f64);
    if center.0 + ext_x < 0.0 || center.0 - ext_x > w - 1.0 || center.1 + ext_y < 0.0 || center.1 - ext_y > h - 1.0 {
        return None;
    }

    let coord = |k: usize| -1.0 + 2.0 * k as f64 / (PATCH_SIZE - 1) as f64;
    let mut patch = [[0.0f32; PATCH_SIZE]; PATCH_SIZE];
    for (r, row) in patch.iter_mut().enumerate() {
        let v = coord(r);
        for (c, px) in row.iter_mut().enumerate() {
            let u = coord(c);
            let x = center.0 + map[(0, 0)] * u + map[(0, 1)] * v;
            let y = center.1 + map[(1, 0)] * u + map[(1, 1)] * v;
            *px = image.sample(x as f32, y as f32);
        }
    }

    let mut hist = [0.0f32; DESCRIPTOR_DIM];
    let two_pi = std::f32::consts::TAU;
    for r in 1..PATCH_SIZE - 1 {
        let v = coord(r) as f32;
        for c in 1..PATCH_SIZE - 1 {
            let u = coord(c) as f32;
            let gx = patch[r][c + 1] - patch[r][c - 1];
            let gy = patch[r + 1][c] - patch[r - 1][c];
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let weight = mag * (-(u * u + v * v) / 2.0).exp();
            let angle = gy.atan2(gx).rem_euclid(two_pi);

            let bx = (u + 1.0) * 0.5 * SPATIAL_BINS as f32 - 0.5;
            let by = (v + 1.0) * 0.5 * SPATIAL_BINS as f32 - 0.5;
            let bo = angle / two_pi * ORIENTATION_BINS as f32;
            let (x0, y0, o0) = (bx.floor(), by.floor(), bo.floor());
            let (fx, fy, fo) = (bx - x0, by - y0, bo - o0);

            for (iy, wy) in [(y0 as isize, 1.0 - fy), (y0 as isize + 1, fy)] {
                if !(0..SPATIAL_BINS as isize).contains(&iy) {
                    continue;
                }
                for (ix, wx) in [(x0 as isize, 1.0 - fx), (x0 as isize + 1, fx)] {
                    if !(0..SPATIAL_BINS as isize).contains(&ix) {
                        continue;
                    }
                    for (io, wo) in [(o0 as usize, 1.0 - fo), (o0 as usize + 1, fo)] {
                        let io = io % ORIENTATION_BINS;
                        let idx = (iy as usize * SPATIAL_BINS + ix as usize) * ORIENTATION_BINS + io;
                        hist[idx] += weight * wy * wx * wo;
                    }
                }
            }
        }
    }

    let sift = sift_normalize(&hist);
    Some(match variant {
        DescriptorVariant::Sift => sift,
        DescriptorVariant::RootSift => root_sift(&sift.0).expect("sift output is non-negative"),
    })
}

/// L2-normalize, clamp components at 0.2, renormalize. Zero stays zero.
pub fn sift_normalize(raw: &[f32; DESCRIPTOR_DIM]) -> Descriptor {
    let norm = raw.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Descriptor::ZERO;
    }
    let mut clamped = [0.0f64; DESCRIPTOR_DIM];
    for (c, &v) in clamped.iter_mut().zip(raw) {
        *c = (v as f64 / norm).min(CLAMP as f64);
    }
    let norm2 = clamped.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = [0.0f32; DESCRIPTOR_DIM];
    for (o, c) in out.iter_mut().zip(clamped) {
        *o = (c / norm2) as f32;
    }
    Descriptor(out)
}

/// Component-wise square root of the L1-normalized input.
pub fn root_sift(sift: &[f32; DESCRIPTOR_DIM]) -> Result<Descriptor, FeatureError> {
    if let Some((i, v)) = sift.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(FeatureError::InvalidInput(format!("component {i} is {v}")));
    }
    let l1: f64 = sift.iter().map(|&v| v as f64).sum();
    if l1 == 0.0 {
        return Ok(Descriptor::ZERO);
    }
    let mut out = [0.0f32; DESCRIPTOR_DIM];
    for (o, &v) in out.iter_mut().zip(sift) {
        *o = (v as f64 / l1).sqrt() as f32;
    }
    Ok(Descriptor(out))
}

/// Re-expresses a stored descriptor in another variant. SIFT vectors are
/// unit L2 after post-processing, so squaring a RootSIFT vector and
/// renormalizing recovers the SIFT vector.
pub fn convert_variant(d: &Descriptor, from: DescriptorVariant, to: DescriptorVariant) -> Descriptor {
    match (from, to) {
        (DescriptorVariant::Sift, DescriptorVariant::RootSift) => root_sift(&d.0).unwrap_or(Descriptor::ZERO),
        (DescriptorVariant::RootSift, DescriptorVariant::Sift) => {
            let sq = d.0.map(|v| v * v);
            let norm = sq.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                Descriptor::ZERO
            } else {
                Descriptor(sq.map(|v| (v as f64 / norm) as f32))
            }
        }
        _ => *d,
    }
}
