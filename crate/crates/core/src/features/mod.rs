//! ROI preprocessing, elliptical keypoint detection and SIFT / RootSIFT
//! descriptors.
//!
//! Keypoints are gravity aligned: the orientation is always zero, so the
//! shape matrix alone fixes the measurement frame. Coordinates are in the
//! preprocessed ROI frame (cropped, then resized so the long side is
//! [`STANDARD_SIZE`] pixels).

mod descriptor;
mod detect;
mod image;
pub mod sidecar;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::AffineShape;

pub use self::descriptor::{convert_variant, extract_descriptor, root_sift, sift_normalize, DESCRIPTOR_DIM};
pub use self::detect::{detect_keypoints, DetectorParams};
pub use self::image::{GrayImage, Roi};

/// Target length of the longer ROI side after preprocessing.
pub const STANDARD_SIZE: usize = 512;
/// Upscaling is capped at this factor.
pub const MAX_UPSCALE: f64 = 2.0;
/// Smallest image the detector accepts, per side.
pub const MIN_DETECT_SIZE: usize = 16;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("roi {0} does not intersect the image")]
    InvalidRoi(Roi),
    #[error("image {width}x{height} is smaller than the {min}x{min} minimum")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("descriptor measurement region lies outside the image")]
    OutOfBounds,
    #[error("invalid descriptor input: {0}")]
    InvalidInput(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("feature file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Descriptor post-processing variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum DescriptorVariant {
    #[serde(rename = "SIFT")]
    Sift,
    #[default]
    #[serde(rename = "RootSIFT")]
    RootSift,
}

impl DescriptorVariant {
    pub fn code(self) -> u8 {
        match self {
            DescriptorVariant::Sift => 0,
            DescriptorVariant::RootSift => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DescriptorVariant::Sift),
            1 => Some(DescriptorVariant::RootSift),
            _ => None,
        }
    }
}

impl std::str::FromStr for DescriptorVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sift" => Ok(DescriptorVariant::Sift),
            "rootsift" | "root-sift" | "root_sift" => Ok(DescriptorVariant::RootSift),
            other => Err(format!("unknown descriptor variant {other:?}")),
        }
    }
}

impl std::fmt::Display for DescriptorVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DescriptorVariant::Sift => "SIFT",
            DescriptorVariant::RootSift => "RootSIFT",
        })
    }
}

/// Keypoint location plus elliptical shape. Orientation is fixed at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseKeypoint {
    pub x: f32,
    pub y: f32,
    pub shape: AffineShape,
}

impl EllipseKeypoint {
    pub fn new(x: f32, y: f32, shape: AffineShape) -> Self {
        Self { x, y, shape }
    }

    pub fn location(&self) -> Vector2<f64> {
        Vector2::new(self.x as f64, self.y as f64)
    }

    /// Gravity-vector assumption: every keypoint points "up".
    pub const fn theta(&self) -> f32 {
        0.0
    }
}

/// 128-dimensional non-negative descriptor.
#[derive(Clone, Copy, PartialEq)]
pub struct Descriptor(pub [f32; DESCRIPTOR_DIM]);

impl Descriptor {
    pub const ZERO: Descriptor = Descriptor([0.0; DESCRIPTOR_DIM]);

    pub fn as_array(&self) -> &[f32; DESCRIPTOR_DIM] {
        &self.0
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// Non-negative and either all-zero or unit length (±1e-6).
    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|&v| v >= 0.0 && v.is_finite())
            && (self.is_zero() || (self.l2_norm() - 1.0).abs() <= 1e-6)
    }
}

impl std::fmt::Debug for Descriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Descriptor(|v|={:.6}, {:?}..)", self.l2_norm(), &self.0[..4])
    }
}

impl Default for Descriptor {
    fn default() -> Self {
        Self::ZERO
    }
}

/// Keypoints and their descriptors for one preprocessed ROI.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub keypoints: Vec<EllipseKeypoint>,
    pub descriptors: Vec<Descriptor>,
    pub roi_width: u32,
    pub roi_height: u32,
    pub variant: DescriptorVariant,
}

impl FeatureSet {
    pub fn empty(roi_width: u32, roi_height: u32, variant: DescriptorVariant) -> Self {
        Self { keypoints: Vec::new(), descriptors: Vec::new(), roi_width, roi_height, variant }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn diagonal(&self) -> f64 {
        (self.roi_width as f64).hypot(self.roi_height as f64)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.keypoints.len() != self.descriptors.len() {
            return Err(FeatureError::Format(format!(
                "{} keypoints but {} descriptors",
                self.keypoints.len(),
                self.descriptors.len()
            )));
        }
        for kp in &self.keypoints {
            kp.shape.validate().map_err(|e| FeatureError::Format(e.to_string()))?;
        }
        Ok(())
    }
}

/// Scale factor applied to a `w × h` ROI by [`preprocess_roi`].
pub fn standard_scale(w: usize, h: usize) -> f64 {
    (STANDARD_SIZE as f64 / w.max(h) as f64).min(MAX_UPSCALE)
}

/// Crops `roi` (clipped to the image) and resizes it so the longer side is
/// [`STANDARD_SIZE`], never upscaling past [`MAX_UPSCALE`].
pub fn preprocess_roi(image: &GrayImage, roi: Roi) -> Result<GrayImage, FeatureError> {
    let clipped = roi.clip(image.width(), image.height()).ok_or(FeatureError::InvalidRoi(roi))?;
    let (w, h) = (clipped.w as usize, clipped.h as usize);
    let crop = image.crop(clipped.x as usize, clipped.y as usize, w, h);
    let scale = standard_scale(w, h);
    let out_w = ((w as f64 * scale).round() as usize).max(1);
    let out_h = ((h as f64 * scale).round() as usize).max(1);
    Ok(crop.resize(out_w, out_h))
}

/// Preprocess, detect and describe.
pub fn extract_features(
    image: &GrayImage,
    roi: Roi,
    variant: DescriptorVariant,
) -> Result<FeatureSet, FeatureError> {
    let pre = preprocess_roi(image, roi)?;
    extract_preprocessed(&pre, variant, &DetectorParams::default())
}

/// Detect and describe on an already preprocessed ROI image.
pub fn extract_preprocessed(
    pre: &GrayImage,
    variant: DescriptorVariant,
    params: &DetectorParams,
) -> Result<FeatureSet, FeatureError> {
    let (keypoints, descriptors) = detect::detect_and_describe(pre, variant, params)?;
    Ok(FeatureSet {
        keypoints,
        descriptors,
        roi_width: pre.width() as u32,
        roi_height: pre.height() as u32,
        variant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocess_halves_large_roi() {
        let img = GrayImage::new(1024, 512);
        let out = preprocess_roi(&img, Roi::full(&img)).unwrap();
        assert_eq!((out.width(), out.height()), (512, 256));
    }

    #[test]
    fn preprocess_caps_upscale() {
        let img = GrayImage::new(300, 300);
        let out = preprocess_roi(&img, Roi::new(50, 50, 100, 100)).unwrap();
        assert_eq!((out.width(), out.height()), (200, 200));
    }

    #[test]
    fn preprocess_identity_at_standard_size() {
        let img = GrayImage::from_fn(512, 341, |x, y| ((x * 7 + y * 3) % 11) as f32 / 10.0);
        let out = preprocess_roi(&img, Roi::full(&img)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn preprocess_rejects_disjoint_roi() {
        let img = GrayImage::new(64, 64);
        assert!(matches!(preprocess_roi(&img, Roi::new(70, 0, 10, 10)), Err(FeatureError::InvalidRoi(_))));
        assert!(matches!(preprocess_roi(&img, Roi::new(0, 0, 0, 10)), Err(FeatureError::InvalidRoi(_))));
    }

    #[test]
    fn preprocess_preserves_aspect() {
        let img = GrayImage::new(900, 700);
        let out = preprocess_roi(&img, Roi::new(0, 0, 777, 333)).unwrap();
        assert_eq!(out.width(), 512);
        let expected = 333.0 * 512.0 / 777.0;
        assert!((out.height() as f64 - expected).abs() <= 1.0);
    }

    #[test]
    fn constant_image_has_no_features() {
        let img = GrayImage::from_fn(200, 150, |_, _| 0.4);
        let fs = extract_features(&img, Roi::full(&img), DescriptorVariant::RootSift).unwrap();
        assert!(fs.is_empty());
        assert_eq!(fs.descriptors.len(), 0);
    }

    #[test]
    fn variant_codes_round_trip() {
        for v in [DescriptorVariant::Sift, DescriptorVariant::RootSift] {
            assert_eq!(DescriptorVariant::from_code(v.code()), Some(v));
            assert_eq!(v.to_string().parse::<DescriptorVariant>().unwrap(), v);
        }
        assert_eq!(DescriptorVariant::from_code(7), None);
    }
}
