//! Minimal single-channel float raster used throughout feature extraction.

use std::path::Path;

use image::{imageops, DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::FeatureError;

/// Grayscale image with intensities nominally in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "pixel buffer size mismatch");
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        let luma = img.to_luma32f();
        let (w, h) = luma.dimensions();
        Self::from_vec(w as usize, h as usize, luma.into_raw())
    }

    pub fn open(path: &Path) -> Result<Self, FeatureError> {
        let img = image::open(path).map_err(|e| FeatureError::Image(e.to_string()))?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FeatureError> {
        let img = image::load_from_memory(bytes).map_err(|e| FeatureError::Image(e.to_string()))?;
        Ok(Self::from_dynamic(&img))
    }

    /// 8-bit PNG encoding (values clamped to `[0, 1]`).
    pub fn save_png(&self, path: &Path) -> Result<(), FeatureError> {
        self.to_luma8().save(path).map_err(|e| FeatureError::Image(e.to_string()))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, FeatureError> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_luma8()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| FeatureError::Image(e.to_string()))?;
        Ok(out.into_inner())
    }

    fn to_luma8(&self) -> ImageBuffer<Luma<u8>, Vec<u8>> {
        let bytes = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, bytes).expect("buffer size")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc)
    }

    /// Bilinear sample with edge replication.
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let p00 = self.get_clamped(xi, yi);
        let p10 = self.get_clamped(xi + 1, yi);
        let p01 = self.get_clamped(xi, yi + 1);
        let p11 = self.get_clamped(xi + 1, yi + 1);
        let top = p00 + (p10 - p00) * fx;
        let bottom = p01 + (p11 - p01) * fx;
        top + (bottom - top) * fy
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Self {
        Self::from_fn(w, h, |cx, cy| self.get(x + cx, y + cy))
    }

    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer size");
        let out = imageops::resize(&buf, width as u32, height as u32, imageops::FilterType::Triangle);
        Self::from_vec(width, height, out.into_raw())
    }

    /// Every other pixel in both directions.
    pub fn downsample2(&self) -> Self {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        Self::from_fn(w, h, |x, y| self.get(2 * x, 2 * y))
    }

    /// Separable Gaussian blur with edge replication.
    pub fn gaussian_blur(&self, sigma: f32) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= norm);

        let (w, h) = (self.width as isize, self.height as isize);
        let mut tmp = vec![0.0f32; self.data.len()];
        for y in 0..h {
            let row = &self.data[(y * w) as usize..((y + 1) * w) as usize];
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = (x + ki as isize - radius).clamp(0, w - 1);
                    acc += k * row[sx as usize];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        let mut out = vec![0.0f32; self.data.len()];
        for y in 0..h {
            for (ki, k) in kernel.iter().enumerate() {
                let sy = (y + ki as isize - radius).clamp(0, h - 1);
                let src = &tmp[(sy * w) as usize..((sy + 1) * w) as usize];
                let dst = &mut out[(y * w) as usize..((y + 1) * w) as usize];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += k * s;
                }
            }
        }
        Self::from_vec(self.width, self.height, out)
    }
}

/// Axis-aligned rectangle in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Roi {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Roi {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn full(image: &GrayImage) -> Self {
        Self::new(0, 0, image.width() as u32, image.height() as u32)
    }

    /// Intersection with a `width × height` image, `None` when empty.
    pub fn clip(&self, width: usize, height: usize) -> Option<Roi> {
        let x0 = (self.x as u64).min(width as u64);
        let y0 = (self.y as u64).min(height as u64);
        let x1 = (self.x as u64 + self.w as u64).min(width as u64);
        let y1 = (self.y as u64 + self.h as u64).min(height as u64);
        (x1 > x0 && y1 > y0).then(|| Roi::new(x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32))
    }

    /// True when the rectangle is non-empty and lies entirely inside the image.
    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w > 0
            && self.h > 0
            && self.x as u64 + self.w as u64 <= width as u64
            && self.y as u64 + self.h as u64 <= height as u64
    }
}

impl std::str::FromStr for Roi {
    type Err = String;

    /// Parses `x,y,w,h`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse::<u32>().map_err(|e| format!("bad roi component {p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match parts.as_slice() {
            [x, y, w, h] => Ok(Roi::new(*x, *y, *w, *h)),
            _ => Err(format!("roi must be x,y,w,h, got {s:?}")),
        }
    }
}

impl std::fmt::Display for Roi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.x, self.y, self.w, self.h)
    }
}
