use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{HarnessError, IngestEntry, IngestManifest, INGEST_MANIFEST};
use crate::features::GrayImage;

const FIELD_SIZE: usize = 800;
/// Downsampling of the low-frequency phase field that bends the stripes.
const PHASE_CELL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_labels: usize,
    pub images_per_label: usize,
    /// Scales rotation (up to 10°), anisotropic scale (±10%) and translation.
    pub warp_magnitude: f64,
    /// Standard deviation of additive Gaussian noise, intensity in [0, 1].
    pub noise: f64,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { n_labels: 50, images_per_label: 3, warp_magnitude: 1.0, noise: 0.03, seed: 0, width: 512, height: 384 }
    }
}

/// Coat of one synthetic animal: roughly vertical stripes of a shared
/// period range, bent by a smooth random phase and broken up by band-pass
/// noise into forks, ends and islands. Locally every coat looks alike;
/// identity lives in where the bends and breaks fall.
struct LabelPattern {
    field: GrayImage,
}

fn unit_std(mut v: Vec<f32>) -> Vec<f32> {
    let std = (v.iter().map(|x| (x * x) as f64).sum::<f64>() / v.len() as f64).sqrt() as f32;
    v.iter_mut().for_each(|x| *x /= std.max(f32::EPSILON));
    v
}

fn label_pattern(rng: &mut ChaCha8Rng) -> LabelPattern {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let cells = FIELD_SIZE / PHASE_CELL + 2;
    let coarse = GrayImage::from_fn(cells, cells, |_, _| normal.sample(rng)).gaussian_blur(2.0);
    let phase = GrayImage::from_vec(cells, cells, unit_std(coarse.data().to_vec()));
    let noise = GrayImage::from_fn(FIELD_SIZE, FIELD_SIZE, |_, _| normal.sample(rng));
    let fine = noise.gaussian_blur(4.5);
    let broad = noise.gaussian_blur(9.0);
    let breaks = unit_std(fine.data().iter().zip(broad.data()).map(|(a, b)| a - b).collect());

    let theta = rng.random_range(-0.4f32..0.4);
    let period = rng.random_range(24.0f32..32.0);
    let bend = rng.random_range(2.0f32..3.5);
    let (nx, ny) = (theta.cos(), theta.sin());
    let field = GrayImage::from_fn(FIELD_SIZE, FIELD_SIZE, |x, y| {
        let (xf, yf) = (x as f32, y as f32);
        let phi = bend * phase.sample(xf / PHASE_CELL as f32, yf / PHASE_CELL as f32);
        let stripe = (std::f32::consts::TAU * (nx * xf + ny * yf) / period + phi).sin();
        0.5 + 0.4 * (3.0 * (stripe + 0.5 * breaks[y * FIELD_SIZE + x])).tanh()
    });
    LabelPattern { field }
}

/// Random similarity-plus-shear map about the image center.
fn image_warp(rng: &mut ChaCha8Rng, magnitude: f64) -> (Matrix2<f64>, Vector2<f64>) {
    let theta = rng.random_range(-1.0..=1.0) * 10f64.to_radians() * magnitude;
    let sx = 1.0 + rng.random_range(-0.1..=0.1) * magnitude;
    let sy = 1.0 + rng.random_range(-0.1..=0.1) * magnitude;
    let rot = Matrix2::new(theta.cos(), -theta.sin(), theta.sin(), theta.cos());
    let t = Vector2::new(rng.random_range(-20.0..=20.0), rng.random_range(-20.0..=20.0)) * magnitude;
    (rot * Matrix2::new(sx, 0.0, 0.0, sy), t)
}

/// Renders one photograph of a label pattern under an affine warp with
/// additive noise.
fn render(pattern: &LabelPattern, width: usize, height: usize, warp: &(Matrix2<f64>, Vector2<f64>), noise: f64, rng: &mut ChaCha8Rng) -> GrayImage {
    let (lin, t) = warp;
    let inv = lin.try_inverse().expect("warp is invertible");
    let center = Vector2::new(width as f64 / 2.0, height as f64 / 2.0);
    let field_center = Vector2::new(FIELD_SIZE as f64 / 2.0, FIELD_SIZE as f64 / 2.0);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    GrayImage::from_fn(width, height, |x, y| {
        let p = Vector2::new(x as f64, y as f64) - center - t;
        let canonical = inv * p;
        let f = canonical + field_center;
        let v = pattern.field.sample(f.x as f32, f.y as f32) as f64;
        let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
        (v + n).clamp(0.0, 1.0) as f32
    })
}

/// Renders `images_per_label` warped views of `label`'s pattern; exposed
/// for tests that need fresh views of a catalog animal.
pub fn render_label_image(params: &SynthParams, label: usize, view: u64) -> GrayImage {
    let mut master = ChaCha8Rng::seed_from_u64(params.seed);
    let label_seeds: Vec<u64> = (0..params.n_labels.max(label + 1)).map(|_| master.random()).collect();
    let pattern = label_pattern(&mut ChaCha8Rng::seed_from_u64(label_seeds[label]));
    let mut rng = ChaCha8Rng::seed_from_u64(label_seeds[label] ^ view.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
    let warp = image_warp(&mut rng, params.warp_magnitude);
    render(&pattern, params.width, params.height, &warp, params.noise, &mut rng)
}

/// Writes `label_XXX/img_Y.png` files and an ingest listing under `out`.
/// Output is byte-identical for a fixed seed.
pub fn gen_synthetic(params: &SynthParams, out: &Path) -> Result<IngestManifest, HarnessError> {
    if params.n_labels < 2 || params.images_per_label < 2 {
        return Err(HarnessError::Config("synthetic data needs at least 2 labels and 2 images per label".into()));
    }
    std::fs::create_dir_all(out)?;
    let jobs: Vec<(usize, usize)> =
        (0..params.n_labels).flat_map(|l| (0..params.images_per_label).map(move |i| (l, i))).collect();
    let entries: Vec<IngestEntry> = jobs
        .par_iter()
        .map(|&(label, view)| -> Result<IngestEntry, HarnessError> {
            let name = format!("label_{label:03}");
            std::fs::create_dir_all(out.join(&name))?;
            let rel = format!("{name}/img_{view}.png");
            let img = render_label_image(params, label, view as u64);
            img.save_png(&out.join(&rel))?;
            Ok(IngestEntry { path: rel, label: Some(name), roi: None })
        })
        .collect::<Result<_, _>>()?;
    let manifest = IngestManifest { images: entries };
    std::fs::write(out.join(INGEST_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}
