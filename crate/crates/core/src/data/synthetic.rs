//! Deterministic synthetic dataset generator: each class is a smooth
//! random base texture, samples add per-pixel Gaussian noise. The same
//! spec and seed yield bitwise-identical files; train and eval splits
//! share class textures but draw disjoint noise streams.

use super::{load_dataset, DatasetManifest, ImagePolicy, LabeledImageSource, ManifestRow, Split};
use crate::error::{Error, Result};
use crate::init;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub seed: u64,
    /// Std of the per-pixel Gaussian noise added to the class texture.
    pub noise_std: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            samples_per_class: 100,
            image_size: 32,
            seed: 7,
            noise_std: 0.25,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 || self.image_size == 0 {
            return Err(Error::Config("synthetic spec dimensions must be positive".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

const BASE_GRID: usize = 4;
const CHANNELS: usize = 3;
/// Motif side relative to the image (32px images get 6px motifs).
const MOTIF_FRACTION: f64 = 0.1875;

/// A class is a faint smooth texture plus two high-contrast local motifs
/// stamped at sample-specific positions.
struct ClassPattern {
    texture: Array3<f64>,
    motifs: Vec<Array3<f64>>,
}

/// Smooth low-contrast texture: a low-resolution random grid bilinearly
/// upsampled and pulled toward mid-gray.
fn class_texture(size: usize, rng: &mut ChaCha12Rng) -> Array3<f64> {
    let mut low = Array3::<f64>::zeros((CHANNELS, BASE_GRID, BASE_GRID));
    for v in low.iter_mut() {
        *v = init::uniform(rng, 0.15, 0.85);
    }
    let mut out = Array3::<f64>::zeros((CHANNELS, size, size));
    let scale = BASE_GRID as f64 / size as f64;
    for c in 0..CHANNELS {
        for y in 0..size {
            let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (BASE_GRID - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(BASE_GRID - 1);
            let fy = sy - y0 as f64;
            for x in 0..size {
                let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (BASE_GRID - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(BASE_GRID - 1);
                let fx = sx - x0 as f64;
                let top = low[[c, y0, x0]] * (1.0 - fx) + low[[c, y0, x1]] * fx;
                let bot = low[[c, y1, x0]] * (1.0 - fx) + low[[c, y1, x1]] * fx;
                out[[c, y, x]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn class_pattern(size: usize, rng: &mut ChaCha12Rng) -> ClassPattern {
    let texture = class_texture(size, rng);
    let side = ((size as f64 * MOTIF_FRACTION).round() as usize).max(2);
    let motifs = (0..2)
        .map(|_| {
            let mut m = Array3::<f64>::zeros((CHANNELS, side, side));
            for v in m.iter_mut() {
                // saturated values make the motif a strong local cue
                *v = if rng.random::<f64>() < 0.5 { 0.05 } else { 0.95 };
            }
            m
        })
        .collect();
    ClassPattern { texture, motifs }
}

/// Stamp a motif onto the image at the given top-left corner.
fn stamp(img: &mut Array3<f64>, motif: &Array3<f64>, top: usize, left: usize) {
    let (_, mh, mw) = motif.dim();
    for c in 0..CHANNELS {
        for y in 0..mh {
            for x in 0..mw {
                img[[c, top + y, left + x]] = motif[[c, y, x]];
            }
        }
    }
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Train => 0x7472_6169,
        Split::Eval => 0x6576_616c,
    }
}

/// Write one split of the synthetic dataset under `out/<split>/` and load
/// it back as a source.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path, split: Split) -> Result<LabeledImageSource> {
    spec.validate()?;
    let dir = out.join(split.dir_name());
    fs::create_dir_all(&dir)?;

    // class patterns depend only on the generator seed, never on the split
    let mut base_rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let patterns: Vec<ClassPattern> = (0..spec.num_classes)
        .map(|_| class_pattern(spec.image_size, &mut base_rng))
        .collect();

    let mut noise_rng = ChaCha12Rng::seed_from_u64(spec.seed ^ split_tag(split));
    let mut rows = Vec::new();
    for (class, pattern) in patterns.iter().enumerate() {
        let class_dir = dir.join(format!("images/c{class}"));
        fs::create_dir_all(&class_dir)?;
        for s in 0..spec.samples_per_class {
            let size = spec.image_size;
            let mut canvas = pattern.texture.clone();
            // motifs land at sample-specific positions, so the class cue
            // is local and translation-varying
            for motif in &pattern.motifs {
                let side = motif.dim().1;
                let top = noise_rng.random_range(0..=(size - side));
                let left = noise_rng.random_range(0..=(size - side));
                stamp(&mut canvas, motif, top, left);
            }
            let mut img = image::RgbImage::new(size as u32, size as u32);
            for y in 0..size {
                for x in 0..size {
                    let mut px = [0u8; 3];
                    for (c, slot) in px.iter_mut().enumerate() {
                        let v = canvas[[c, y, x]] + init::normal(&mut noise_rng) * spec.noise_std;
                        *slot = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                    img.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            let rel = format!("images/c{class}/s{s}.png");
            img.save(dir.join(&rel))
                .map_err(|e| Error::Io(std::io::Error::other(format!("png encode: {e}"))))?;
            rows.push(ManifestRow {
                path: rel,
                label: class,
            });
        }
    }

    let manifest = DatasetManifest {
        class_count: spec.num_classes,
        split,
        rows,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest).expect("manifest encodes"),
    )?;
    load_dataset(out, split, ImagePolicy::AsIs)
}
