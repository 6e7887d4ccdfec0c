//! Dataset ingestion: an image directory plus a JSON manifest of
//! (relative path, label) rows. Decoding is lazy; iteration order under a
//! fixed seed is reproducible.

pub mod synthetic;

pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Config(format!("unknown split '{other}' (train|eval)"))),
        }
    }
}

/// How decoded images are fitted to the expected size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImagePolicy {
    /// Use images at their stored size.
    AsIs,
    /// Nearest-neighbor resize every image to (height, width) at decode time.
    ResizeTo(usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_count: usize,
    pub split: Split,
    pub rows: Vec<ManifestRow>,
}

/// Lazily decoded labeled image source.
pub struct LabeledImageSource {
    root: PathBuf,
    manifest: DatasetManifest,
    policy: ImagePolicy,
}

/// Load `<root>/<split>/manifest.json` and validate it. Files must exist;
/// labels must be in range. Decoding happens on access.
pub fn load_dataset(root: &Path, split: Split, policy: ImagePolicy) -> Result<LabeledImageSource> {
    let dir = root.join(split.dir_name());
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::Ingestion {
        row: None,
        message: format!("cannot read {}: {e}", manifest_path.display()),
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Ingestion {
        row: None,
        message: format!("malformed manifest {}: {e}", manifest_path.display()),
    })?;
    if manifest.class_count == 0 && !manifest.rows.is_empty() {
        return Err(Error::Ingestion {
            row: None,
            message: "class_count is 0 but rows are present".into(),
        });
    }
    for (i, row) in manifest.rows.iter().enumerate() {
        if row.label >= manifest.class_count {
            return Err(Error::Ingestion {
                row: Some(i),
                message: format!("label {} out of range [0, {})", row.label, manifest.class_count),
            });
        }
        let p = dir.join(&row.path);
        if !p.is_file() {
            return Err(Error::Ingestion {
                row: Some(i),
                message: format!("missing file {}", p.display()),
            });
        }
    }
    Ok(LabeledImageSource {
        root: dir,
        manifest,
        policy,
    })
}

impl LabeledImageSource {
    pub fn len(&self) -> usize {
        self.manifest.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.rows.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.manifest.class_count
    }

    pub fn split(&self) -> Split {
        self.manifest.split
    }

    pub fn label(&self, i: usize) -> usize {
        self.manifest.rows[i].label
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.rows.iter().map(|r| r.label).collect()
    }

    /// Decode one image to (channels, h, w) in [0, 1].
    pub fn image(&self, i: usize) -> Result<Array3<f64>> {
        let row = self.manifest.rows.get(i).ok_or_else(|| Error::Ingestion {
            row: Some(i),
            message: "index out of range".into(),
        })?;
        let path = self.root.join(&row.path);
        let img = image::open(&path).map_err(|e| Error::Ingestion {
            row: Some(i),
            message: format!("cannot decode {}: {e}", path.display()),
        })?;
        let img = match self.policy {
            ImagePolicy::AsIs => img,
            ImagePolicy::ResizeTo(h, w) => {
                img.resize_exact(w as u32, h as u32, image::imageops::FilterType::Nearest)
            }
        };
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = Array3::<f64>::zeros((3, h, w));
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
            }
        }
        Ok(out)
    }

    /// Stack the given rows into (batch, channels, h, w) plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Array4<f64>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Ingestion {
                row: None,
                message: "empty batch requested".into(),
            });
        }
        let first = self.image(indices[0])?;
        let (c, h, w) = first.dim();
        let mut x = Array4::<f64>::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        x.index_axis_mut(ndarray::Axis(0), 0).assign(&first);
        labels.push(self.label(indices[0]));
        for (k, &i) in indices.iter().enumerate().skip(1) {
            let img = self.image(i)?;
            if img.dim() != (c, h, w) {
                return Err(Error::Ingestion {
                    row: Some(i),
                    message: format!("image size {:?} differs from batch size {:?}", img.dim(), (c, h, w)),
                });
            }
            x.index_axis_mut(ndarray::Axis(0), k).assign(&img);
            labels.push(self.label(i));
        }
        Ok((x, labels))
    }

    /// Load the whole split into one batch.
    pub fn all(&self) -> Result<(Array4<f64>, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Deterministic shuffled row order for a seed.
    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        idx
    }

    /// sha256 over the manifest and every referenced file, in row order.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.manifest).expect("manifest encodes"));
        for row in &self.manifest.rows {
            hasher.update(fs::read(self.root.join(&row.path))?);
        }
        Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}
