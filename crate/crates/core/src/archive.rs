//! On-disk adversarial batch archives: a self-verifying binary tensor
//! file (clean + adversarial image data at full precision) plus a JSON
//! manifest carrying provenance, the attack spec and seeds. Optionally a
//! PNG dump of the adversarial images for inspection.

use crate::attack::AttackSpec;
use crate::error::{Error, Result};
use crate::eval::AdvProvenance;
use crate::selfadv::{AdversarialBatch, GeneratorKind};
use ndarray::Array4;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"XFERADVB";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub provenance: AdvProvenance,
    pub attack: Option<AttackSpec>,
    pub seed: u64,
    pub budget: f64,
    pub generator: GeneratorKind,
    pub samples: usize,
    pub shape: (usize, usize, usize, usize),
    pub labels: Vec<usize>,
    /// Content hash of batch.bin.
    pub sha256: String,
}

fn write_batch_bin(batch: &AdversarialBatch, path: &Path) -> Result<String> {
    let shape = batch.clean.dim();
    let header = serde_json::json!({
        "shape": [shape.0, shape.1, shape.2, shape.3],
        "budget": batch.budget,
    });
    let header_bytes = serde_json::to_vec(&header).expect("header encodes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for arr in [&batch.clean, &batch.adversarial] {
        for v in arr.as_standard_layout().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, &buf)?;
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Write `batch.bin` + `manifest.json` under `dir`, and PNGs of the
/// adversarial images when `png` is set.
pub fn save_batch(
    batch: &AdversarialBatch,
    provenance: &AdvProvenance,
    attack: Option<&AttackSpec>,
    seed: u64,
    dir: &Path,
    png: bool,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let sha256 = write_batch_bin(batch, &dir.join("batch.bin"))?;
    let shape = batch.clean.dim();
    let manifest = ArchiveManifest {
        provenance: provenance.clone(),
        attack: attack.cloned(),
        seed,
        budget: batch.budget,
        generator: batch.generator,
        samples: batch.len(),
        shape,
        labels: batch.labels.clone(),
        sha256,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest).expect("manifest encodes"),
    )?;
    if png {
        let img_dir = dir.join("png");
        fs::create_dir_all(&img_dir)?;
        for i in 0..batch.len() {
            let mut img = image::RgbImage::new(shape.3 as u32, shape.2 as u32);
            for y in 0..shape.2 {
                for x in 0..shape.3 {
                    let mut px = [0u8; 3];
                    for (c, slot) in px.iter_mut().enumerate() {
                        let src = if shape.1 >= 3 { c } else { 0 }; // replicate grayscale
                        *slot = (batch.adversarial[[i, src, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                    img.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            img.save(img_dir.join(format!("adv_{i:05}.png")))
                .map_err(|e| Error::Io(std::io::Error::other(format!("png encode: {e}"))))?;
        }
    }
    Ok(())
}

/// Load an archive directory back into memory, verifying the tensor
/// file's hash against its trailer and the manifest.
pub fn load_batch(dir: &Path) -> Result<(AdversarialBatch, ArchiveManifest)> {
    let manifest: ArchiveManifest = serde_json::from_str(
        &fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::Ingestion {
                row: None,
                message: format!("cannot read archive manifest in {}: {e}", dir.display()),
            })?,
    )
    .map_err(|e| Error::Ingestion {
        row: None,
        message: format!("malformed archive manifest: {e}"),
    })?;

    let buf = fs::read(dir.join("batch.bin"))?;
    if buf.len() < MAGIC.len() + 8 + 32 {
        return Err(Error::Integrity("batch.bin too short".into()));
    }
    let (body, trailer) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::Integrity("batch.bin content hash mismatch".into()));
    }
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    if hex != manifest.sha256 {
        return Err(Error::Integrity("batch.bin does not match the manifest hash".into()));
    }
    if &body[..8] != MAGIC {
        return Err(Error::Integrity("batch.bin is not an adversarial archive".into()));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let payload = &body[16 + hlen..];
    let (b, c, h, w) = manifest.shape;
    let n = b * c * h * w;
    if payload.len() != 2 * n * 8 {
        return Err(Error::Integrity(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            2 * n * 8
        )));
    }
    let decode = |bytes: &[u8]| -> Array4<f64> {
        let v: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|x| f64::from_le_bytes(x.try_into().unwrap()))
            .collect();
        Array4::from_shape_vec((b, c, h, w), v).expect("shape matches")
    };
    let clean = decode(&payload[..n * 8]);
    let adversarial = decode(&payload[n * 8..]);
    let batch = AdversarialBatch::new(clean, adversarial, manifest.labels.clone(), manifest.budget, manifest.generator)?;
    Ok((batch, manifest))
}
