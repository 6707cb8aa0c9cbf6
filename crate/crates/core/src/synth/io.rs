//! Dataset files.
//!
//! `images.bin` layout, all integers little-endian:
//!
//! ```text
//! b"GRMPIMG1"  u32 count  u32 height  u32 width  u32 channels
//! count * height * width * channels  f32 pixels, image by image, HWC order
//! ```
//!
//! `manifest.json` holds the records in the same order as the images.

use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, DatasetManifest, SynthError};
use crate::image::Image;

pub const MAGIC: &[u8; 8] = b"GRMPIMG1";
pub const IMAGES_FILE: &str = "images.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const HEADER_LEN: usize = 8 + 4 * 4;

fn io_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Serializes images; an empty list uses a zero shape.
pub fn encode_images(images: &[Image]) -> Result<Vec<u8>, SynthError> {
    let [h, w, c] = images.first().map_or([0; 3], Image::shape);
    let mut out = Vec::with_capacity(HEADER_LEN + images.len() * h * w * c * 4);
    out.extend_from_slice(MAGIC);
    for v in [images.len(), h, w, c] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for img in images {
        if img.shape() != [h, w, c] {
            return Err(SynthError::Manifest(format!(
                "mixed image shapes {:?} and {:?}",
                [h, w, c],
                img.shape()
            )));
        }
        for &v in &img.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_images(bytes: &[u8]) -> Result<Vec<Image>, SynthError> {
    if bytes.len() < HEADER_LEN {
        if !MAGIC.starts_with(&bytes[..bytes.len().min(8)]) {
            return Err(SynthError::BadMagic(IMAGES_FILE.into()));
        }
        return Err(SynthError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(SynthError::BadMagic(IMAGES_FILE.into()));
    }
    let word = |i: usize| {
        let start = 8 + 4 * i;
        u32::from_le_bytes(bytes[start..start + 4].try_into().expect("4 bytes")) as usize
    };
    let (count, h, w, c) = (word(0), word(1), word(2), word(3));
    let per_image = h * w * c;
    let expected = HEADER_LEN + count * per_image * 4;
    if bytes.len() < expected {
        return Err(SynthError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(SynthError::TrailingBytes(bytes.len() - expected));
    }
    let pixels: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    Ok(pixels
        .chunks(per_image.max(1))
        .take(count)
        .map(|chunk| Image::new(h, w, c, chunk.to_vec()))
        .collect())
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<(PathBuf, PathBuf), SynthError> {
    if dataset.images.len() != dataset.manifest.records.len() {
        return Err(SynthError::CountMismatch {
            images: dataset.images.len(),
            records: dataset.manifest.records.len(),
        });
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let images = dir.join(IMAGES_FILE);
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&images, encode_images(&dataset.images)?).map_err(|e| io_err(&images, e))?;
    let mut json = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| SynthError::Manifest(e.to_string()))?;
    json.push('\n');
    fs::write(&manifest, json).map_err(|e| io_err(&manifest, e))?;
    Ok((images, manifest))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let images_path = dir.join(IMAGES_FILE);
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&images_path).map_err(|e| io_err(&images_path, e))?;
    let images = decode_images(&bytes)?;
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| SynthError::Manifest(e.to_string()))?;
    manifest.validate()?;
    if images.len() != manifest.records.len() {
        return Err(SynthError::CountMismatch {
            images: images.len(),
            records: manifest.records.len(),
        });
    }
    Ok(Dataset { manifest, images })
}
