//! IDX (MNIST) binary files: big-endian header, unsigned byte payload.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{one_hot, LabeledDataset, Sample, TaskKind};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_files: Vec<String>,
    pub noise_std: f64,
    /// `(mean, std)` applied as `(pixel − mean)/std`, if any.
    pub normalization: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    /// `n × d`, row per image.
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
    pub provenance: Provenance,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pixel_dim(&self) -> usize {
        self.rows * self.cols
    }

    /// One-hot classification dataset (`m = 10`).
    pub fn to_labeled(&self) -> LabeledDataset {
        let samples = self
            .images
            .iter()
            .zip(&self.labels)
            .map(|(x, &l)| Sample {
                x: x.clone(),
                y: one_hot(l, MNIST_CLASSES),
            })
            .collect();
        LabeledDataset {
            task: TaskKind::Classification,
            input_dim: self.pixel_dim(),
            output_dim: MNIST_CLASSES,
            samples,
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::TruncatedFile(format!("{what}: header ends at byte {}", bytes.len())))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

/// Parses an IDX image file and its label file. Pixels are scaled to `[0, 1]`.
pub fn mnist_load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<ImageDataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;

    let magic = read_u32(&img, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = read_u32(&lab, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: LABELS_MAGIC,
            found: magic,
        });
    }

    let n = read_u32(&img, 4, "images")? as usize;
    let rows = read_u32(&img, 8, "images")? as usize;
    let cols = read_u32(&img, 12, "images")? as usize;
    let n_labels = read_u32(&lab, 4, "labels")? as usize;
    if n != n_labels {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let d = rows * cols;
    let payload = &img[16..];
    if payload.len() < n * d {
        return Err(Error::TruncatedFile(format!(
            "{}: {} pixel bytes, header promises {}",
            images_path.display(),
            payload.len(),
            n * d
        )));
    }
    let label_bytes = &lab[8..];
    if label_bytes.len() < n {
        return Err(Error::TruncatedFile(format!(
            "{}: {} label bytes, header promises {n}",
            labels_path.display(),
            label_bytes.len()
        )));
    }
    let images = payload[..n * d]
        .chunks_exact(d.max(1))
        .map(|c| c.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    let labels: Vec<usize> = label_bytes[..n].iter().map(|&b| b as usize).collect();
    if let Some(bad) = labels.iter().find(|&&l| l >= MNIST_CLASSES) {
        return Err(Error::Parse(format!("label {bad} out of range")));
    }
    Ok(ImageDataset {
        images,
        labels,
        rows,
        cols,
        provenance: Provenance {
            source_files: vec![images_path.display().to_string(), labels_path.display().to_string()],
            noise_std: 0.0,
            normalization: None,
        },
    })
}

/// `pixel ← (pixel + N(0, noise_std²) − mean)/std`, noise drawn per pixel.
pub fn corrupt_and_normalize(
    ds: &ImageDataset,
    noise_std: f64,
    mean: f64,
    std: f64,
    seed: u64,
) -> Result<ImageDataset> {
    if !(std > 0.0) || noise_std < 0.0 {
        return Err(Error::InvalidInputs(format!(
            "need std > 0 and noise_std >= 0 (std={std}, noise_std={noise_std})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidInputs(e.to_string()))?;
    let images = ds
        .images
        .iter()
        .map(|img| {
            img.iter()
                .map(|&px| {
                    let e = if noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    (px + e - mean) / std
                })
                .collect()
        })
        .collect();
    let mut provenance = ds.provenance.clone();
    provenance.noise_std = noise_std;
    provenance.normalization = Some((mean, std));
    Ok(ImageDataset {
        images,
        labels: ds.labels.clone(),
        rows: ds.rows,
        cols: ds.cols,
        provenance,
    })
}

/// Writes images (values in `[0, 1]`, rounded to bytes) as an IDX3 file.
pub fn write_idx_images(mut w: impl Write, images: &[Vec<f64>], rows: usize, cols: usize) -> Result<()> {
    w.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    for v in [images.len(), rows, cols] {
        w.write_all(&(v as u32).to_be_bytes())?;
    }
    for img in images {
        let bytes: Vec<u8> = img
            .iter()
            .map(|&px| (px * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn write_idx_labels(mut w: impl Write, labels: &[usize]) -> Result<()> {
    w.write_all(&LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    let bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}
