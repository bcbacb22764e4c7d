//! The classic IDX container used by MNIST-style corpora.

use std::fs;
use std::path::Path;

use super::{DataError, DataKind, Dataset, Sample};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    let b = bytes.get(at..at + 4).ok_or(DataError::Truncated {
        needed: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), DataError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic { found, expected });
    }
    Ok(())
}

/// Parses image and label IDX buffers. Pixels are scaled to `[0, 1]`.
pub fn read_idx(images: &[u8], labels: &[u8], provenance: &str) -> Result<Dataset, DataError> {
    check_magic(images, IDX_IMAGES_MAGIC)?;
    check_magic(labels, IDX_LABELS_MAGIC)?;
    let n_img = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_lab = be_u32(labels, 4)? as usize;
    if n_img != n_lab {
        return Err(DataError::CountMismatch {
            images: n_img,
            labels: n_lab,
        });
    }
    let px = rows * cols;
    let needed = 16 + n_img * px;
    if images.len() < needed {
        return Err(DataError::Truncated {
            needed,
            found: images.len(),
        });
    }
    if labels.len() < 8 + n_lab {
        return Err(DataError::Truncated {
            needed: 8 + n_lab,
            found: labels.len(),
        });
    }
    if n_img == 0 {
        return Err(DataError::Empty(provenance.to_string()));
    }
    let samples: Vec<Sample> = (0..n_img)
        .map(|i| Sample {
            x: images[16 + i * px..16 + (i + 1) * px]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect(),
            y: labels[8 + i] as usize,
        })
        .collect();
    let num_classes = samples.iter().map(|s| s.y).max().unwrap_or(0) + 1;
    Ok(Dataset {
        samples,
        shape: vec![1, rows, cols],
        num_classes,
        kind: DataKind::Image,
        provenance: provenance.to_string(),
    })
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let read = |p: &Path| {
        fs::read(p).map_err(|source| DataError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    let provenance = format!("idx:{}+{}", images.display(), labels.display());
    read_idx(&read(images)?, &read(labels)?, &provenance)
}

/// Serializes a single-channel image dataset as `(images, labels)` IDX buffers.
pub fn write_idx(data: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let (rows, cols) = match data.shape.as_slice() {
        [_, r, c] => (*r, *c),
        [r, c] => (*r, *c),
        other => (1, other.iter().product()),
    };
    let n = data.samples.len() as u32;
    let mut img = Vec::with_capacity(16 + data.samples.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lab = Vec::with_capacity(8 + data.samples.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    for s in &data.samples {
        img.extend(s.x.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        lab.push(s.y as u8);
    }
    (img, lab)
}

pub fn write_idx_files(data: &Dataset, images: &Path, labels: &Path) -> Result<(), DataError> {
    let (img, lab) = write_idx(data);
    for (p, bytes) in [(images, img), (labels, lab)] {
        fs::write(p, bytes).map_err(|source| DataError::Io {
            path: p.display().to_string(),
            source,
        })?;
    }
    Ok(())
}
