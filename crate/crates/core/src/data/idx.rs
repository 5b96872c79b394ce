//! IDX image/label files (optionally gzip-compressed).

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::data::{LabelSpace, Labels, NoisyDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_payload(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: format!("gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("truncated header at byte offset {offset}"),
        })
}

/// Parses an IDX3 image file into `[1, rows, cols]` tensors scaled to [0, 1].
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<Vec<Tensor>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("bad image magic {magic:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let size = rows * cols;
    let needed = 16 + n * size;
    if bytes.len() < needed {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "truncated payload at byte offset {}: {n} images need {needed} bytes",
                bytes.len()
            ),
        });
    }
    Ok(bytes[16..needed]
        .chunks_exact(size)
        .map(|px| {
            Tensor::new(
                vec![1, rows, cols],
                px.iter().map(|&p| p as f64 / 255.0).collect(),
            )
            .expect("sized by construction")
        })
        .collect())
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("bad label magic {magic:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "truncated payload at byte offset {}: {n} labels need {} bytes",
                bytes.len(),
                8 + n
            ),
        });
    }
    Ok(bytes[8..8 + n].iter().map(|&b| b as usize).collect())
}

/// Loads an image/label file pair as a clean 10-class dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<NoisyDataset> {
    let images = parse_images(&read_payload(images_path)?, images_path)?;
    let labels = parse_labels(&read_payload(labels_path)?, labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            msg: format!(
                "{} labels for {} images in {}",
                labels.len(),
                images.len(),
                images_path.display()
            ),
        });
    }
    const CLASSES: usize = 10;
    if let Some(pos) = labels.iter().position(|&l| l >= CLASSES) {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            msg: format!("label {} at byte offset {} is not a digit", labels[pos], 8 + pos),
        });
    }
    let n = images.len() as u64;
    NoisyDataset::new(
        images,
        Labels::Categorical(labels),
        LabelSpace::Categorical { classes: CLASSES },
        (0..n).collect(),
        (0..n).collect(),
    )
}
