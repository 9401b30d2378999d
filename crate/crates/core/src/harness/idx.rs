//! IDX (MNIST-style) image and label files.
//!
//! Header: two zero bytes, a type byte (`0x08` = unsigned byte), a rank byte,
//! then one big-endian `u32` per dimension. Images are rank 3 (`N, H, W`),
//! labels rank 1.

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("truncated header: need {needed} bytes, file has {len}")]
    TruncatedHeader { needed: usize, len: usize },
    #[error("bad magic 0x{found:08x} at byte 0, expected 0x{expected:08x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated data: need {needed} bytes after the header at byte {offset}, file has {available}")]
    TruncatedData {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{extra} trailing bytes after byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("label out of range: value {value} at byte {offset} (record {index}) for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        offset: usize,
        value: u8,
        num_classes: usize,
    },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
}

/// Dimensions and payload of a parsed file.
fn parse(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8]), IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::TruncatedHeader {
            needed: 4,
            len: bytes.len(),
        });
    }
    let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if found != magic {
        return Err(IdxError::BadMagic { found, expected: magic });
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(IdxError::TruncatedHeader {
            needed: header,
            len: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let needed = dims.iter().product::<usize>();
    let available = bytes.len() - header;
    if available < needed {
        return Err(IdxError::TruncatedData {
            offset: header,
            needed,
            available,
        });
    }
    if available > needed {
        return Err(IdxError::TrailingBytes {
            offset: header + needed,
            extra: available - needed,
        });
    }
    Ok((dims, &bytes[header..]))
}

/// `[N, 1, H, W]` pixels scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8]) -> Result<Tensor, IdxError> {
    let (dims, data) = parse(bytes, IMAGES_MAGIC)?;
    let pixels = data.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Tensor::new(&[dims[0], 1, dims[1], dims[2]], pixels).expect("dims match payload"))
}

pub fn parse_labels(bytes: &[u8], num_classes: usize) -> Result<Vec<usize>, IdxError> {
    let (dims, data) = parse(bytes, LABELS_MAGIC)?;
    let header = 4 + 4 * dims.len();
    data.iter()
        .enumerate()
        .map(|(index, &value)| {
            if usize::from(value) < num_classes {
                Ok(usize::from(value))
            } else {
                Err(IdxError::LabelOutOfRange {
                    index,
                    offset: header + index,
                    value,
                    num_classes,
                })
            }
        })
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_idx(images_path: &Path, labels_path: &Path, num_classes: usize) -> Result<Dataset> {
    let images = parse_images(&read(images_path)?).map_err(|e| with_path(images_path, e))?;
    let labels = parse_labels(&read(labels_path)?, num_classes).map_err(|e| with_path(labels_path, e))?;
    let n = images.shape()[0];
    if n != labels.len() {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: labels.len(),
        }
        .into());
    }
    Dataset::new(images, labels, num_classes)
}

fn with_path(path: &Path, e: IdxError) -> Error {
    log::error!("{}: {e}", path.display());
    Error::Idx(e)
}

fn header(magic: u32, dims: &[usize]) -> Result<Vec<u8>> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    Ok(out)
}

/// Encodes single-channel images, clamping to `[0, 1]` and rounding to bytes.
pub fn encode_images(images: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = images.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("IDX images need one channel, got {c}")));
    }
    let mut out = header(IMAGES_MAGIC, &[n, h, w])?;
    out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = header(LABELS_MAGIC, &[labels.len()])?;
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit in a byte")))?);
    }
    Ok(out)
}

pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    std::fs::write(images_path, encode_images(&data.images)?).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, encode_labels(&data.labels)?).map_err(|e| Error::io(labels_path, e))
}
