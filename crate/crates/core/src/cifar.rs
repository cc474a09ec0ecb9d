//! CIFAR-100 binary records.
//!
//! Each record is exactly 3074 bytes: coarse label, fine label, then the
//! 32×32 red plane, green plane and blue plane, each row-major.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_BYTES: usize = 3074;
pub const PIXEL_BYTES: usize = 3072;
pub const FINE_CLASSES: usize = 100;
pub const COARSE_CLASSES: usize = 20;

/// Per-channel (R, G, B) mean of the training images on the `[0, 1]` scale.
pub const CHANNEL_MEAN: [f64; 3] = [0.5071, 0.4865, 0.4409];
/// Per-channel (R, G, B) standard deviation on the `[0, 1]` scale.
pub const CHANNEL_STD: [f64; 3] = [0.2673, 0.2564, 0.2762];

#[derive(Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub coarse_label: u8,
    pub fine_label: u8,
    pub pixels: Box<[u8; PIXEL_BYTES]>,
}

impl std::fmt::Debug for CifarRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CifarRecord")
            .field("coarse_label", &self.coarse_label)
            .field("fine_label", &self.fine_label)
            .finish_non_exhaustive()
    }
}

pub fn parse_cifar100(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    let whole = bytes.len() / RECORD_BYTES * RECORD_BYTES;
    if whole != bytes.len() {
        return Err(Error::Truncated { offset: whole });
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let (coarse, fine) = (rec[0], rec[1]);
            if usize::from(fine) >= FINE_CLASSES || usize::from(coarse) >= COARSE_CLASSES {
                return Err(Error::CorruptRecord {
                    record: i,
                    detail: format!("labels coarse={} fine={} out of range", coarse, fine),
                });
            }
            let mut pixels = Box::new([0u8; PIXEL_BYTES]);
            pixels.copy_from_slice(&rec[2..]);
            Ok(CifarRecord {
                coarse_label: coarse,
                fine_label: fine,
                pixels,
            })
        })
        .collect()
}

pub fn serialize_cifar100(records: &[CifarRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for r in records {
        out.push(r.coarse_label);
        out.push(r.fine_label);
        out.extend_from_slice(&r.pixels[..]);
    }
    out
}

/// Flattens records into `N × 3072` rows (channel planes in file order),
/// scaled to `[0, 1]` and standardized per channel; labels are fine labels.
pub fn to_dataset(records: &[CifarRecord]) -> Result<Dataset> {
    if records.is_empty() {
        return Err(Error::Format("no CIFAR records".into()));
    }
    let mut feats = Vec::with_capacity(records.len() * PIXEL_BYTES);
    for r in records {
        for (i, &p) in r.pixels.iter().enumerate() {
            let ch = i / 1024;
            feats.push((f64::from(p) / 255.0 - CHANNEL_MEAN[ch]) / CHANNEL_STD[ch]);
        }
    }
    let labels = records.iter().map(|r| usize::from(r.fine_label)).collect();
    Dataset::new(
        Tensor::new(vec![records.len(), PIXEL_BYTES], feats)?,
        labels,
        FINE_CLASSES,
    )
}

pub fn load_file(path: &Path) -> Result<Vec<CifarRecord>> {
    parse_cifar100(&std::fs::read(path)?)
}
