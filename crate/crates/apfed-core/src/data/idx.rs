//! IDX image/label file parsing (the MNIST container format).
//!
//! All header fields are big-endian u32. Image files carry magic
//! 0x00000803 and dimensions (count, rows, cols); label files carry magic
//! 0x00000801 and a count. Pixel bytes map to [0, 1] by dividing by 255.

use std::path::Path;

use super::{DataError, RawDataset};
use crate::scalar::{cast, Scalar};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    path: &'a str,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.offset + n > self.bytes.len() {
            return Err(DataError::IdxTruncated {
                path: self.path.to_string(),
                offset: self.offset,
                needed: n,
                got: self.bytes.len() - self.offset,
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32_be(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an images/labels file pair into a dataset with ids 0..n.
pub fn load_idx<T: Scalar>(
    images_path: &Path,
    labels_path: &Path,
) -> Result<RawDataset<T>, DataError> {
    let img_bytes = read_file(images_path)?;
    let img_name = images_path.display().to_string();
    let mut img = Cursor {
        path: &img_name,
        bytes: &img_bytes,
        offset: 0,
    };
    let magic = img.u32_be()?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::IdxMagic {
            path: img_name.clone(),
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let n = img.u32_be()? as usize;
    let rows = img.u32_be()? as usize;
    let cols = img.u32_be()? as usize;
    let dim = rows * cols;
    let pixels = img.take(n * dim)?;

    let lbl_bytes = read_file(labels_path)?;
    let lbl_name = labels_path.display().to_string();
    let mut lbl = Cursor {
        path: &lbl_name,
        bytes: &lbl_bytes,
        offset: 0,
    };
    let magic = lbl.u32_be()?;
    if magic != LABEL_MAGIC {
        return Err(DataError::IdxMagic {
            path: lbl_name.clone(),
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let n_labels = lbl.u32_be()? as usize;
    if n_labels != n {
        return Err(DataError::IdxCount {
            images: n,
            labels: n_labels,
        });
    }
    let label_bytes = lbl.take(n)?;

    let inv = 1.0 / 255.0;
    let data: Vec<T> = pixels.iter().map(|&b| cast(b as f64 * inv)).collect();
    let labels: Vec<u32> = label_bytes.iter().map(|&b| b as u32).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(2);

    Ok(RawDataset {
        ids: (0..n as u64).collect(),
        data,
        dim,
        image_rows: rows,
        image_cols: cols,
        labels,
        classes,
    })
}
