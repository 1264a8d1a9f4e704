//! Vertical splitting into per-client views.
//!
//! An `m-i` split partitions the pixel rows of each image into m contiguous
//! horizontal bands; band p (1-based) is client p's view, and client i is
//! the one holding the labels. Rows left over from uneven division go to
//! the last band. For flat feature vectors each coordinate counts as one
//! row, so the bands are contiguous coordinate ranges.

use std::fmt;
use std::str::FromStr;

use super::{DataError, RawDataset, ViewMatrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitConfig {
    /// Number of views m (at least 2).
    pub views: usize,
    /// 1-based index of the label-holding view.
    pub active: usize,
}

impl SplitConfig {
    pub fn new(views: usize, active: usize) -> Result<Self, DataError> {
        if views < 2 {
            return Err(DataError::BadSplit(format!(
                "need at least 2 views, got {views}"
            )));
        }
        if active == 0 || active > views {
            return Err(DataError::BadSplit(format!(
                "active view {active} out of range 1..={views}"
            )));
        }
        Ok(SplitConfig { views, active })
    }

    /// 0-based index of the active view.
    pub fn active_index(&self) -> usize {
        self.active - 1
    }
}

impl fmt::Display for SplitConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.views, self.active)
    }
}

impl FromStr for SplitConfig {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, i) = s
            .split_once('-')
            .ok_or_else(|| DataError::BadSplit(format!("expected m-i, got {s:?}")))?;
        let views: usize = m
            .parse()
            .map_err(|_| DataError::BadSplit(format!("bad view count in {s:?}")))?;
        let active: usize = i
            .parse()
            .map_err(|_| DataError::BadSplit(format!("bad active index in {s:?}")))?;
        SplitConfig::new(views, active)
    }
}

/// Pixel-row ranges [start, end) of each band for `image_rows` rows.
pub fn band_ranges(image_rows: usize, views: usize) -> Result<Vec<(usize, usize)>, DataError> {
    if views < 2 || views > image_rows {
        return Err(DataError::BadSplit(format!(
            "cannot split {image_rows} rows into {views} views"
        )));
    }
    let base = image_rows / views;
    let mut out = Vec::with_capacity(views);
    for p in 0..views {
        let start = p * base;
        let end = if p + 1 == views {
            image_rows
        } else {
            (p + 1) * base
        };
        out.push((start, end));
    }
    Ok(out)
}

/// Splits every sample into per-view feature slices. View dims always sum
/// to the original feature dimension.
pub fn split_views<T: Scalar>(
    raw: &RawDataset<T>,
    cfg: &SplitConfig,
) -> Result<Vec<ViewMatrix<T>>, DataError> {
    let ranges = band_ranges(raw.image_rows, cfg.views)?;
    let n = raw.len();
    let cols = raw.image_cols;
    let mut views = Vec::with_capacity(cfg.views);
    for &(start, end) in &ranges {
        let dim = (end - start) * cols;
        let mut data = Vec::with_capacity(n * dim);
        for s in 0..n {
            let sample = &raw.data[s * raw.dim..(s + 1) * raw.dim];
            data.extend_from_slice(&sample[start * cols..end * cols]);
        }
        views.push(ViewMatrix::new(n, dim, data));
    }
    Ok(views)
}
