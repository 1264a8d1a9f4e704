//! Datasets and their vertical partitioning.
//!
//! A [`RawDataset`] owns flattened per-sample features, integer labels, and
//! unique sample ids. [`split::split_views`] carves the feature space into
//! contiguous horizontal bands (one per client). [`psi::psi_align`]
//! intersects id sets through salted digests so raw ids never have to leave
//! a client, and [`batch::BatchPlan`] turns an aligned sample count into
//! seeded, shuffled batch index lists that every participant can derive
//! independently.

pub mod batch;
pub mod idx;
pub mod psi;
pub mod split;
pub mod synth;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    IdxMagic {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated at offset {offset}: needed {needed} bytes, {got} available")]
    IdxTruncated {
        path: String,
        offset: usize,
        needed: usize,
        got: usize,
    },

    #[error("image count {images} does not match label count {labels}")]
    IdxCount { images: usize, labels: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid split: {0}")]
    BadSplit(String),

    #[error("invalid dataset request: {0}")]
    BadRequest(String),
}

/// Features plus labels plus sample identity, before vertical splitting.
///
/// `data` is row-major `[n x dim]`; `image_rows * image_cols == dim`, and a
/// non-image dataset uses `image_rows == dim`, `image_cols == 1` so band
/// splitting still partitions coordinates contiguously. Pixels are
/// normalized to [0, 1].
#[derive(Debug, Clone)]
pub struct RawDataset<T> {
    pub ids: Vec<u64>,
    pub data: Vec<T>,
    pub dim: usize,
    pub image_rows: usize,
    pub image_cols: usize,
    pub labels: Vec<u32>,
    pub classes: usize,
}

impl<T: Scalar> RawDataset<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Keeps the first `limit` samples; 0 means keep everything.
    pub fn truncate(&mut self, limit: usize) {
        if limit == 0 || limit >= self.len() {
            return;
        }
        self.ids.truncate(limit);
        self.labels.truncate(limit);
        self.data.truncate(limit * self.dim);
    }
}

/// One client's vertical slice of a dataset, row-major `[rows x dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMatrix<T> {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ViewMatrix<T> {
    pub fn new(rows: usize, dim: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * dim, data.len(), "view data must be rows x dim");
        ViewMatrix { rows, dim, data }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers the given rows into a dense tensor in the given order.
    pub fn gather(&self, rows: &[usize]) -> crate::tensor::Tensor<T> {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        crate::tensor::Tensor::new(vec![rows.len(), self.dim], data)
    }

    /// Reorders rows so that new row k is old row `order[k]`.
    pub fn reorder(&self, order: &[usize]) -> ViewMatrix<T> {
        let mut data = Vec::with_capacity(order.len() * self.dim);
        for &r in order {
            data.extend_from_slice(self.row(r));
        }
        ViewMatrix::new(order.len(), self.dim, data)
    }

    pub fn as_tensor(&self) -> crate::tensor::Tensor<T> {
        crate::tensor::Tensor::new(vec![self.rows, self.dim], self.data.clone())
    }
}
