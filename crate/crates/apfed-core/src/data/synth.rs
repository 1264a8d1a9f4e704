//! Seeded synthetic classification data.
//!
//! Gaussian clusters around class means built from 0.25/0.75 plateaus:
//! coordinate j of the class-c mean is 0.75 when j % classes == c, else
//! 0.25. For dim >= 2 * classes this puts every pair of class means at
//! least distance one apart. Samples are clipped to [0, 1] so the pixel
//! range invariant holds. Labels cycle round-robin, so classes stay
//! balanced.

use super::{DataError, RawDataset};
use crate::rng;
use crate::scalar::{cast, Scalar};

const SIGMA: f64 = 0.08;

pub fn synth_dataset<T: Scalar>(
    seed: u64,
    n: usize,
    dim: usize,
    classes: usize,
) -> Result<RawDataset<T>, DataError> {
    if n == 0 || dim == 0 {
        return Err(DataError::BadRequest(format!(
            "need positive sample count and dimension, got n={n}, dim={dim}"
        )));
    }
    if classes < 2 {
        return Err(DataError::BadRequest(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    let mut r = rng::seeded(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c as u32);
        for j in 0..dim {
            let mean = if j % classes == c { 0.75 } else { 0.25 };
            let x = (mean + SIGMA * rng::standard_normal(&mut r)).clamp(0.0, 1.0);
            data.push(cast::<T>(x));
        }
    }
    Ok(RawDataset {
        ids: (0..n as u64).collect(),
        data,
        dim,
        image_rows: dim,
        image_cols: 1,
        labels,
        classes,
    })
}
