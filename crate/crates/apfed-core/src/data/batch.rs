//! Seeded batch planning over the aligned sample order.
//!
//! Every participant holds the same plan (seed and batch size travel at
//! session setup), so a bare batch counter in a message pins down exactly
//! which aligned rows the batch contains. A fresh permutation is drawn per
//! epoch; the final batch may be short.

use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
}

impl BatchPlan {
    pub fn new(seed: u64, batch_size: usize) -> Self {
        assert!(batch_size > 0, "batch size must be positive");
        BatchPlan { seed, batch_size }
    }

    /// The epoch's shuffled row order.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut r = rng::substream(self.seed, epoch as u64 + 1);
        rng::shuffle(&mut r, &mut order);
        order
    }

    /// Row-index batches for one epoch, in presentation order.
    pub fn batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let order = self.epoch_order(n, epoch);
        order
            .chunks(self.batch_size)
            .map(|c| c.to_vec())
            .collect()
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}
