// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LaserError, Result};
use crate::eval::dataset::QASample;

pub const MIN_SPLIT_SIZE: usize = 5;

/// A seeded 20/80 validation/test partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub validation: Vec<QASample>,
    pub test: Vec<QASample>,
}

/// Validation size: `0.2 · n` rounded half up.
pub fn validation_size(n: usize) -> usize {
    (2 * n + 5) / 10
}

/// Shuffles with a ChaCha8 stream seeded by `seed`, then takes the first
/// [`validation_size`] items for validation.
pub fn split(samples: &[QASample], seed: u64) -> Result<DatasetSplit> {
    if samples.len() < MIN_SPLIT_SIZE {
        return Err(LaserError::invalid(format!(
            "need at least {MIN_SPLIT_SIZE} samples to split, got {}",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = validation_size(samples.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok(DatasetSplit {
        seed,
        validation: pick(&order[..n_val]),
        test: pick(&order[n_val..]),
    })
}
