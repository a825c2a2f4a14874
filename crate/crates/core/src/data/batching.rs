//! Deterministic per-epoch batching.

use rand::Rng;

use crate::rng::{stream_rng, Stream};

/// Batches of record indices for one epoch. The permutation is derived from
/// `(seed, epoch)`; a final partial batch smaller than 2 is dropped (the
/// contrastive objective needs at least one negative).
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, Stream::Shuffle, epoch);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect();
    if let Some(last) = batches.last() {
        if last.len() < 2 {
            batches.pop();
        }
    }
    batches
}
