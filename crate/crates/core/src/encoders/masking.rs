//! Span masking and swap-position draws.
//!
//! A span starts at each position independently with probability `mask_prob`
//! and covers `mask_len` positions (truncated at the end of the sequence).
//! Overlapping spans merge. Swap positions are drawn only from the region the
//! mask left uncovered, so the two sets are disjoint on every draw.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct SpanMask {
    /// True where a span covers the position.
    pub indicator: Vec<bool>,
    /// Positions where spans started (one entry per drawn start).
    pub starts: Vec<usize>,
}

impl SpanMask {
    pub fn none(len: usize) -> Self {
        SpanMask {
            indicator: vec![false; len],
            starts: Vec::new(),
        }
    }

    pub fn any(&self) -> bool {
        self.indicator.iter().any(|m| *m)
    }
}

pub fn draw_span_mask(
    len: usize,
    mask_prob: f32,
    mask_len: usize,
    rng: &mut ChaCha8Rng,
) -> SpanMask {
    debug_assert!((0.0..=1.0).contains(&mask_prob));
    debug_assert!(mask_len >= 1);
    let mut indicator = vec![false; len];
    let mut starts = Vec::new();
    for pos in 0..len {
        if rng.gen_range(0.0f32..1.0) < mask_prob {
            starts.push(pos);
            for slot in indicator.iter_mut().skip(pos).take(mask_len) {
                *slot = true;
            }
        }
    }
    SpanMask { indicator, starts }
}

/// Independent Bernoulli(swap_prob) over the unmasked region only.
pub fn draw_swap_positions(masked: &[bool], swap_prob: f32, rng: &mut ChaCha8Rng) -> Vec<bool> {
    debug_assert!((0.0..=1.0).contains(&swap_prob));
    masked
        .iter()
        .map(|m| !m && rng.gen_range(0.0f32..1.0) < swap_prob)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn zero_probability_masks_nothing() {
        let mut rng = stream_rng(1, Stream::Mask, 0);
        let m = draw_span_mask(50, 0.0, 10, &mut rng);
        assert!(!m.any());
        assert!(m.starts.is_empty());
    }

    #[test]
    fn full_probability_with_long_span_masks_everything() {
        let mut rng = stream_rng(1, Stream::Mask, 0);
        let m = draw_span_mask(7, 1.0, 10, &mut rng);
        assert!(m.indicator.iter().all(|x| *x));
        assert_eq!(m.starts.len(), 7);
    }

    #[test]
    fn spans_truncate_at_sequence_end() {
        // force a start at the last position via prob 1 on a length-1 tail
        let mut rng = stream_rng(2, Stream::Mask, 0);
        let m = draw_span_mask(3, 1.0, 2, &mut rng);
        assert_eq!(m.indicator, vec![true, true, true]);
    }

    #[test]
    fn span_start_counts_follow_the_binomial_model() {
        // T=1000, p=0.08, 100 seeds: the mean start count stays within 3
        // standard errors of 80.
        let t = 1000usize;
        let p = 0.08f32;
        let n_seeds = 100;
        let mut total = 0usize;
        for seed in 0..n_seeds {
            let mut rng = stream_rng(seed, Stream::Mask, 0);
            total += draw_span_mask(t, p, 10, &mut rng).starts.len();
        }
        let mean = total as f64 / n_seeds as f64;
        let sigma_single = (t as f64 * 0.08 * 0.92).sqrt();
        let sigma_mean = sigma_single / (n_seeds as f64).sqrt();
        let expected = t as f64 * p as f64;
        assert!(
            (mean - expected).abs() < 3.0 * sigma_mean,
            "mean {mean} vs {expected} (3σ = {})",
            3.0 * sigma_mean
        );
    }

    #[test]
    fn swaps_never_touch_masked_positions() {
        for seed in 0..100u64 {
            let mut rng = stream_rng(seed, Stream::Mask, 0);
            let mask = draw_span_mask(64, 0.2, 5, &mut rng);
            let mut swap_rng = stream_rng(seed, Stream::Swap, 0);
            let swaps = draw_swap_positions(&mask.indicator, 0.5, &mut swap_rng);
            for (m, s) in mask.indicator.iter().zip(&swaps) {
                assert!(!(m & s), "seed {seed}: mask and swap overlap");
            }
        }
    }

    #[test]
    fn full_swap_probability_covers_all_unmasked() {
        let masked = vec![false, true, false, false];
        let mut rng = stream_rng(3, Stream::Swap, 0);
        let swaps = draw_swap_positions(&masked, 1.0, &mut rng);
        assert_eq!(swaps, vec![true, false, true, true]);
    }
}
