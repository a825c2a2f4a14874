//! Fixed-capacity FIFO ring of unit-norm embeddings. Decouples the negative
//! sample count from the batch size: pushes beyond capacity evict the oldest
//! entries.

use crate::tensor::Tensor;

use super::{ContrastiveError, Result};

#[derive(Debug, Clone)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    buf: Vec<f32>,
    /// Next write slot in the ring.
    head: usize,
    fill: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(ContrastiveError::Config(
                "queue capacity and dim must be positive".into(),
            ));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            buf: vec![0.0; capacity * dim],
            head: 0,
            fill: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    /// Append a batch of unit-norm rows, evicting the oldest beyond capacity.
    pub fn push(&mut self, batch: &Tensor) -> Result<()> {
        let shape = batch.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(ContrastiveError::QueueDim {
                expected: self.dim,
                got: shape.to_vec(),
            });
        }
        let b = shape[0];
        if b > self.capacity {
            return Err(ContrastiveError::BatchTooLarge {
                batch: b,
                capacity: self.capacity,
            });
        }
        for row in batch.data().chunks(self.dim) {
            let norm: f64 = row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(ContrastiveError::NotNormalized { norm: norm as f32 });
            }
            self.buf[self.head * self.dim..(self.head + 1) * self.dim].copy_from_slice(row);
            self.head = (self.head + 1) % self.capacity;
            if self.fill < self.capacity {
                self.fill += 1;
            }
        }
        Ok(())
    }

    /// Contents in push order (oldest first), as a [fill, dim] tensor.
    pub fn snapshot(&self) -> Tensor {
        let mut out = Vec::with_capacity(self.fill * self.dim);
        let start = (self.head + self.capacity - self.fill) % self.capacity;
        for i in 0..self.fill {
            let slot = (start + i) % self.capacity;
            out.extend_from_slice(&self.buf[slot * self.dim..(slot + 1) * self.dim]);
        }
        Tensor::new(out, vec![self.fill, self.dim]).expect("queue rows are finite")
    }

    /// Rebuild a queue from rows in push order (checkpoint restore).
    pub fn from_rows(capacity: usize, dim: usize, rows: &Tensor) -> Result<Self> {
        let mut q = NegativeQueue::new(capacity, dim)?;
        if rows.numel() == 0 {
            return Ok(q);
        }
        // restore may hold up to `capacity` rows; push in order
        for chunk in rows.data().chunks(dim) {
            let t = Tensor::new(chunk.to_vec(), vec![1, dim]).expect("finite");
            q.push(&t)?;
        }
        Ok(q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_row(seed: usize, dim: usize) -> Vec<f32> {
        let mut v: Vec<f32> = (0..dim).map(|i| ((seed * 31 + i * 7) % 13) as f32 - 6.0).collect();
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        let n: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    fn batch(seeds: &[usize], dim: usize) -> Tensor {
        let mut data = Vec::new();
        for s in seeds {
            data.extend(unit_row(*s, dim));
        }
        Tensor::new(data, vec![seeds.len(), dim]).unwrap()
    }

    #[test]
    fn fifo_keeps_the_last_capacity_rows_in_order() {
        let mut q = NegativeQueue::new(4, 3).unwrap();
        q.push(&batch(&[1, 2, 3], 3)).unwrap();
        assert_eq!(q.fill(), 3);
        q.push(&batch(&[4, 5, 6], 3)).unwrap();
        assert_eq!(q.fill(), 4);
        let snap = q.snapshot();
        let want: Vec<f32> = [3, 4, 5, 6].iter().flat_map(|s| unit_row(*s, 3)).collect();
        assert_eq!(snap.data(), &want[..]);
    }

    #[test]
    fn push_exactly_capacity_fills_it() {
        let mut q = NegativeQueue::new(3, 2).unwrap();
        q.push(&batch(&[1, 2, 3], 2)).unwrap();
        assert_eq!(q.fill(), 3);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let mut q = NegativeQueue::new(2, 2).unwrap();
        assert!(matches!(
            q.push(&batch(&[1, 2, 3], 2)),
            Err(ContrastiveError::BatchTooLarge { .. })
        ));
    }

    #[test]
    fn non_unit_rows_are_rejected() {
        let mut q = NegativeQueue::new(4, 2).unwrap();
        let t = Tensor::new(vec![2.0, 0.0], vec![1, 2]).unwrap();
        assert!(matches!(
            q.push(&t),
            Err(ContrastiveError::NotNormalized { .. })
        ));
    }

    #[test]
    fn randomized_pushes_match_a_deque_reference() {
        use rand::Rng;
        use std::collections::VecDeque;
        let mut rng = crate::rng::stream_rng(42, crate::rng::Stream::Eval, 1);
        let capacity = 16;
        let mut q = NegativeQueue::new(capacity, 2).unwrap();
        let mut oracle: VecDeque<Vec<f32>> = VecDeque::new();
        let mut counter = 0usize;
        for _ in 0..2000 {
            let b = rng.gen_range(1..=8);
            let seeds: Vec<usize> = (0..b).map(|i| counter + i).collect();
            counter += b;
            q.push(&batch(&seeds, 2)).unwrap();
            for s in &seeds {
                oracle.push_back(unit_row(*s, 2));
                if oracle.len() > capacity {
                    oracle.pop_front();
                }
            }
            let snap = q.snapshot();
            let want: Vec<f32> = oracle.iter().flatten().copied().collect();
            assert_eq!(snap.data(), &want[..]);
            assert_eq!(q.fill(), oracle.len());
        }
    }

    #[test]
    fn snapshot_roundtrip_restores_state() {
        let mut q = NegativeQueue::new(4, 3).unwrap();
        q.push(&batch(&[1, 2, 3, 4, 5], 3)).unwrap();
        let snap = q.snapshot();
        let restored = NegativeQueue::from_rows(4, 3, &snap).unwrap();
        assert_eq!(restored.fill(), q.fill());
        assert_eq!(restored.snapshot().data(), q.snapshot().data());
    }
}
