//! Epoch-shuffled batch streams over index pools.
//!
//! Sampling is without replacement within an epoch; the final short batch of
//! each epoch is dropped so contrastive denominators always see a full B.

use crate::error::{Error, Result};
use crate::numerics::SeedRng;

pub struct BatchStream {
    pool: Vec<usize>,
    batch_size: usize,
    rng: SeedRng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(pool: &[usize], batch_size: usize, rng: SeedRng) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::validation(format!(
                "batch size {batch_size} < 2: one-positive contrastive batches are degenerate"
            )));
        }
        if pool.len() < batch_size {
            return Err(Error::validation(format!(
                "pool of {} smaller than batch size {batch_size}",
                pool.len()
            )));
        }
        let mut s = BatchStream {
            pool: pool.to_vec(),
            batch_size,
            rng,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pool.len() / self.batch_size
    }

    fn reshuffle(&mut self) {
        self.order = self.pool.clone();
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    /// Next batch of dataset indices; recycles epochs forever.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.reshuffle();
        }
        let b = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        b
    }
}

/// One deterministic pass over `pool` in fixed order, full batches only.
/// Used by evaluation, where shuffling is unwanted.
pub fn fixed_batches(pool: &[usize], batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(Error::validation("batch size must be positive"));
    }
    Ok(pool
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn rejects_degenerate_sizes() {
        let rng = SeedRng::new(1);
        assert!(BatchStream::new(&[0, 1, 2], 1, rng).is_err());
        let rng = SeedRng::new(1);
        assert!(BatchStream::new(&[0, 1], 4, rng).is_err());
    }

    #[test]
    fn epoch_arithmetic_drops_short_batch() {
        let pool: Vec<usize> = (0..10).collect();
        let mut s = BatchStream::new(&pool, 4, SeedRng::new(2)).unwrap();
        assert_eq!(s.batches_per_epoch(), 2);
        let b1 = s.next_batch();
        let b2 = s.next_batch();
        assert_eq!(b1.len(), 4);
        assert_eq!(b2.len(), 4);
        // Within one epoch, no repeats.
        let mut seen: Vec<usize> = b1.iter().chain(b2.iter()).copied().collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn same_seed_same_batches() {
        let pool: Vec<usize> = (10..30).collect();
        let mut a = BatchStream::new(&pool, 5, SeedRng::new(7)).unwrap();
        let mut b = BatchStream::new(&pool, 5, SeedRng::new(7)).unwrap();
        for _ in 0..10 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
        let mut c = BatchStream::new(&pool, 5, SeedRng::new(8)).unwrap();
        let differs = (0..10).any(|_| a.next_batch() != c.next_batch());
        assert!(differs);
    }

    #[test]
    fn long_run_frequencies_near_uniform() {
        let pool: Vec<usize> = (0..10).collect();
        let mut s = BatchStream::new(&pool, 4, SeedRng::new(3)).unwrap();
        let mut counts: HashMap<usize, usize> = HashMap::new();
        let epochs = 500;
        for _ in 0..epochs * s.batches_per_epoch() {
            for i in s.next_batch() {
                *counts.entry(i).or_default() += 1;
            }
        }
        let expected = (epochs * s.batches_per_epoch() * 4) as f64 / pool.len() as f64;
        for &i in &pool {
            let c = counts[&i] as f64;
            assert!(
                (c - expected).abs() / expected < 0.05,
                "index {i} drawn {c} times, expected ~{expected}"
            );
        }
    }

    #[test]
    fn fixed_batches_preserve_order() {
        let pool = vec![5, 3, 9, 1, 7];
        let bs = fixed_batches(&pool, 2).unwrap();
        assert_eq!(bs, vec![vec![5, 3], vec![9, 1]]);
    }
}
