//! Stateless per-step batch composition.
//!
//! Batches are addressed by (seed, label, step) rather than drawn from a
//! mutable stream, so resuming a run at step k reproduces exactly the batches
//! a straight-through run would have seen. Each epoch is a fresh shuffle of
//! the pool; short trailing batches are dropped.

use crate::error::{Error, Result};
use crate::numerics::SeedRng;

pub fn batches_per_epoch(pool_len: usize, batch_size: usize) -> usize {
    pool_len / batch_size
}

/// The batch a given training step consumes, as dataset indices.
pub fn batch_for_step(
    pool: &[usize],
    batch_size: usize,
    seed: u64,
    label: &str,
    step: usize,
) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(Error::validation("batch size must be >= 1"));
    }
    if pool.len() < batch_size {
        return Err(Error::validation(format!(
            "pool of {} smaller than batch size {batch_size}",
            pool.len()
        )));
    }
    let bpe = batches_per_epoch(pool.len(), batch_size);
    let epoch = step / bpe;
    let slot = step % bpe;
    let mut order = pool.to_vec();
    let mut rng = SeedRng::new(seed).derive(&format!("batch/{label}/{epoch}"));
    rng.shuffle(&mut order);
    Ok(order[slot * batch_size..(slot + 1) * batch_size].to_vec())
}

/// Stream deriving per-step randomness (masking plans, instruction draws).
pub fn step_rng(seed: u64, label: &str, step: usize) -> SeedRng {
    SeedRng::new(seed).derive(&format!("{label}/{step}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn epoch_is_a_partition_of_the_pool() {
        let pool: Vec<usize> = (100..120).collect();
        let bpe = batches_per_epoch(pool.len(), 6);
        assert_eq!(bpe, 3);
        let mut seen = BTreeSet::new();
        for slot in 0..bpe {
            let b = batch_for_step(&pool, 6, 7, "s1", slot).unwrap();
            assert_eq!(b.len(), 6);
            for i in b {
                assert!(pool.contains(&i));
                assert!(seen.insert(i), "index {i} repeated within an epoch");
            }
        }
        assert_eq!(seen.len(), 18);
    }

    #[test]
    fn deterministic_and_label_separated() {
        let pool: Vec<usize> = (0..32).collect();
        let a = batch_for_step(&pool, 8, 3, "s1", 5).unwrap();
        let b = batch_for_step(&pool, 8, 3, "s1", 5).unwrap();
        assert_eq!(a, b);
        let c = batch_for_step(&pool, 8, 3, "s2", 5).unwrap();
        assert_ne!(a, c);
        let d = batch_for_step(&pool, 8, 4, "s1", 5).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn epochs_reshuffle() {
        let pool: Vec<usize> = (0..16).collect();
        // Step 0 and step 2 are slot 0 of epochs 0 and 1.
        let e0 = batch_for_step(&pool, 8, 11, "x", 0).unwrap();
        let e1 = batch_for_step(&pool, 8, 11, "x", 2).unwrap();
        assert_ne!(e0, e1);
    }

    #[test]
    fn degenerate_pools_rejected() {
        assert!(batch_for_step(&[1, 2], 4, 0, "x", 0).is_err());
        assert!(batch_for_step(&[1, 2], 0, 0, "x", 0).is_err());
    }
}
