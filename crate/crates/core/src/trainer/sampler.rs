use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TadaError};

/// Draws batches of indices from reshuffled epochs over `0..n`; falls back to
/// sampling with replacement when the batch is larger than the split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochSampler {
    n: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    with_replacement: bool,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(TadaError::EmptySplit("cannot sample from an empty split".into()));
        }
        if batch == 0 {
            return Err(TadaError::Config("batch size must be positive".into()));
        }
        let with_replacement = batch > n;
        if with_replacement {
            log::warn!("batch size {batch} exceeds split size {n}; sampling with replacement");
        }
        Ok(EpochSampler {
            n,
            batch,
            order: Vec::new(),
            pos: 0,
            with_replacement,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn with_replacement(&self) -> bool {
        self.with_replacement
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.with_replacement {
            return (0..self.batch).map(|_| self.rng.random_range(0..self.n)).collect();
        }
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Independent per-domain samplers yielding equal-size batches.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairedSampler {
    pub source: EpochSampler,
    pub target: EpochSampler,
}

impl PairedSampler {
    pub fn new(n_source: usize, n_target: usize, batch: usize, seeds: (u64, u64)) -> Result<Self> {
        Ok(PairedSampler {
            source: EpochSampler::new(n_source, batch, seeds.0)?,
            target: EpochSampler::new(n_target, batch, seeds.1)?,
        })
    }

    pub fn next_pair(&mut self) -> (Vec<usize>, Vec<usize>) {
        (self.source.next_batch(), self.target.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_sizes_and_reproducible() {
        let mut a = PairedSampler::new(10, 7, 4, (1, 2)).unwrap();
        let mut b = PairedSampler::new(10, 7, 4, (1, 2)).unwrap();
        for _ in 0..20 {
            let (s, t) = a.next_pair();
            assert_eq!((s.len(), t.len()), (4, 4));
            assert_eq!((s, t), b.next_pair());
        }
    }

    #[test]
    fn each_sample_once_per_epoch() {
        let mut s = EpochSampler::new(12, 3, 9).unwrap();
        for _ in 0..3 {
            let mut seen: Vec<usize> = (0..4).flat_map(|_| s.next_batch()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..12).collect::<Vec<_>>());
        }
    }

    #[test]
    fn oversized_batch_uses_replacement() {
        let mut s = EpochSampler::new(3, 8, 0).unwrap();
        assert!(s.with_replacement());
        let b = s.next_batch();
        assert_eq!(b.len(), 8);
        assert!(b.iter().all(|&i| i < 3));
        assert!(EpochSampler::new(0, 2, 0).is_err());
    }
}
