//! Random per-block partitions, each with its own coefficient (the ×K variant).
//!
//! Masks are never stored on disk. They are a pure function of
//! `(seed, K, block index, block length)` and are regenerated on demand.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{check_coefficients, BlockSpec, BlockedTensor, CoefficientSet, TaskVector};
use crate::compose::Composer;
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMasks {
    seed: u64,
    k: usize,
    lens: Vec<usize>,
}

/// Balanced random assignment: element counts per partition differ by at most one.
pub fn make_partitions(specs: &[BlockSpec], k: usize, seed: u64) -> Result<PartitionMasks> {
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    if let Some(small) = specs.iter().find(|s| s.len() < k) {
        return Err(Error::shape(&small.name, format!("{} elements cannot host {k} non-empty partitions", small.len())));
    }
    Ok(PartitionMasks { seed, k, lens: specs.iter().map(BlockSpec::len).collect() })
}

impl PartitionMasks {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_blocks(&self) -> usize {
        self.lens.len()
    }

    /// Partition id of every element of block `j`.
    pub fn assignment(&self, j: usize) -> Vec<u32> {
        let len = self.lens[j];
        let mut ids: Vec<u32> = (0..len).map(|e| (e % self.k) as u32).collect();
        if self.k > 1 {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.seed, &format!("partition/K={}", self.k)));
            rng.set_stream(j as u64);
            ids.shuffle(&mut rng);
        }
        ids
    }

    pub fn sizes(&self, j: usize) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for id in self.assignment(j) {
            sizes[id as usize] += 1;
        }
        sizes
    }

    pub fn materialize(&self) -> Vec<Vec<u32>> {
        (0..self.lens.len()).map(|j| self.assignment(j)).collect()
    }
}

/// Element `e` of block `j` of task vector `i` is scaled by `λᵢ⁽ʲ⁾[mask(e)]`.
pub fn apply_partitioned(
    base: &BlockedTensor,
    coeffs: &CoefficientSet,
    tvs: &[TaskVector],
    masks: &PartitionMasks,
) -> Result<BlockedTensor> {
    if masks.k() != coeffs.partitions {
        return Err(Error::config(format!("mask K={} but coefficient K={}", masks.k(), coeffs.partitions)));
    }
    check_coefficients(base, coeffs, tvs)?;
    let composer = Composer::new(base, tvs)?.with_masks(masks)?;
    composer.compose(&coeffs.to_f64())
}

/// Learnable parameter count `n·m·K`.
pub fn parameter_count(num_tvs: usize, num_blocks: usize, k: usize) -> usize {
    num_tvs * num_blocks * k
}
