//! Low-rank factored task vectors (`ΔW = B·A`).
//!
//! No `α/r` rescaling is applied: the delta is exactly `B·A`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, BlockSpec, BlockedTensor, TaskVector};
use crate::data::shuffled_batches;
use crate::error::{Error, Result};
use crate::net::{Batch, Loss, ToyModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::seeds;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactor {
    pub block: String,
    pub rank: usize,
    pub out_dim: usize,
    pub in_dim: usize,
    /// `A`, `rank × in_dim`, row-major.
    pub down: Vec<f32>,
    /// `B`, `out_dim × rank`, row-major.
    pub up: Vec<f32>,
}

impl LoraFactor {
    pub fn new(block: impl Into<String>, out_dim: usize, in_dim: usize, rank: usize, down: Vec<f32>, up: Vec<f32>) -> Result<Self> {
        let f = LoraFactor { block: block.into(), rank, out_dim, in_dim, down, up };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.rank > self.out_dim.min(self.in_dim) {
            return Err(Error::shape(&self.block, format!("rank {} outside 1..={}", self.rank, self.out_dim.min(self.in_dim))));
        }
        if self.down.len() != self.rank * self.in_dim {
            return Err(Error::shape(&self.block, format!("A has {} elements, expected {}", self.down.len(), self.rank * self.in_dim)));
        }
        if self.up.len() != self.out_dim * self.rank {
            return Err(Error::shape(&self.block, format!("B has {} elements, expected {}", self.up.len(), self.out_dim * self.rank)));
        }
        Ok(())
    }

    /// Row `r` of `B·A` in 64-bit, written into `out`.
    pub fn delta_row(&self, r: usize, out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.in_dim, 0.0);
        for k in 0..self.rank {
            let b = self.up[r * self.rank + k] as f64;
            if b == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(&self.down[k * self.in_dim..(k + 1) * self.in_dim]) {
                *o += b * a as f64;
            }
        }
    }

    /// Full `out_dim × in_dim` delta, row-major.
    pub fn densify(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.out_dim * self.in_dim);
        let mut row = Vec::new();
        for r in 0..self.out_dim {
            self.delta_row(r, &mut row);
            out.extend(row.iter().map(|&v| v as f32));
        }
        out
    }
}

/// `B·A` for a factor pair.
pub fn densify(factor: &LoraFactor) -> Result<Vec<f32>> {
    factor.validate()?;
    Ok(factor.densify())
}

/// Which weight matrices receive factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BlockFilter {
    #[default]
    AllWeights,
    /// Only weight matrices whose name starts with one of these prefixes.
    Prefixes(Vec<String>),
}

impl BlockFilter {
    pub fn accepts(&self, spec: &BlockSpec) -> bool {
        spec.kind == BlockKind::WeightMatrix
            && match self {
                BlockFilter::AllWeights => true,
                BlockFilter::Prefixes(p) => p.iter().any(|p| spec.name.starts_with(p.as_str())),
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    /// Requested rank; blocks whose smaller side is below it use their full rank.
    pub rank: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Standard deviation of the Gaussian initialisation of `A` (`B` starts at 0).
    pub init_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub blocks: BlockFilter,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            epochs: 10,
            batch_size: 32,
            optimizer: AdamWConfig { learning_rate: 1e-3, ..AdamWConfig::default() },
            init_std: 0.02,
            seed: 0,
            blocks: BlockFilter::AllWeights,
        }
    }
}

/// Fine-tunes rank-`r` factors on every selected weight matrix and returns
/// the resulting factored task vector.
pub fn finetune_lora(
    model: &ToyModel,
    theta0: &BlockedTensor,
    data: &Batch,
    id: impl Into<String>,
    config: &LoraConfig,
) -> Result<TaskVector> {
    theta0.check_same_specs(model.specs())?;
    config.optimizer.validate()?;
    if config.rank == 0 {
        return Err(Error::config("LoRA rank must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::config("LoRA fine-tuning needs data"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let mut init = seeds::stream(config.seed, "lora/init");
    let mut factors: Vec<(usize, LoraFactor)> = Vec::new();
    for (j, spec) in theta0.specs().iter().enumerate() {
        if !config.blocks.accepts(spec) {
            continue;
        }
        let (rows, cols) = spec.matrix_dims().expect("filter accepts matrices only");
        let rank = config.rank.min(rows.min(cols));
        let down = (0..rank * cols).map(|_| (config.init_std * init.sample::<f64, _>(StandardNormal)) as f32).collect();
        factors.push((j, LoraFactor::new(spec.name.clone(), rows, cols, rank, down, vec![0.0; rows * rank])?));
    }
    if factors.is_empty() {
        return Err(Error::config("no weight matrix selected for LoRA"));
    }

    // master copies in 64-bit: for each factor [A..., B...]
    let mut params: Vec<f64> = Vec::new();
    let mut offsets = Vec::new();
    for (_, f) in &factors {
        offsets.push(params.len());
        params.extend(f.down.iter().map(|&v| v as f64));
        params.extend(f.up.iter().map(|&v| v as f64));
    }
    let mut opt = AdamW::new(config.optimizer, params.len());
    let base = theta0.to_f64();
    let mut shuffle = seeds::stream(config.seed, "lora/shuffle");
    let mut trace = Vec::new();

    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let batches = shuffled_batches(data.len(), config.batch_size, &mut shuffle);
        for (bi, idx) in batches.iter().enumerate() {
            let batch = data.select(idx);
            let mut theta = base.clone();
            for ((j, f), &off) in factors.iter().zip(&offsets) {
                let (a, b) = params[off..off + f.rank * (f.in_dim + f.out_dim)].split_at(f.rank * f.in_dim);
                let block = &mut theta[*j];
                for r in 0..f.out_dim {
                    for k in 0..f.rank {
                        let bv = b[r * f.rank + k];
                        for c in 0..f.in_dim {
                            block[r * f.in_dim + c] += bv * a[k * f.in_dim + c];
                        }
                    }
                }
            }
            let (loss, g) = model.backward64(&theta, &batch, Loss::CrossEntropy).map_err(|e| {
                Error::Numeric(format!("LoRA fine-tuning diverged at epoch {epoch} batch {bi} ({e}); loss trace {trace:?}"))
            })?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("LoRA loss non-finite at epoch {epoch} batch {bi}; trace {trace:?}")));
            }
            epoch_loss += loss * batch.len() as f64;
            let mut grad = vec![0.0; params.len()];
            for ((j, f), &off) in factors.iter().zip(&offsets) {
                let gj = &g[*j];
                let (a, b) = params[off..off + f.rank * (f.in_dim + f.out_dim)].split_at(f.rank * f.in_dim);
                let (ga, gb) = grad[off..off + f.rank * (f.in_dim + f.out_dim)].split_at_mut(f.rank * f.in_dim);
                // dA = Bᵀ G, dB = G Aᵀ
                for r in 0..f.out_dim {
                    let grow = &gj[r * f.in_dim..(r + 1) * f.in_dim];
                    for k in 0..f.rank {
                        let bv = b[r * f.rank + k];
                        let arow = &a[k * f.in_dim..(k + 1) * f.in_dim];
                        let mut acc = 0.0;
                        for c in 0..f.in_dim {
                            ga[k * f.in_dim + c] += bv * grow[c];
                            acc += grow[c] * arow[c];
                        }
                        gb[r * f.rank + k] += acc;
                    }
                }
            }
            opt.step(&mut params, &grad, None);
        }
        trace.push(epoch_loss / data.len() as f64);
    }

    let out: Vec<LoraFactor> = factors
        .into_iter()
        .zip(&offsets)
        .map(|((_, mut f), &off)| {
            let na = f.rank * f.in_dim;
            f.down = params[off..off + na].iter().map(|&v| v as f32).collect();
            f.up = params[off + na..off + na + f.out_dim * f.rank].iter().map(|&v| v as f32).collect();
            f
        })
        .collect();
    TaskVector::factored(id, theta0.fingerprint(), theta0.specs().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_down_factor_gives_zero_delta() {
        let f = LoraFactor::new("w", 3, 4, 2, vec![0.0; 8], vec![1.0; 6]).unwrap();
        assert!(densify(&f).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_one_basis() {
        let mut up = vec![0.0; 3];
        up[0] = 1.0;
        let mut down = vec![0.0; 4];
        down[0] = 1.0;
        let d = LoraFactor::new("w", 3, 4, 1, down, up).unwrap().densify();
        assert_eq!(d[0], 1.0);
        assert_eq!(d.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = seeds::stream(3, "lora-test");
        let down: Vec<f32> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = LoraFactor::new("w", 4, 3, 2, down.clone(), up.clone()).unwrap();
        let d = f.densify();
        for r in 0..4 {
            for c in 0..3 {
                let mut acc = 0.0f64;
                for k in 0..2 {
                    acc += up[r * 2 + k] as f64 * down[k * 3 + c] as f64;
                }
                assert_eq!(d[r * 3 + c], acc as f32);
            }
        }
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(LoraFactor::new("w", 4, 3, 4, vec![0.0; 12], vec![0.0; 16]).is_err());
        assert!(LoraFactor::new("w", 4, 3, 2, vec![0.0; 5], vec![0.0; 8]).is_err());
        assert!(LoraFactor::new("w", 4, 3, 0, vec![], vec![]).is_err());
    }
}
