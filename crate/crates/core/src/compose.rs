//! Composition engine shared by the apply functions and every learner.
//!
//! Coefficients are a flat slice laid out as in [`CoefficientSet`]
//! (`(i * m + j) * K + p`). Factored task vectors are expanded one row at a
//! time; no full `out × in` delta is ever materialised per task vector.
//!
//! [`CoefficientSet`]: crate::blocks::CoefficientSet

use crate::blocks::{BlockedTensor, Payload, TaskVector};
use crate::error::{Error, Result};
use crate::lora::LoraFactor;
use crate::partition::PartitionMasks;

enum Direction<'a> {
    Dense(&'a [f32]),
    Factored(&'a LoraFactor),
    Zero,
}

pub struct Composer<'a> {
    base: &'a BlockedTensor,
    base64: Vec<Vec<f64>>,
    tvs: &'a [TaskVector],
    partitions: usize,
    masks: Option<Vec<Vec<u32>>>,
}

impl<'a> Composer<'a> {
    pub fn new(base: &'a BlockedTensor, tvs: &'a [TaskVector]) -> Result<Self> {
        let fp = base.fingerprint();
        for tv in tvs {
            tv.check_base(base, fp)?;
        }
        Ok(Composer { base, base64: base.to_f64(), tvs, partitions: 1, masks: None })
    }

    pub fn with_masks(mut self, masks: &PartitionMasks) -> Result<Self> {
        if masks.num_blocks() != self.base.num_blocks() {
            return Err(Error::config("partition masks do not match the base block list"));
        }
        self.partitions = masks.k();
        self.masks = (masks.k() > 1).then(|| masks.materialize());
        Ok(self)
    }

    pub fn base(&self) -> &BlockedTensor {
        self.base
    }

    pub fn base64(&self) -> &[Vec<f64>] {
        &self.base64
    }

    pub fn task_vectors(&self) -> &[TaskVector] {
        self.tvs
    }

    pub fn partitions(&self) -> usize {
        self.partitions
    }

    pub fn num_coefficients(&self) -> usize {
        self.tvs.len() * self.base.num_blocks() * self.partitions
    }

    fn direction(&self, i: usize, j: usize) -> Direction<'_> {
        match self.tvs[i].payload() {
            Payload::Dense(t) => Direction::Dense(t.block(j)),
            Payload::Factored { factors, .. } => {
                let name = &self.base.specs()[j].name;
                match factors.iter().find(|f| &f.block == name) {
                    Some(f) => Direction::Factored(f),
                    None => Direction::Zero,
                }
            }
        }
    }

    fn coeff_index(&self, i: usize, j: usize, p: usize) -> usize {
        (i * self.base.num_blocks() + j) * self.partitions + p
    }

    /// Adds `Σᵢ Λᵢ τᵢ` into `acc` (one 64-bit buffer per block).
    fn accumulate(&self, coeffs: &[f64], acc: &mut [Vec<f64>]) {
        assert_eq!(coeffs.len(), self.num_coefficients(), "coefficient length");
        let mut row = Vec::new();
        for (j, acc_block) in acc.iter_mut().enumerate() {
            let mask = self.masks.as_ref().map(|m| m[j].as_slice());
            for i in 0..self.tvs.len() {
                let lam = |e: usize| match mask {
                    None => coeffs[self.coeff_index(i, j, 0)],
                    Some(m) => coeffs[self.coeff_index(i, j, m[e] as usize)],
                };
                match self.direction(i, j) {
                    Direction::Zero => {}
                    Direction::Dense(tau) => match mask {
                        None => {
                            let l = lam(0);
                            if l != 0.0 {
                                for (a, &t) in acc_block.iter_mut().zip(tau) {
                                    *a += l * t as f64;
                                }
                            }
                        }
                        Some(_) => {
                            for (e, (a, &t)) in acc_block.iter_mut().zip(tau).enumerate() {
                                *a += lam(e) * t as f64;
                            }
                        }
                    },
                    Direction::Factored(f) => {
                        let cols = f.in_dim;
                        match mask {
                            None => {
                                let l = lam(0);
                                if l == 0.0 {
                                    continue;
                                }
                                for r in 0..f.out_dim {
                                    let out = &mut acc_block[r * cols..(r + 1) * cols];
                                    for k in 0..f.rank {
                                        let s = l * f.up[r * f.rank + k] as f64;
                                        let a = &f.down[k * cols..(k + 1) * cols];
                                        for (o, &av) in out.iter_mut().zip(a) {
                                            *o += s * av as f64;
                                        }
                                    }
                                }
                            }
                            Some(_) => {
                                for r in 0..f.out_dim {
                                    f.delta_row(r, &mut row);
                                    for (c, &d) in row.iter().enumerate() {
                                        let e = r * cols + c;
                                        acc_block[e] += lam(e) * d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// `Σᵢ Λᵢ τᵢ` in 64-bit.
    pub fn delta64(&self, coeffs: &[f64]) -> Vec<Vec<f64>> {
        let mut acc: Vec<Vec<f64>> = self.base.specs().iter().map(|s| vec![0.0; s.len()]).collect();
        self.accumulate(coeffs, &mut acc);
        acc
    }

    /// `θ₀ + Σᵢ Λᵢ τᵢ` without rounding to 32-bit.
    pub fn compose64(&self, coeffs: &[f64]) -> Vec<Vec<f64>> {
        let mut acc = self.base64.clone();
        self.accumulate(coeffs, &mut acc);
        acc
    }

    /// `θ₀ + Σᵢ Λᵢ τᵢ`, rounded once to 32-bit.
    pub fn compose(&self, coeffs: &[f64]) -> Result<BlockedTensor> {
        let acc = self.compose64(coeffs);
        BlockedTensor::from_f64(self.base.specs(), &acc)
    }

    /// Chain rule `∂L/∂λᵢ⁽ʲ⁾[p] = Σ_{e ∈ p} G⁽ʲ⁾[e] τᵢ⁽ʲ⁾[e]` for a weight-space gradient `G`.
    pub fn coefficient_grad(&self, grad: &[Vec<f64>]) -> Result<Vec<f64>> {
        if grad.len() != self.base.num_blocks() {
            return Err(Error::shape("<gradient>", format!("{} blocks, expected {}", grad.len(), self.base.num_blocks())));
        }
        for (g, spec) in grad.iter().zip(self.base.specs()) {
            if g.len() != spec.len() {
                return Err(Error::shape(&spec.name, format!("gradient has {} elements, expected {}", g.len(), spec.len())));
            }
        }
        let mut out = vec![0.0; self.num_coefficients()];
        let mut row = Vec::new();
        let mut proj = Vec::new();
        for (j, g) in grad.iter().enumerate() {
            let mask = self.masks.as_ref().map(|m| m[j].as_slice());
            for i in 0..self.tvs.len() {
                let base_idx = self.coeff_index(i, j, 0);
                match (self.direction(i, j), mask) {
                    (Direction::Zero, _) => {}
                    (Direction::Dense(tau), None) => {
                        out[base_idx] = g.iter().zip(tau).map(|(&gv, &t)| gv * t as f64).sum();
                    }
                    (Direction::Dense(tau), Some(m)) => {
                        for (e, (&gv, &t)) in g.iter().zip(tau).enumerate() {
                            out[base_idx + m[e] as usize] += gv * t as f64;
                        }
                    }
                    (Direction::Factored(f), None) => {
                        // ⟨G, BA⟩ = ⟨BᵀG, A⟩
                        let cols = f.in_dim;
                        proj.clear();
                        proj.resize(f.rank * cols, 0.0);
                        for r in 0..f.out_dim {
                            let g_row = &g[r * cols..(r + 1) * cols];
                            for k in 0..f.rank {
                                let b = f.up[r * f.rank + k] as f64;
                                if b == 0.0 {
                                    continue;
                                }
                                for (p, &gv) in proj[k * cols..(k + 1) * cols].iter_mut().zip(g_row) {
                                    *p += b * gv;
                                }
                            }
                        }
                        out[base_idx] = proj.iter().zip(&f.down).map(|(&p, &a)| p * a as f64).sum();
                    }
                    (Direction::Factored(f), Some(m)) => {
                        let cols = f.in_dim;
                        for r in 0..f.out_dim {
                            f.delta_row(r, &mut row);
                            for (c, &d) in row.iter().enumerate() {
                                let e = r * cols + c;
                                out[base_idx + m[e] as usize] += g[e] * d;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{BlockKind, BlockSpec};

    #[test]
    fn one_hot_direction_picks_single_gradient_entry() {
        let specs = vec![
            BlockSpec::new("w", vec![2, 2], BlockKind::WeightMatrix).unwrap(),
            BlockSpec::new("b", vec![2], BlockKind::Bias).unwrap(),
        ];
        let base = BlockedTensor::zeros(&specs);
        let mut tau = BlockedTensor::zeros(&specs);
        tau.block_mut(0)[3] = 1.0;
        let tvs = vec![
            TaskVector::dense("hot", base.fingerprint(), tau),
            TaskVector::dense("zero", base.fingerprint(), BlockedTensor::zeros(&specs)),
        ];
        let c = Composer::new(&base, &tvs).unwrap();
        let g = vec![vec![0.1, 0.2, 0.3, 0.4], vec![5.0, 6.0]];
        let cg = c.coefficient_grad(&g).unwrap();
        assert_eq!(cg, vec![0.4, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_shape_checked() {
        let specs = vec![BlockSpec::new("b", vec![2], BlockKind::Bias).unwrap()];
        let base = BlockedTensor::zeros(&specs);
        let c = Composer::new(&base, &[]).unwrap();
        assert!(c.coefficient_grad(&[vec![0.0; 3]]).is_err());
    }
}
