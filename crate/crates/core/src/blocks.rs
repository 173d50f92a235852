//! Parameter blocks, task vectors and coefficient sets.
//!
//! A model's parameters are an ordered list of named blocks (weight matrices,
//! biases, layer-norm gains and biases). A task vector is the blockwise
//! difference between a fine-tuned model and the base it was tuned from, and
//! a [`CoefficientSet`] holds one scalar per (task vector, block, partition).
//!
//! Storage is 32-bit; every arithmetic routine accumulates in 64-bit and
//! rounds once at the end.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compose::Composer;
use crate::error::{Error, Result};
use crate::lora::LoraFactor;

/// Role of a parameter block inside the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    WeightMatrix,
    Bias,
    LnGain,
    LnBias,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::WeightMatrix => "weight-matrix",
            BlockKind::Bias => "bias",
            BlockKind::LnGain => "ln-gain",
            BlockKind::LnBias => "ln-bias",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight-matrix" => BlockKind::WeightMatrix,
            "bias" => BlockKind::Bias,
            "ln-gain" => BlockKind::LnGain,
            "ln-bias" => BlockKind::LnBias,
            _ => return None,
        })
    }

    fn rank(self) -> usize {
        match self {
            BlockKind::WeightMatrix => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: BlockKind,
}

impl BlockSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, kind: BlockKind) -> Result<Self> {
        let spec = BlockSpec { name: name.into(), shape, kind };
        spec.validate()?;
        Ok(spec)
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(rows, cols)` of a weight matrix; `None` for rank-1 blocks.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        match (self.kind, self.shape.as_slice()) {
            (BlockKind::WeightMatrix, [r, c]) => Some((*r, *c)),
            _ => None,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.shape.is_empty() || self.shape.contains(&0) {
            return Err(Error::shape(&self.name, format!("dimensions must be positive, got {:?}", self.shape)));
        }
        if self.shape.len() != self.kind.rank() {
            return Err(Error::shape(
                &self.name,
                format!("{} blocks have rank {}, got shape {:?}", self.kind.as_str(), self.kind.rank(), self.shape),
            ));
        }
        Ok(())
    }
}

/// Ordered named blocks of 32-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedTensor {
    specs: Vec<BlockSpec>,
    data: Vec<Vec<f32>>,
}

impl BlockedTensor {
    pub fn new(specs: Vec<BlockSpec>, data: Vec<Vec<f32>>) -> Result<Self> {
        if specs.len() != data.len() {
            return Err(Error::shape("<tensor>", format!("{} specs but {} data blocks", specs.len(), data.len())));
        }
        let mut seen = std::collections::HashSet::new();
        for (spec, block) in specs.iter().zip(&data) {
            spec.validate()?;
            if !seen.insert(spec.name.as_str()) {
                return Err(Error::shape(&spec.name, "duplicate block name"));
            }
            if block.len() != spec.len() {
                return Err(Error::shape(&spec.name, format!("expected {} elements, got {}", spec.len(), block.len())));
            }
        }
        Ok(BlockedTensor { specs, data })
    }

    pub fn zeros(specs: &[BlockSpec]) -> Self {
        let data = specs.iter().map(|s| vec![0.0; s.len()]).collect();
        BlockedTensor { specs: specs.to_vec(), data }
    }

    pub fn specs(&self) -> &[BlockSpec] {
        &self.specs
    }

    pub fn blocks(&self) -> &[Vec<f32>] {
        &self.data
    }

    pub fn block(&self, j: usize) -> &[f32] {
        &self.data[j]
    }

    pub fn block_mut(&mut self, j: usize) -> &mut [f32] {
        &mut self.data[j]
    }

    pub fn block_by_name(&self, name: &str) -> Option<&[f32]> {
        self.index_of(name).map(|j| self.data[j].as_slice())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn num_blocks(&self) -> usize {
        self.specs.len()
    }

    pub fn num_elements(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    pub fn block_names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    /// Widened copy used by the 64-bit evaluation paths.
    pub fn to_f64(&self) -> Vec<Vec<f64>> {
        self.data.iter().map(|b| b.iter().map(|&v| v as f64).collect()).collect()
    }

    pub fn from_f64(specs: &[BlockSpec], data: &[Vec<f64>]) -> Result<Self> {
        let data = data.iter().map(|b| b.iter().map(|&v| v as f32).collect()).collect();
        BlockedTensor::new(specs.to_vec(), data)
    }

    /// Errors with the first block whose name, shape or position differs.
    pub fn check_same_specs(&self, other: &[BlockSpec]) -> Result<()> {
        check_specs(&self.specs, other)
    }

    /// 64-bit content hash over specs and payload bytes.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        hash_specs(&mut h, &self.specs);
        for block in &self.data {
            for v in block {
                h.update(v.to_le_bytes());
            }
        }
        finish(h)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().flatten().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

pub(crate) fn check_specs(a: &[BlockSpec], b: &[BlockSpec]) -> Result<()> {
    for (x, y) in a.iter().zip(b) {
        if x != y {
            return Err(Error::shape(&x.name, format!("spec {:?} does not match {:?}", x, y)));
        }
    }
    if a.len() != b.len() {
        let name = if a.len() > b.len() { &a[b.len()].name } else { &b[a.len()].name };
        return Err(Error::shape(name, format!("block count {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

fn hash_specs(h: &mut Sha256, specs: &[BlockSpec]) {
    h.update((specs.len() as u64).to_le_bytes());
    for s in specs {
        h.update((s.name.len() as u64).to_le_bytes());
        h.update(s.name.as_bytes());
        h.update(s.kind.as_str().as_bytes());
        h.update((s.shape.len() as u64).to_le_bytes());
        for d in &s.shape {
            h.update((*d as u64).to_le_bytes());
        }
    }
}

fn finish(h: Sha256) -> u64 {
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Either the full delta or LoRA factors on a subset of weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense(BlockedTensor),
    /// Blocks without a factor are exactly zero.
    Factored { specs: Vec<BlockSpec>, factors: Vec<LoraFactor> },
}

/// Weight delta tied to the base model it was computed against.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub id: String,
    pub base_fingerprint: u64,
    payload: Payload,
}

impl TaskVector {
    pub fn dense(id: impl Into<String>, base_fingerprint: u64, delta: BlockedTensor) -> Self {
        TaskVector { id: id.into(), base_fingerprint, payload: Payload::Dense(delta) }
    }

    pub fn factored(
        id: impl Into<String>,
        base_fingerprint: u64,
        specs: Vec<BlockSpec>,
        mut factors: Vec<LoraFactor>,
    ) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for f in &factors {
            let spec = specs
                .iter()
                .find(|s| s.name == f.block)
                .ok_or_else(|| Error::UnknownBlock(f.block.clone()))?;
            let Some((rows, cols)) = spec.matrix_dims() else {
                return Err(Error::shape(&f.block, "LoRA factors only apply to weight matrices"));
            };
            if (rows, cols) != (f.out_dim, f.in_dim) {
                return Err(Error::shape(
                    &f.block,
                    format!("factor dims {}x{} vs block {}x{}", f.out_dim, f.in_dim, rows, cols),
                ));
            }
            f.validate()?;
            if !seen.insert(f.block.clone()) {
                return Err(Error::shape(&f.block, "duplicate factor"));
            }
        }
        let order = |name: &str| specs.iter().position(|s| s.name == name).unwrap_or(usize::MAX);
        factors.sort_by_key(|f| order(&f.block));
        Ok(TaskVector { id: id.into(), base_fingerprint, payload: Payload::Factored { specs, factors } })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn specs(&self) -> &[BlockSpec] {
        match &self.payload {
            Payload::Dense(t) => t.specs(),
            Payload::Factored { specs, .. } => specs,
        }
    }

    pub fn is_factored(&self) -> bool {
        matches!(self.payload, Payload::Factored { .. })
    }

    /// Factor for block `name`, if this is a factored vector carrying one.
    pub fn factor(&self, name: &str) -> Option<&LoraFactor> {
        match &self.payload {
            Payload::Factored { factors, .. } => factors.iter().find(|f| f.block == name),
            Payload::Dense(_) => None,
        }
    }

    /// Full-rank delta. Allocates every block.
    pub fn to_dense(&self) -> BlockedTensor {
        match &self.payload {
            Payload::Dense(t) => t.clone(),
            Payload::Factored { specs, factors } => {
                let mut out = BlockedTensor::zeros(specs);
                for f in factors {
                    let j = out.index_of(&f.block).expect("validated on construction");
                    out.block_mut(j).copy_from_slice(&f.densify());
                }
                out
            }
        }
    }

    /// Keeps only the blocks for which `keep` returns true; the rest become zero.
    pub fn filter_blocks(&self, keep: impl Fn(&BlockSpec) -> bool) -> TaskVector {
        match &self.payload {
            Payload::Dense(t) => {
                let mut out = t.clone();
                for (j, spec) in t.specs().iter().enumerate() {
                    if !keep(spec) {
                        out.block_mut(j).fill(0.0);
                    }
                }
                TaskVector::dense(self.id.clone(), self.base_fingerprint, out)
            }
            Payload::Factored { specs, factors } => {
                let factors = factors
                    .iter()
                    .filter(|f| specs.iter().find(|s| s.name == f.block).is_some_and(&keep))
                    .cloned()
                    .collect();
                TaskVector {
                    id: self.id.clone(),
                    base_fingerprint: self.base_fingerprint,
                    payload: Payload::Factored { specs: specs.clone(), factors },
                }
            }
        }
    }

    /// Content hash of the payload (the id is not part of it).
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.base_fingerprint.to_le_bytes());
        match &self.payload {
            Payload::Dense(t) => {
                h.update(b"dense");
                h.update(t.fingerprint().to_le_bytes());
            }
            Payload::Factored { specs, factors } => {
                h.update(b"factored");
                hash_specs(&mut h, specs);
                for f in factors {
                    h.update(f.block.as_bytes());
                    h.update((f.rank as u64).to_le_bytes());
                    for v in f.down.iter().chain(&f.up) {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        finish(h)
    }

    pub(crate) fn check_base(&self, base: &BlockedTensor, base_fp: u64) -> Result<()> {
        if self.base_fingerprint != base_fp {
            return Err(Error::StaleTaskVector { id: self.id.clone(), expected: base_fp, found: self.base_fingerprint });
        }
        base.check_same_specs(self.specs())
    }
}

/// `fine_tuned - base`, elementwise.
pub fn diff(fine_tuned: &BlockedTensor, base: &BlockedTensor) -> Result<TaskVector> {
    fine_tuned.check_same_specs(base.specs())?;
    let data = fine_tuned
        .blocks()
        .iter()
        .zip(base.blocks())
        .map(|(f, b)| f.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64) as f32).collect())
        .collect();
    let delta = BlockedTensor::new(base.specs().to_vec(), data)?;
    let id = format!("tv-{:016x}", fine_tuned.fingerprint());
    Ok(TaskVector::dense(id, base.fingerprint(), delta))
}

/// Learnable scalars, laid out as `values[(i * m + j) * k + p]` for task
/// vector `i`, block `j`, partition `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub tv_ids: Vec<String>,
    pub block_names: Vec<String>,
    #[serde(rename = "K")]
    pub partitions: usize,
    pub values: Vec<f32>,
    /// Seed that regenerates the partition masks when `partitions > 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_seed: Option<u64>,
}

impl CoefficientSet {
    pub fn filled(tv_ids: Vec<String>, block_names: Vec<String>, partitions: usize, value: f32) -> Self {
        let len = tv_ids.len() * block_names.len() * partitions;
        CoefficientSet { tv_ids, block_names, partitions, values: vec![value; len], partition_seed: None }
    }

    pub fn zeros_for(tvs: &[TaskVector], base: &BlockedTensor) -> Self {
        Self::filled(tvs.iter().map(|t| t.id.clone()).collect(), base.block_names(), 1, 0.0)
    }

    pub fn uniform_for(tvs: &[TaskVector], base: &BlockedTensor, value: f32) -> Self {
        Self::filled(tvs.iter().map(|t| t.id.clone()).collect(), base.block_names(), 1, value)
    }

    pub fn num_tvs(&self) -> usize {
        self.tv_ids.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.block_names.len()
    }

    pub fn index(&self, tv: usize, block: usize, part: usize) -> usize {
        (tv * self.block_names.len() + block) * self.partitions + part
    }

    pub fn get(&self, tv: usize, block: usize, part: usize) -> f32 {
        self.values[self.index(tv, block, part)]
    }

    pub fn set(&mut self, tv: usize, block: usize, part: usize, v: f32) {
        let idx = self.index(tv, block, part);
        self.values[idx] = v;
    }

    /// Sets every partition of `(tv, block)` to `v`.
    pub fn set_block(&mut self, tv: usize, block: usize, v: f32) {
        for p in 0..self.partitions {
            self.set(tv, block, p, v);
        }
    }

    /// Copies each coefficient into `k` partitions; the composite is unchanged.
    pub fn replicate(&self, k: usize, seed: u64) -> Result<CoefficientSet> {
        if self.partitions != 1 {
            return Err(Error::config("only K=1 coefficient sets can be replicated"));
        }
        if k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        let values = self.values.iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();
        Ok(CoefficientSet {
            tv_ids: self.tv_ids.clone(),
            block_names: self.block_names.clone(),
            partitions: k,
            values,
            partition_seed: Some(seed),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.partitions == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        let expected = self.tv_ids.len() * self.block_names.len() * self.partitions;
        if self.values.len() != expected {
            return Err(Error::config(format!("coefficient count {} != n*m*K = {}", self.values.len(), expected)));
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("coefficient {pos} is not finite")));
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs() as f64).sum()
    }
}

/// Checks that `coeffs` indexes exactly `tvs` (in order) and every base block.
pub(crate) fn check_coefficients(base: &BlockedTensor, coeffs: &CoefficientSet, tvs: &[TaskVector]) -> Result<()> {
    coeffs.validate()?;
    if coeffs.tv_ids.len() != tvs.len() {
        return Err(Error::config(format!("coefficients cover {} task vectors, got {}", coeffs.tv_ids.len(), tvs.len())));
    }
    for (id, tv) in coeffs.tv_ids.iter().zip(tvs) {
        if *id != tv.id {
            return Err(Error::config(format!("coefficient order expects `{id}`, got `{}`", tv.id)));
        }
    }
    for name in &coeffs.block_names {
        if base.index_of(name).is_none() {
            return Err(Error::UnknownBlock(name.clone()));
        }
    }
    if coeffs.block_names.len() != base.num_blocks() {
        let missing = base.specs().iter().find(|s| !coeffs.block_names.contains(&s.name)).map(|s| s.name.clone());
        return Err(Error::UnknownBlock(missing.unwrap_or_default()));
    }
    for (name, spec) in coeffs.block_names.iter().zip(base.specs()) {
        if *name != spec.name {
            return Err(Error::config(format!("block order mismatch: `{name}` vs `{}`", spec.name)));
        }
    }
    Ok(())
}

/// `θ₀ + Σᵢ Λᵢ τᵢ`, one coefficient per (task vector, block).
pub fn apply_anisotropic(base: &BlockedTensor, coeffs: &CoefficientSet, tvs: &[TaskVector]) -> Result<BlockedTensor> {
    if coeffs.partitions != 1 {
        return Err(Error::config("partitioned coefficients need partition::apply_partitioned"));
    }
    check_coefficients(base, coeffs, tvs)?;
    let composer = Composer::new(base, tvs)?;
    composer.compose(&coeffs.to_f64())
}

/// `θ₀ + α Σᵢ τᵢ`.
pub fn apply_isotropic(base: &BlockedTensor, alpha: f32, tvs: &[TaskVector]) -> Result<BlockedTensor> {
    let coeffs = CoefficientSet::uniform_for(tvs, base, alpha);
    apply_anisotropic(base, &coeffs, tvs)
}
