//! Training in a low-dimensional subspace spanned by random directions or by
//! task vectors, one coefficient per (basis vector, block).
//!
//! Random directions are raw Gaussian draws matched to each block's mean and
//! standard deviation; they are not orthonormalised.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockedTensor, TaskVector};
use crate::error::{Error, Result};
use crate::evalx::{accuracy, csv_writer, relative_accuracy};
use crate::learn::{Learner, TrainConfig};
use crate::net::{Batch, ToyModel};
use crate::select::{Choice, SelectionPlan};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    Random,
    Taskvector,
}

impl BasisKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BasisKind::Random => "random",
            BasisKind::Taskvector => "taskvector",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub kind: BasisKind,
    pub d: usize,
    /// Candidate directions, each shaped like the model.
    pub vectors: Vec<TaskVector>,
    /// Which (vector, block) coefficients are free, layout `i·m + j`.
    /// `None` means all of them.
    pub trainable: Option<Vec<bool>>,
}

impl BasisSet {
    pub fn num_parameters(&self) -> usize {
        match &self.trainable {
            Some(t) => t.iter().filter(|&&x| x).count(),
            None => self.vectors.iter().map(|v| v.specs().len()).sum(),
        }
    }
}

fn block_moments(block: &[f32]) -> (f64, f64) {
    let n = block.len() as f64;
    let mean = block.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = block.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `d` Gaussian directions; block `j` of each is drawn with the mean and
/// standard deviation of `θ₀⁽ʲ⁾` (standard deviation floored at 1e-6).
pub fn make_random_basis(theta0: &BlockedTensor, d: usize, seed: u64) -> BasisSet {
    let mut rng = seeds::stream(seed, "basis/random");
    let fp = theta0.fingerprint();
    let vectors = (0..d)
        .map(|k| {
            let data = theta0
                .blocks()
                .iter()
                .map(|b| {
                    let (mean, std) = block_moments(b);
                    let std = std.max(1e-6);
                    (0..b.len()).map(|_| (mean + std * rng.sample::<f64, _>(StandardNormal)) as f32).collect()
                })
                .collect();
            let tensor = BlockedTensor::new(theta0.specs().to_vec(), data).expect("shapes follow the base");
            TaskVector::dense(format!("random-{k}"), fp, tensor)
        })
        .collect();
    BasisSet { kind: BasisKind::Random, d, vectors, trainable: None }
}

/// Task-vector basis following a blockwise selection plan of budget `d`:
/// block `j` is spanned by the `d` task vectors the plan lists for it.
pub fn make_tv_basis(tvs: &[TaskVector], d: usize, plan: &SelectionPlan) -> Result<BasisSet> {
    if d > tvs.len() {
        return Err(Error::config(format!("d = {d} exceeds the {} available task vectors", tvs.len())));
    }
    if plan.budget != d {
        return Err(Error::config(format!("plan budget {} differs from d = {d}", plan.budget)));
    }
    if !matches!(plan.choice, Choice::Blockwise(_)) {
        return Err(Error::config("task-vector bases need a blockwise plan"));
    }
    let ids = plan.selected_ids();
    let vectors: Vec<TaskVector> = tvs.iter().filter(|t| ids.contains(&t.id)).cloned().collect();
    let names: Vec<String> = vectors.first().map(|v| v.specs().iter().map(|s| s.name.clone()).collect()).unwrap_or_default();
    let trainable = plan.trainable_mask(&vectors, &names, 1)?;
    Ok(BasisSet { kind: BasisKind::Taskvector, d, vectors, trainable: Some(trainable) })
}

/// Task-vector basis using every task vector in full (`d = n`).
pub fn full_tv_basis(tvs: &[TaskVector]) -> BasisSet {
    BasisSet { kind: BasisKind::Taskvector, d: tvs.len(), vectors: tvs.to_vec(), trainable: None }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspacePoint {
    pub basis_kind: BasisKind,
    pub d: usize,
    pub seed: u64,
    pub abs_acc: f64,
    pub rel_acc: f64,
}

/// Learns the basis coefficients on `train` (starting from zero) and reports
/// accuracy on `eval`, absolute and relative to `finetuned_ref_acc`.
pub fn run_subspace_experiment(
    model: &ToyModel,
    theta0: &BlockedTensor,
    basis: &BasisSet,
    train: &Batch,
    eval: &Batch,
    finetuned_ref_acc: f64,
    config: &TrainConfig,
) -> Result<SubspacePoint> {
    let theta = if basis.vectors.is_empty() || basis.num_parameters() == 0 {
        theta0.clone()
    } else {
        let mut learner = Learner::new(model, theta0, &basis.vectors, config);
        if let Some(t) = &basis.trainable {
            learner = learner.trainable(t.iter().flat_map(|&x| std::iter::repeat_n(x, config.partitions)).collect());
        }
        learner.fit(std::slice::from_ref(train))?.compose(theta0, &basis.vectors)?
    };
    let abs_acc = accuracy(model, &theta, eval)?;
    Ok(SubspacePoint {
        basis_kind: basis.kind,
        d: basis.d,
        seed: config.seed,
        abs_acc,
        rel_acc: relative_accuracy(abs_acc, finetuned_ref_acc)?,
    })
}

/// `basis_kind,d,seed,abs_acc,rel_acc`, one row per point.
pub fn write_points_csv<W: Write>(points: &[SubspacePoint], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(["basis_kind", "d", "seed", "abs_acc", "rel_acc"])?;
    for p in points {
        w.write_record([
            p.basis_kind.as_str().to_string(),
            p.d.to_string(),
            p.seed.to_string(),
            format!("{}", p.abs_acc),
            format!("{}", p.rel_acc),
        ])?;
    }
    w.flush()?;
    Ok(())
}
