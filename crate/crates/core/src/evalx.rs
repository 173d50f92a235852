//! Accuracy, relative accuracy, negation checks and disentanglement error.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::blocks::{apply_anisotropic, BlockedTensor, CoefficientSet, TaskVector};
use crate::error::{Error, Result};
use crate::net::{Batch, Logits, ToyModel};

/// Share of argmax predictions equal to the labels, in percent.
pub fn accuracy_from_logits(logits: &Logits, labels: &[usize]) -> f64 {
    let hits = logits.predictions().iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}

pub fn accuracy(model: &ToyModel, theta: &BlockedTensor, data: &Batch) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("accuracy of an empty dataset"));
    }
    Ok(accuracy_from_logits(&model.forward(theta, data)?, &data.labels))
}

/// `100 · abs / finetuned_ref`.
pub fn relative_accuracy(abs: f64, finetuned_ref: f64) -> Result<f64> {
    if !(finetuned_ref > 0.0) {
        return Err(Error::config(format!("reference accuracy must be positive, got {finetuned_ref}")));
    }
    Ok(100.0 * abs / finetuned_ref)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegationReport {
    pub target_pretrained: f64,
    pub target: f64,
    pub control_pretrained: f64,
    pub control: f64,
    /// `control / control_pretrained`.
    pub retention: f64,
    pub pass: bool,
}

/// Negation is accepted when control accuracy stays at or above 95% of
/// the pre-trained control accuracy.
pub fn negation_report(
    model: &ToyModel,
    theta0: &BlockedTensor,
    edited: &BlockedTensor,
    target: &Batch,
    control: &Batch,
) -> Result<NegationReport> {
    let control_pretrained = accuracy(model, theta0, control)?;
    let control_now = accuracy(model, edited, control)?;
    let retention = if control_pretrained > 0.0 { control_now / control_pretrained } else { 1.0 };
    Ok(NegationReport {
        target_pretrained: accuracy(model, theta0, target)?,
        target: accuracy(model, edited, target)?,
        control_pretrained,
        control: control_now,
        retention,
        pass: control_now >= 0.95 * control_pretrained,
    })
}

/// Percentage of examples whose predicted class differs between two logit sets.
pub fn disagreement(a: &Logits, b: &Logits) -> f64 {
    let pa = a.predictions();
    let pb = b.predictions();
    100.0 * pa.iter().zip(&pb).filter(|(x, y)| x != y).count() as f64 / pa.len().max(1) as f64
}

/// `ξ(τ₁, τ₂)`: share of `d1` whose prediction under `θ₀ + Λ₁τ₁` changes
/// once `Λ₂τ₂` is added as well.
pub fn disentanglement_error(
    model: &ToyModel,
    theta0: &BlockedTensor,
    first: (&CoefficientSet, &TaskVector),
    second: (&CoefficientSet, &TaskVector),
    d1: &Batch,
) -> Result<f64> {
    if d1.is_empty() {
        return Err(Error::config("disentanglement error needs data"));
    }
    let single = apply_anisotropic(theta0, first.0, std::slice::from_ref(first.1))?;
    let pair = [first.1.clone(), second.1.clone()];
    let joint = apply_anisotropic(theta0, &stack(first.0, second.0)?, &pair)?;
    Ok(disagreement(&model.forward(&single, d1)?, &model.forward(&joint, d1)?))
}

fn stack(a: &CoefficientSet, b: &CoefficientSet) -> Result<CoefficientSet> {
    a.validate()?;
    b.validate()?;
    if a.num_tvs() != 1 || b.num_tvs() != 1 || a.partitions != 1 || b.partitions != 1 || a.block_names != b.block_names {
        return Err(Error::config("disentanglement expects single-tv K=1 coefficients over the same blocks"));
    }
    let mut values = a.values.clone();
    values.extend_from_slice(&b.values);
    Ok(CoefficientSet {
        tv_ids: vec![a.tv_ids[0].clone(), b.tv_ids[0].clone()],
        block_names: a.block_names.clone(),
        partitions: 1,
        values,
        partition_seed: None,
    })
}

/// Every ordered pair's `ξ`. Diagonal cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisentanglementMatrix {
    pub tv_ids: Vec<String>,
    pub xi: Vec<Vec<Option<f64>>>,
}

impl DisentanglementMatrix {
    /// Mean over the off-diagonal cells.
    pub fn mean(&self) -> f64 {
        let vals: Vec<f64> = self.xi.iter().flatten().flatten().copied().collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// One row per ordered pair (n² rows): `tv_1,tv_2,xi`, with an empty
    /// `xi` on the diagonal.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["tv_1", "tv_2", "xi"])?;
        for (i, a) in self.tv_ids.iter().enumerate() {
            for (j, b) in self.tv_ids.iter().enumerate() {
                let cell = self.xi[i][j].map(|v| format!("{v}")).unwrap_or_default();
                w.write_record([a.as_str(), b.as_str(), cell.as_str()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `ξ(τᵢ, τⱼ)` for all `i ≠ j`, measured on `data[i]`.
pub fn disentanglement_matrix(
    model: &ToyModel,
    theta0: &BlockedTensor,
    members: &[(CoefficientSet, TaskVector)],
    data: &[Batch],
) -> Result<DisentanglementMatrix> {
    if members.len() != data.len() {
        return Err(Error::config(format!("{} task vectors but {} datasets", members.len(), data.len())));
    }
    let n = members.len();
    let mut xi = vec![vec![None; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let a = (&members[i].0, &members[i].1);
                let b = (&members[j].0, &members[j].1);
                xi[i][j] = Some(disentanglement_error(model, theta0, a, b, &data[i])?);
            }
        }
    }
    Ok(DisentanglementMatrix { tv_ids: members.iter().map(|m| m.1.id.clone()).collect(), xi })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub dataset: String,
    pub abs_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracies: Vec<AccuracyRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negation: Option<NegationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_xi: Option<f64>,
}

impl EvalReport {
    pub fn mean_abs(&self) -> f64 {
        self.accuracies.iter().map(|r| r.abs_acc).sum::<f64>() / self.accuracies.len().max(1) as f64
    }

    /// `dataset,abs_acc,rel_acc`, one row per dataset.
    pub fn write_accuracy_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv_writer(out);
        w.write_record(["dataset", "abs_acc", "rel_acc"])?;
        for r in &self.accuracies {
            let rel = r.rel_acc.map(|v| format!("{v}")).unwrap_or_default();
            w.write_record([r.dataset.as_str(), &format!("{}", r.abs_acc), rel.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}
