//! Test-time adaptation of composition coefficients from unlabelled data:
//! entropy minimisation and unsupervised FixMatch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockedTensor, TaskVector};
use crate::data::shuffled_batches;
use crate::error::{Error, Result};
use crate::learn::{LearnReport, TrainConfig, Trainer};
use crate::net::{softmax, Batch, Logits, Loss, ToyModel};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UfmConfig {
    /// Upper bound on trusted examples per predicted class.
    pub trusted_cap: usize,
    pub omega_start: f64,
    pub omega_end: f64,
    /// Share of every batch drawn from the trusted set.
    pub trusted_fraction: f64,
    /// Exponent of the sharpening step.
    pub temperature: f64,
    pub weak_noise: f64,
    pub strong_noise: f64,
    pub strong_dropout: f64,
}

impl Default for UfmConfig {
    fn default() -> Self {
        UfmConfig {
            trusted_cap: 100,
            omega_start: 0.9,
            omega_end: 1.0,
            trusted_fraction: 0.25,
            temperature: 0.5,
            weak_noise: 0.01,
            strong_noise: 0.1,
            strong_dropout: 0.1,
        }
    }
}

impl UfmConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |w: f64| w > 0.0 && w <= 1.0;
        if !in_unit(self.omega_start) || !in_unit(self.omega_end) {
            return Err(Error::config("omega must lie in (0, 1]"));
        }
        if !(self.trusted_fraction > 0.0 && self.trusted_fraction < 1.0) {
            return Err(Error::config("trusted fraction must lie in (0, 1)"));
        }
        if self.trusted_cap == 0 {
            return Err(Error::config("trusted cap must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature exponent must be positive"));
        }
        if !(0.0..1.0).contains(&self.strong_dropout) || self.weak_noise < 0.0 || self.strong_noise < 0.0 {
            return Err(Error::config("invalid augmentation settings"));
        }
        Ok(())
    }

    /// Threshold at optimisation step `step` of `total`.
    pub fn omega(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.omega_start;
        }
        self.omega_start + (self.omega_end - self.omega_start) * step as f64 / (total - 1) as f64
    }
}

/// `p^t / Σ p^t` with `t = 0.5`.
pub fn sharpen(probs: &[f64]) -> Result<Vec<f64>> {
    sharpen_with(probs, 0.5)
}

pub fn sharpen_with(probs: &[f64], exponent: f64) -> Result<Vec<f64>> {
    if let Some(p) = probs.iter().find(|&&p| !(p >= 0.0)) {
        return Err(Error::Numeric(format!("cannot sharpen a distribution with entry {p}")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Numeric(format!("probabilities sum to {sum}, not 1")));
    }
    let powered: Vec<f64> = probs.iter().map(|p| p.powf(exponent)).collect();
    let z: f64 = powered.iter().sum();
    Ok(powered.into_iter().map(|p| p / z).collect())
}

fn sharpened_softmax(row: &[f64], exponent: f64) -> Vec<f64> {
    let p = softmax(row);
    let powered: Vec<f64> = p.iter().map(|v| v.powf(exponent)).collect();
    let z: f64 = powered.iter().sum();
    powered.into_iter().map(|v| v / z).collect()
}

/// Pseudo-labelled subset of the unlabelled data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustedSet {
    /// Quota per class, `min(⌊N/C⌋, cap)`.
    pub quota: usize,
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    /// Classes that received fewer than `quota` examples.
    pub short_classes: Vec<usize>,
}

impl TrustedSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn batch(&self, data: &Batch) -> Batch {
        let mut b = data.select(&self.indices);
        b.labels.clone_from(&self.labels);
        b
    }
}

/// Trusted set from precomputed logits: per predicted class, the most
/// confident `min(⌊N/C⌋, cap)` examples (ties to the lower index).
pub fn trusted_from_logits(logits: &Logits, num_classes: usize, cap: usize) -> Result<TrustedSet> {
    let n = logits.rows;
    if n < num_classes {
        return Err(Error::config(format!("trusted set needs at least {num_classes} examples, got {n}")));
    }
    let quota = (n / num_classes).min(cap);
    let mut by_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); num_classes];
    for i in 0..n {
        let p = softmax(logits.row(i));
        let c = crate::net::argmax(logits.row(i));
        by_class[c].push((p[c], i));
    }
    let mut indices = Vec::new();
    let mut labels = Vec::new();
    let mut short_classes = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        members.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if members.len() < quota {
            short_classes.push(c);
        }
        for (_, i) in members.into_iter().take(quota) {
            indices.push(i);
            labels.push(c);
        }
    }
    Ok(TrustedSet { quota, indices, labels, short_classes })
}

/// Trusted set for the model at weights `theta`, capped at 100 per class.
pub fn build_trusted_set(model: &ToyModel, theta: &BlockedTensor, data: &Batch, num_classes: usize) -> Result<TrustedSet> {
    trusted_from_logits(&model.forward(theta, data)?, num_classes, UfmConfig::default().trusted_cap)
}

/// Per-example `−𝟙(max σ(ŷ) > ω) σ(ŷ)ᵀ log ŷ′` with `ŷ = softmax(weak)`
/// and `ŷ′ = softmax(strong)`.
pub fn ufm_loss(weak: &Logits, strong: &Logits, omega: f64) -> Vec<f64> {
    ufm_loss_grad(weak, strong, omega, 0.5).0
}

/// Per-example losses and `∂ℓ/∂strong` (weak branch held constant).
pub fn ufm_loss_grad(weak: &Logits, strong: &Logits, omega: f64, exponent: f64) -> (Vec<f64>, Logits) {
    assert_eq!((weak.rows, weak.cols), (strong.rows, strong.cols), "weak and strong logits differ in shape");
    let mut losses = Vec::with_capacity(weak.rows);
    let mut grad = Logits::zeros(strong.rows, strong.cols);
    for i in 0..weak.rows {
        let q = sharpened_softmax(weak.row(i), exponent);
        let gate = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > omega;
        if !gate {
            losses.push(0.0);
            continue;
        }
        let row = strong.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let mut loss = 0.0;
        for (c, g) in grad.row_mut(i).iter_mut().enumerate() {
            let lp = row[c] - lse;
            loss -= q[c] * lp;
            *g = lp.exp() - q[c];
        }
        losses.push(loss);
    }
    (losses, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptReport {
    pub learn: LearnReport,
    /// Trusted-set size at the start of each epoch.
    pub trusted_sizes: Vec<usize>,
    /// Measured share of trusted examples among all examples seen per epoch.
    pub trusted_ratio: Vec<f64>,
    pub warnings: Vec<String>,
}

impl AdaptReport {
    pub fn to_json_value(&self) -> serde_json::Value {
        let mut v = self.learn.to_json_value();
        let obj = v.as_object_mut().expect("report is an object");
        obj.insert("trusted_sizes".into(), serde_json::json!(self.trusted_sizes));
        obj.insert("trusted_ratio".into(), serde_json::json!(self.trusted_ratio));
        obj.insert("warnings".into(), serde_json::json!(self.warnings));
        v
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("report is serialisable")
    }
}

fn augment(batch: &Batch, noise: f64, dropout: f64, rng: &mut ChaCha8Rng) -> Batch {
    let mut out = batch.clone();
    for x in &mut out.inputs {
        let mut v = *x as f64 + noise * rng.sample::<f64, _>(StandardNormal);
        if dropout > 0.0 && rng.random::<f64>() < dropout {
            v = 0.0;
        }
        *x = v as f32;
    }
    out
}

/// Unsupervised FixMatch over the composition coefficients. Every batch
/// holds `trusted_fraction` pseudo-labelled trusted examples (cross-entropy)
/// and unlabelled examples scored by [`ufm_loss`] on weak/strong views.
pub fn adapt_ufm(
    model: &ToyModel,
    theta0: &BlockedTensor,
    tvs: &[TaskVector],
    unlabeled: &Batch,
    config: &TrainConfig,
    ufm: &UfmConfig,
) -> Result<AdaptReport> {
    ufm.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::config("test-time adaptation needs data"));
    }
    let c = model.num_classes();
    let mut trainer = Trainer::new(model, theta0, tvs, config, false, None)?;
    let mut shuffle = seeds::stream(config.seed, "shuffle");
    let mut aug = seeds::stream(config.seed, "tta/augment");

    let unl_per_batch = ((config.batch_size as f64 * (1.0 - ufm.trusted_fraction)).round() as usize).max(1);
    let trusted_for = |u: usize| ((u as f64) * ufm.trusted_fraction / (1.0 - ufm.trusted_fraction)).round() as usize;
    let steps_per_epoch = unlabeled.len().div_ceil(unl_per_batch);
    let total_steps = steps_per_epoch * config.epochs;

    let mut trace = Vec::with_capacity(config.epochs);
    let mut sizes = Vec::with_capacity(config.epochs);
    let mut ratios = Vec::with_capacity(config.epochs);
    let mut warnings = Vec::new();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let trusted = trusted_from_logits(&trainer.logits(unlabeled)?, c, ufm.trusted_cap)?;
        if !trusted.short_classes.is_empty() {
            warnings.push(format!("epoch {epoch}: classes {:?} have fewer than {} trusted examples", trusted.short_classes, trusted.quota));
        }
        sizes.push(trusted.len());
        let trusted_batch = trusted.batch(unlabeled);
        let mut trusted_queue: Vec<usize> = Vec::new();
        let (mut seen_trusted, mut seen_total) = (0usize, 0usize);
        let mut sum = 0.0;
        for (bi, idx) in shuffled_batches(unlabeled.len(), unl_per_batch, &mut shuffle).iter().enumerate() {
            let omega = ufm.omega(step, total_steps);
            step += 1;
            let unl = unlabeled.select(idx);
            let mut t_idx = Vec::new();
            for _ in 0..trusted_for(unl.len()) {
                if trusted_queue.is_empty() {
                    trusted_queue = shuffled_batches(trusted_batch.len(), trusted_batch.len().max(1), &mut shuffle).concat();
                }
                match trusted_queue.pop() {
                    Some(i) => t_idx.push(i),
                    None => break,
                }
            }
            seen_trusted += t_idx.len();
            seen_total += t_idx.len() + unl.len();

            let weak = augment(&unl, ufm.weak_noise, 0.0, &mut aug);
            let strong = augment(&unl, ufm.strong_noise, ufm.strong_dropout, &mut aug);
            let weak_logits = trainer.logits(&weak)?;
            let strong_logits = trainer.logits(&strong)?;
            let (losses, mut cot) = ufm_loss_grad(&weak_logits, &strong_logits, omega, ufm.temperature);
            let scale = 1.0 / unl.len() as f64;
            cot.data.iter_mut().for_each(|g| *g *= scale);
            let mut loss = losses.iter().sum::<f64>() * scale;
            let (_, mut grad) = trainer.value_and_grad(&strong, Loss::Cotangent(&cot.data))?;

            if !t_idx.is_empty() {
                let tb = augment(&trusted_batch.select(&t_idx), ufm.weak_noise, 0.0, &mut aug);
                let (lt, gt) = trainer.value_and_grad(&tb, Loss::CrossEntropy)?;
                loss += lt;
                grad.iter_mut().zip(&gt).for_each(|(a, b)| *a += b);
            }
            sum += trainer.step(loss, grad, epoch, bi)?;
        }
        trace.push(sum / steps_per_epoch as f64);
        ratios.push(seen_trusted as f64 / seen_total as f64);
    }
    Ok(AdaptReport { learn: trainer.report(trace, None), trusted_sizes: sizes, trusted_ratio: ratios, warnings })
}

/// Entropy of the histogram of predicted classes.
pub fn prediction_entropy(predictions: &[usize], num_classes: usize) -> f64 {
    let mut counts = vec![0usize; num_classes];
    for &p in predictions {
        counts[p] += 1;
    }
    let n = predictions.len() as f64;
    counts.iter().filter(|&&k| k > 0).map(|&k| k as f64 / n).map(|p| -p * p.ln()).sum()
}

/// Minimises the mean prediction entropy over the coefficients. A warning
/// is recorded whenever the predicted-class histogram entropy at the end of an
/// epoch drops below `ln(C)/4`.
pub fn adapt_entropy(
    model: &ToyModel,
    theta0: &BlockedTensor,
    tvs: &[TaskVector],
    unlabeled: &Batch,
    config: &TrainConfig,
) -> Result<AdaptReport> {
    if unlabeled.is_empty() {
        return Err(Error::config("test-time adaptation needs data"));
    }
    let c = model.num_classes();
    let mut trainer = Trainer::new(model, theta0, tvs, config, false, None)?;
    let mut shuffle = seeds::stream(config.seed, "shuffle");
    let mut trace = Vec::with_capacity(config.epochs);
    let mut warnings = Vec::new();
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        for (bi, idx) in shuffled_batches(unlabeled.len(), config.batch_size, &mut shuffle).iter().enumerate() {
            let batch = unlabeled.select(idx);
            let (loss, grad) = trainer.value_and_grad(&batch, Loss::Entropy)?;
            sum += trainer.step(loss, grad, epoch, bi)? * batch.len() as f64;
        }
        trace.push(sum / unlabeled.len() as f64);
        let h = prediction_entropy(&trainer.logits(unlabeled)?.predictions(), c);
        if h < (c as f64).ln() / 4.0 {
            warnings.push(format!("epoch {epoch}: prediction collapse, class-histogram entropy {h:.4} < ln(C)/4"));
        }
    }
    Ok(AdaptReport { learn: trainer.report(trace, None), trusted_sizes: Vec::new(), trusted_ratio: Vec::new(), warnings })
}
