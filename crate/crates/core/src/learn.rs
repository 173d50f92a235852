//! Learning composition coefficients.
//!
//! The only trainable state is the coefficient vector `λ` (one entry per task
//! vector, block and partition). Every objective is a weight-space loss at the
//! composite `θ₀ + Σᵢ Λᵢ τᵢ` (or its linearisation around `θ₀`), and its
//! gradient with respect to `λ` follows from the chain rule
//! `∂L/∂λᵢ⁽ʲ⁾ = ⟨∂L/∂θ⁽ʲ⁾, τᵢ⁽ʲ⁾⟩`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockedTensor, CoefficientSet, TaskVector};
use crate::compose::Composer;
use crate::data::shuffled_batches;
use crate::error::{Error, Result};
use crate::net::{Batch, Logits, Loss, ToyModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::partition::{make_partitions, PartitionMasks};
use crate::seeds;

/// How mini-batches are drawn from several per-task training sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ShuffleMode {
    /// Pool every example and shuffle globally.
    #[default]
    GlobalShuffle,
    /// Round-robin over per-task shuffled batches.
    Interleave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l1_penalty: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub init_coefficient: f64,
    /// Partitions per block (`K`); 1 is plain anisotropic scaling.
    pub partitions: usize,
    pub shuffle: ShuffleMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-1,
            weight_decay: 1e-1,
            epochs: 10,
            batch_size: 128,
            l1_penalty: 0.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            init_coefficient: 0.0,
            partitions: 1,
            shuffle: ShuffleMode::GlobalShuffle,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.partitions == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if !(self.l1_penalty >= 0.0) {
            return Err(Error::config("l1 penalty must be non-negative"));
        }
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Seed that regenerates the partition masks.
    pub fn mask_seed(&self) -> u64 {
        seeds::derive(self.seed, "masks")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnReport {
    pub coeffs: CoefficientSet,
    /// Mean training objective per epoch.
    pub loss_trace: Vec<f64>,
    pub heldout_accuracy: Option<Vec<f64>>,
    pub seed: u64,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct LearnReportJson {
    tv_ids: Vec<String>,
    block_names: Vec<String>,
    #[serde(rename = "K")]
    k: usize,
    coeffs: Vec<f32>,
    loss_trace: Vec<f64>,
    seed: u64,
    config: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    partition_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    heldout_accuracy: Option<Vec<f64>>,
}

impl LearnReport {
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(LearnReportJson {
            tv_ids: self.coeffs.tv_ids.clone(),
            block_names: self.coeffs.block_names.clone(),
            k: self.coeffs.partitions,
            coeffs: self.coeffs.values.clone(),
            loss_trace: self.loss_trace.clone(),
            seed: self.seed,
            config: self.config.clone(),
            partition_seed: self.coeffs.partition_seed,
            heldout_accuracy: self.heldout_accuracy.clone(),
        })
        .expect("report is serialisable")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("report is serialisable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: LearnReportJson = serde_json::from_str(s)?;
        let coeffs = CoefficientSet {
            tv_ids: j.tv_ids,
            block_names: j.block_names,
            partitions: j.k,
            values: j.coeffs,
            partition_seed: j.partition_seed,
        };
        coeffs.validate()?;
        Ok(LearnReport { coeffs, loss_trace: j.loss_trace, heldout_accuracy: j.heldout_accuracy, seed: j.seed, config: j.config })
    }

    /// Composite weights `θ₀ + Σ Λᵢτᵢ` for the learned coefficients.
    pub fn compose(&self, theta0: &BlockedTensor, tvs: &[TaskVector]) -> Result<BlockedTensor> {
        compose_with(theta0, &self.coeffs, tvs)
    }
}

/// Composite for any `K`, regenerating masks from the coefficient metadata.
pub fn compose_with(theta0: &BlockedTensor, coeffs: &CoefficientSet, tvs: &[TaskVector]) -> Result<BlockedTensor> {
    if coeffs.partitions == 1 {
        return crate::blocks::apply_anisotropic(theta0, coeffs, tvs);
    }
    let seed = coeffs.partition_seed.ok_or_else(|| Error::config("K > 1 coefficients carry no partition seed"))?;
    let masks = make_partitions(theta0.specs(), coeffs.partitions, seed)?;
    crate::partition::apply_partitioned(theta0, coeffs, tvs, &masks)
}

/// Chain-rule gradient over all coefficients for a weight-space gradient.
pub fn coefficient_grad(
    theta0: &BlockedTensor,
    tvs: &[TaskVector],
    masks: Option<&PartitionMasks>,
    weight_grad: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let mut composer = Composer::new(theta0, tvs)?;
    if let Some(m) = masks {
        composer = composer.with_masks(m)?;
    }
    composer.coefficient_grad(weight_grad)
}

/// A composite objective over coefficients: plain or linearised forward.
pub struct Objective<'a> {
    model: &'a ToyModel,
    composer: Composer<'a>,
    linearized: bool,
}

impl<'a> Objective<'a> {
    pub fn new(
        model: &'a ToyModel,
        theta0: &'a BlockedTensor,
        tvs: &'a [TaskVector],
        masks: Option<&PartitionMasks>,
        linearized: bool,
    ) -> Result<Self> {
        theta0.check_same_specs(model.specs())?;
        let mut composer = Composer::new(theta0, tvs)?;
        if let Some(m) = masks {
            composer = composer.with_masks(m)?;
        }
        Ok(Objective { model, composer, linearized })
    }

    pub fn num_coefficients(&self) -> usize {
        self.composer.num_coefficients()
    }

    pub fn composer(&self) -> &Composer<'a> {
        &self.composer
    }

    pub fn logits(&self, coeffs: &[f64], batch: &Batch) -> Result<Logits> {
        if self.linearized {
            let delta = self.composer.delta64(coeffs);
            self.model.linearized64(self.composer.base64(), &delta, batch)
        } else {
            self.model.forward64(&self.composer.compose64(coeffs), batch)
        }
    }

    pub fn value(&self, coeffs: &[f64], batch: &Batch, loss: Loss<'_>) -> Result<f64> {
        let logits = self.logits(coeffs, batch)?;
        Ok(loss.evaluate(&logits, &batch.labels).0)
    }

    /// Loss and its gradient with respect to every coefficient.
    pub fn value_and_grad(&self, coeffs: &[f64], batch: &Batch, loss: Loss<'_>) -> Result<(f64, Vec<f64>)> {
        let (value, weight_grad) = if self.linearized {
            let logits = self.logits(coeffs, batch)?;
            let (value, cot) = loss.evaluate(&logits, &batch.labels);
            (value, self.model.vjp64(self.composer.base64(), batch, &cot)?)
        } else {
            self.model.backward64(&self.composer.compose64(coeffs), batch, loss)?
        };
        Ok((value, self.composer.coefficient_grad(&weight_grad)?))
    }
}

/// Optimiser state shared by every coefficient learner.
pub(crate) struct Trainer<'a> {
    pub objective: Objective<'a>,
    pub config: TrainConfig,
    pub params: Vec<f64>,
    frozen: Option<Vec<bool>>,
    opt: AdamW,
    masks: Option<PartitionMasks>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a ToyModel,
        theta0: &'a BlockedTensor,
        tvs: &'a [TaskVector],
        config: &TrainConfig,
        linearized: bool,
        trainable: Option<Vec<bool>>,
    ) -> Result<Self> {
        config.validate()?;
        let masks = if config.partitions > 1 {
            Some(make_partitions(theta0.specs(), config.partitions, config.mask_seed())?)
        } else {
            None
        };
        let objective = Objective::new(model, theta0, tvs, masks.as_ref(), linearized)?;
        let n = objective.num_coefficients();
        let frozen = match trainable {
            Some(t) if t.len() != n => {
                return Err(Error::config(format!("trainable mask has {} entries, expected {n}", t.len())));
            }
            Some(t) => Some(t.into_iter().map(|x| !x).collect::<Vec<bool>>()),
            None => None,
        };
        let params = (0..n)
            .map(|i| if frozen.as_ref().is_some_and(|f| f[i]) { 0.0 } else { config.init_coefficient })
            .collect();
        Ok(Trainer { objective, opt: AdamW::new(config.optimizer(), n), config: config.clone(), params, frozen, masks })
    }

    pub fn logits(&self, batch: &Batch) -> Result<Logits> {
        self.objective.logits(&self.params, batch)
    }

    pub fn value_and_grad(&self, batch: &Batch, loss: Loss<'_>) -> Result<(f64, Vec<f64>)> {
        self.objective.value_and_grad(&self.params, batch, loss)
    }

    /// Adds the L1 term and applies one optimiser step. Returns the regularised loss.
    pub fn step(&mut self, loss: f64, mut grad: Vec<f64>, epoch: usize, batch: usize) -> Result<f64> {
        let l1 = self.config.l1_penalty;
        let mut total = loss;
        if l1 > 0.0 {
            for (i, (g, &p)) in grad.iter_mut().zip(&self.params).enumerate() {
                if self.frozen.as_ref().is_some_and(|f| f[i]) {
                    continue;
                }
                total += l1 * p.abs();
                *g += l1 * if p > 0.0 { 1.0 } else if p < 0.0 { -1.0 } else { 0.0 };
            }
        }
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss or gradient at epoch {epoch}, batch {batch}")));
        }
        if let Some(f) = &self.frozen {
            for (g, &fz) in grad.iter_mut().zip(f) {
                if fz {
                    *g = 0.0;
                }
            }
        }
        self.opt.step(&mut self.params, &grad, self.frozen.as_deref());
        Ok(total)
    }

    pub fn coefficient_set(&self) -> CoefficientSet {
        let composer = self.objective.composer();
        CoefficientSet {
            tv_ids: composer.task_vectors().iter().map(|t| t.id.clone()).collect(),
            block_names: composer.base().block_names(),
            partitions: composer.partitions(),
            values: self.params.iter().map(|&v| v as f32).collect(),
            partition_seed: self.masks.as_ref().map(PartitionMasks::seed),
        }
    }

    pub fn report(&self, loss_trace: Vec<f64>, heldout: Option<Vec<f64>>) -> LearnReport {
        LearnReport {
            coeffs: self.coefficient_set(),
            loss_trace,
            heldout_accuracy: heldout,
            seed: self.config.seed,
            config: self.config.clone(),
        }
    }
}

fn wrap_step<T>(r: Result<T>, epoch: usize, batch: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    })
}

fn accuracy_of(logits: &Logits, labels: &[usize]) -> f64 {
    let hits = logits.predictions().iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len().max(1) as f64
}

/// Epoch plan: list of `(task, indices)` mini-batches.
fn epoch_batches(sets: &[Batch], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    match cfg.shuffle {
        ShuffleMode::GlobalShuffle => {
            let pooled = Batch::concat(&sets.iter().collect::<Vec<_>>());
            shuffled_batches(pooled.len(), cfg.batch_size, rng).iter().map(|idx| pooled.select(idx)).collect()
        }
        ShuffleMode::Interleave => {
            let per_task: Vec<Vec<Batch>> = sets
                .iter()
                .map(|s| shuffled_batches(s.len(), cfg.batch_size, rng).iter().map(|idx| s.select(idx)).collect())
                .collect();
            let longest = per_task.iter().map(Vec::len).max().unwrap_or(0);
            let mut out = Vec::new();
            for r in 0..longest {
                for t in &per_task {
                    if let Some(b) = t.get(r) {
                        out.push(b.clone());
                    }
                }
            }
            out
        }
    }
}

/// Builder for supervised coefficient learning.
pub struct Learner<'a> {
    model: &'a ToyModel,
    theta0: &'a BlockedTensor,
    tvs: &'a [TaskVector],
    config: TrainConfig,
    linearized: bool,
    trainable: Option<Vec<bool>>,
    heldout: Option<&'a Batch>,
}

impl<'a> Learner<'a> {
    pub fn new(model: &'a ToyModel, theta0: &'a BlockedTensor, tvs: &'a [TaskVector], config: &TrainConfig) -> Self {
        Learner { model, theta0, tvs, config: config.clone(), linearized: false, trainable: None, heldout: None }
    }

    pub fn linearized(mut self, on: bool) -> Self {
        self.linearized = on;
        self
    }

    /// Only coefficients flagged `true` are learned; the rest stay at zero.
    pub fn trainable(mut self, mask: Vec<bool>) -> Self {
        self.trainable = Some(mask);
        self
    }

    /// Records accuracy on `batch` after every epoch.
    pub fn heldout(mut self, batch: &'a Batch) -> Self {
        self.heldout = Some(batch);
        self
    }

    /// Minimises mean cross-entropy (+ L1) over the union of `sets`.
    pub fn fit(&self, sets: &[Batch]) -> Result<LearnReport> {
        if self.tvs.is_empty() {
            return Err(Error::config("at least one task vector is required"));
        }
        let total: usize = sets.iter().map(Batch::len).sum();
        if total == 0 {
            return Err(Error::config("training data is empty"));
        }
        let mut trainer = Trainer::new(self.model, self.theta0, self.tvs, &self.config, self.linearized, self.trainable.clone())?;
        let mut rng = seeds::stream(self.config.seed, "shuffle");
        let mut trace = Vec::with_capacity(self.config.epochs);
        let mut heldout = self.heldout.map(|_| Vec::with_capacity(self.config.epochs));
        for epoch in 0..self.config.epochs {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (bi, batch) in epoch_batches(sets, &self.config, &mut rng).iter().enumerate() {
                let (loss, grad) = wrap_step(trainer.value_and_grad(batch, Loss::CrossEntropy), epoch, bi)?;
                let total = trainer.step(loss, grad, epoch, bi)?;
                sum += total * batch.len() as f64;
                count += batch.len();
            }
            trace.push(sum / count as f64);
            if let (Some(h), Some(acc)) = (self.heldout, heldout.as_mut()) {
                let logits = trainer.logits(h)?;
                acc.push(accuracy_of(&logits, &h.labels));
            }
        }
        Ok(trainer.report(trace, heldout))
    }
}

/// Task addition: learn `Λᵢ` minimising cross-entropy of the composite on
/// the union of the per-task training sets.
pub fn learn_addition(
    model: &ToyModel,
    theta0: &BlockedTensor,
    tvs: &[TaskVector],
    train: &[Batch],
    config: &TrainConfig,
) -> Result<LearnReport> {
    Learner::new(model, theta0, tvs, config).fit(train)
}

/// Task addition on the linearised (tangent) model.
pub fn learn_addition_linearized(
    model: &ToyModel,
    theta0: &BlockedTensor,
    tvs: &[TaskVector],
    train: &[Batch],
    config: &TrainConfig,
) -> Result<LearnReport> {
    Learner::new(model, theta0, tvs, config).linearized(true).fit(train)
}

/// Task negation: gradient ascent on the target task and descent on the
/// control task, one batch of each per step, losses summed.
pub fn learn_negation(
    model: &ToyModel,
    theta0: &BlockedTensor,
    tv_target: &TaskVector,
    target: &Batch,
    control: &Batch,
    config: &TrainConfig,
) -> Result<LearnReport> {
    negation_run(model, theta0, tv_target, target, control, config, &mut |_, _| Ok(()))
}

fn negation_run(
    model: &ToyModel,
    theta0: &BlockedTensor,
    tv_target: &TaskVector,
    target: &Batch,
    control: &Batch,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &Trainer<'_>) -> Result<()>,
) -> Result<LearnReport> {
    if target.is_empty() {
        return Err(Error::config("negation needs target data"));
    }
    if control.is_empty() {
        return Err(Error::config("negation needs control data"));
    }
    let tvs = std::slice::from_ref(tv_target);
    let mut trainer = Trainer::new(model, theta0, tvs, config, false, None)?;
    let mut rng = seeds::stream(config.seed, "shuffle");
    let mut control_rng = seeds::stream(config.seed, "shuffle/control");
    let mut control_queue: Vec<Vec<usize>> = Vec::new();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        let batches = shuffled_batches(target.len(), config.batch_size, &mut rng);
        for (bi, idx) in batches.iter().enumerate() {
            if control_queue.is_empty() {
                control_queue = shuffled_batches(control.len(), config.batch_size, &mut control_rng);
                control_queue.reverse();
            }
            let cidx = control_queue.pop().expect("refilled above");
            let tb = target.select(idx);
            let cb = control.select(&cidx);
            let (lt, gt) = wrap_step(trainer.value_and_grad(&tb, Loss::NegatedCrossEntropy), epoch, bi)?;
            let (lc, gc) = wrap_step(trainer.value_and_grad(&cb, Loss::CrossEntropy), epoch, bi)?;
            let grad = gt.iter().zip(&gc).map(|(a, b)| a + b).collect();
            sum += trainer.step(lt + lc, grad, epoch, bi)?;
        }
        trace.push(sum / batches.len() as f64);
        on_epoch(epoch, &trainer)?;
    }
    Ok(trainer.report(trace, None))
}

/// Learning-rate grid and retention rule for [`tune_negation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegationSearch {
    pub learning_rates: Vec<f64>,
    /// Required share of the pre-trained control accuracy.
    pub retention: f64,
}

impl Default for NegationSearch {
    fn default() -> Self {
        NegationSearch { learning_rates: vec![1e-1, 3e-2, 1e-2, 3e-3], retention: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegationChoice {
    pub learning_rate: f64,
    /// Number of epochs of the selected snapshot (0 keeps `θ₀`).
    pub epochs: usize,
    pub target_accuracy: f64,
    pub control_accuracy: f64,
}

/// Runs [`learn_negation`] for every learning rate in `search` and keeps the
/// epoch snapshot with the lowest target accuracy whose control accuracy
/// stays at or above `retention` times the pre-trained control accuracy.
/// Selection uses the same (validation) data as training. Ties keep the
/// earlier candidate.
pub fn tune_negation(
    model: &ToyModel,
    theta0: &BlockedTensor,
    tv_target: &TaskVector,
    target: &Batch,
    control: &Batch,
    config: &TrainConfig,
    search: &NegationSearch,
) -> Result<(LearnReport, NegationChoice)> {
    if search.learning_rates.is_empty() {
        return Err(Error::config("negation search needs at least one learning rate"));
    }
    let control0 = accuracy_of(&model.forward(theta0, control)?, &control.labels);
    let target0 = accuracy_of(&model.forward(theta0, target)?, &target.labels);
    let floor = search.retention * control0;
    let mut best_choice = NegationChoice { learning_rate: 0.0, epochs: 0, target_accuracy: target0, control_accuracy: control0 };
    let mut best: Option<(CoefficientSet, Vec<f64>, TrainConfig)> = None;
    for &lr in &search.learning_rates {
        let cfg = TrainConfig { learning_rate: lr, ..config.clone() };
        let mut found: Option<(usize, f64, f64, CoefficientSet)> = None;
        let report = negation_run(model, theta0, tv_target, target, control, &cfg, &mut |epoch, trainer| {
            let c = accuracy_of(&trainer.logits(control)?, &control.labels);
            let t = accuracy_of(&trainer.logits(target)?, &target.labels);
            let best_t = found.as_ref().map_or(best_choice.target_accuracy, |f| f.1);
            if c >= floor && t < best_t {
                found = Some((epoch + 1, t, c, trainer.coefficient_set()));
            }
            Ok(())
        })?;
        if let Some((epochs, t, c, coeffs)) = found {
            if t < best_choice.target_accuracy {
                best_choice = NegationChoice { learning_rate: lr, epochs, target_accuracy: t, control_accuracy: c };
                best = Some((coeffs, report.loss_trace[..epochs].to_vec(), TrainConfig { epochs, ..cfg }));
            }
        }
    }
    let report = match best {
        Some((coeffs, loss_trace, cfg)) => LearnReport { coeffs, loss_trace, heldout_accuracy: None, seed: cfg.seed, config: cfg },
        None => LearnReport {
            coeffs: CoefficientSet::zeros_for(std::slice::from_ref(tv_target), theta0),
            loss_trace: Vec::new(),
            heldout_accuracy: None,
            seed: config.seed,
            config: TrainConfig { epochs: 0, ..config.clone() },
        },
    };
    Ok((report, best_choice))
}

/// Few-shot adaptation on `k` examples per class. The target task's own
/// task vector must not be among `tvs`.
pub fn learn_fewshot(
    model: &ToyModel,
    theta0: &BlockedTensor,
    tvs: &[TaskVector],
    kshot_data: &Batch,
    target_id: &str,
    config: &TrainConfig,
) -> Result<LearnReport> {
    check_fewshot(tvs, kshot_data, target_id, model.num_classes())?;
    learn_addition(model, theta0, tvs, std::slice::from_ref(kshot_data), config)
}

pub(crate) fn check_fewshot(tvs: &[TaskVector], data: &Batch, target_id: &str, num_classes: usize) -> Result<()> {
    if let Some(tv) = tvs.iter().find(|t| t.id == target_id) {
        return Err(Error::Protocol(format!("task vector `{}` belongs to the few-shot target task", tv.id)));
    }
    if data.is_empty() {
        return Err(Error::config("k-shot data is empty"));
    }
    let mut counts = vec![0usize; num_classes];
    for &l in &data.labels {
        if l >= num_classes {
            return Err(Error::config(format!("label {l} outside [0, {num_classes})")));
        }
        counts[l] += 1;
    }
    let present: Vec<usize> = counts.into_iter().filter(|&c| c > 0).collect();
    if present.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::config(format!("k-shot data is unbalanced: per-class counts {present:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotropicSearch {
    pub alpha: f64,
    pub accuracy: f64,
    /// `(alpha, mean accuracy)` for every grid point.
    pub curve: Vec<(f64, f64)>,
}

/// Grid `α ∈ {0, 0.05, …, 1}` for `θ₀ + α Σ τᵢ`, scored by mean accuracy
/// over `sets`. Ties keep the smaller `α`.
pub fn search_isotropic(model: &ToyModel, theta0: &BlockedTensor, tvs: &[TaskVector], sets: &[Batch]) -> Result<IsotropicSearch> {
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    search_isotropic_grid(model, theta0, tvs, sets, &grid)
}

pub fn search_isotropic_grid(
    model: &ToyModel,
    theta0: &BlockedTensor,
    tvs: &[TaskVector],
    sets: &[Batch],
    grid: &[f64],
) -> Result<IsotropicSearch> {
    if sets.iter().all(Batch::is_empty) {
        return Err(Error::config("isotropic search needs validation data"));
    }
    let composer = Composer::new(theta0, tvs)?;
    let n = composer.num_coefficients();
    let mut curve = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let theta = composer.compose(&vec![alpha; n])?;
        let mut accs = Vec::new();
        for s in sets.iter().filter(|s| !s.is_empty()) {
            let logits = model.forward(&theta, s)?;
            accs.push(accuracy_of(&logits, &s.labels));
        }
        curve.push((alpha, accs.iter().sum::<f64>() / accs.len() as f64));
    }
    let (alpha, accuracy) = curve.iter().cloned().fold((f64::NAN, f64::NEG_INFINITY), |best, p| if p.1 > best.1 { p } else { best });
    Ok(IsotropicSearch { alpha, accuracy, curve })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Fine-tune the tangent model around the starting weights.
    #[serde(default)]
    pub linearized: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            batch_size: 32,
            optimizer: AdamWConfig { learning_rate: 1e-3, ..AdamWConfig::default() },
            seed: 0,
            linearized: false,
        }
    }
}

/// Full fine-tuning of every block with cross-entropy. Returns the tuned
/// weights and the per-epoch loss trace.
pub fn finetune(model: &ToyModel, start: &BlockedTensor, data: &Batch, config: &FinetuneConfig) -> Result<(BlockedTensor, Vec<f64>)> {
    start.check_same_specs(model.specs())?;
    config.optimizer.validate()?;
    if config.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if config.epochs > 0 && data.is_empty() {
        return Err(Error::config("fine-tuning data is empty"));
    }
    let base = start.to_f64();
    let sizes: Vec<usize> = base.iter().map(Vec::len).collect();
    let mut flat: Vec<f64> = base.iter().flatten().copied().collect();
    let mut opt = AdamW::new(config.optimizer, flat.len());
    let mut rng = seeds::stream(config.seed, "finetune/shuffle");
    let unflatten = |flat: &[f64]| -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(sizes.len());
        let mut at = 0;
        for &s in &sizes {
            out.push(flat[at..at + s].to_vec());
            at += s;
        }
        out
    };
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        for (bi, idx) in shuffled_batches(data.len(), config.batch_size, &mut rng).iter().enumerate() {
            let batch = data.select(idx);
            let params = unflatten(&flat);
            let (loss, grad) = if config.linearized {
                let delta: Vec<Vec<f64>> =
                    params.iter().zip(&base).map(|(p, b)| p.iter().zip(b).map(|(x, y)| x - y).collect()).collect();
                let logits = model.linearized64(&base, &delta, &batch);
                let logits = wrap_step(logits, epoch, bi)?;
                let (loss, cot) = Loss::CrossEntropy.evaluate(&logits, &batch.labels);
                (loss, wrap_step(model.vjp64(&base, &batch, &cot), epoch, bi)?)
            } else {
                wrap_step(model.backward64(&params, &batch, Loss::CrossEntropy), epoch, bi)?
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("fine-tuning loss non-finite at epoch {epoch}, batch {bi}")));
            }
            sum += loss * batch.len() as f64;
            let g: Vec<f64> = grad.into_iter().flatten().collect();
            opt.step(&mut flat, &g, None);
        }
        trace.push(sum / data.len() as f64);
    }
    let tuned = BlockedTensor::from_f64(start.specs(), &unflatten(&flat))?;
    Ok((tuned, trace))
}
