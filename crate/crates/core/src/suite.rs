//! Ready-made synthetic worlds: a pre-trained model, a family of related
//! tasks and their fine-tuned task vectors.
//!
//! All tasks share one anchor set and label space. The pre-training task
//! sees the anchors unchanged; every downstream task rotates them within a
//! shared plane by its own angle and shifts them along its own direction, so
//! the pre-trained model transfers partially.

use serde::{Deserialize, Serialize};

use crate::blocks::{diff, BlockedTensor, TaskVector};
use crate::data::{generate, Dataset, TaskSpec};
use crate::error::Result;
use crate::evalx::accuracy;
use crate::learn::{finetune, FinetuneConfig};
use crate::net::{Batch, ModelConfig, ToyModel};
use crate::optim::AdamWConfig;
use crate::seeds;

use rand::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub in_dim: usize,
    pub num_classes: usize,
    pub depth: usize,
    pub width: usize,
    pub emb_dim: usize,
    pub anchor_scale: f64,
    pub noise: f64,
    pub pretrain_noise: f64,
    /// Rotation angle range (radians) of downstream tasks.
    pub rotation: (f64, f64),
    /// Shift length range of downstream tasks.
    pub shift: (f64, f64),
    /// Rotate every downstream task within one shared plane.
    #[serde(default)]
    pub shared_plane: bool,
    pub pretrain_per_class: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub pretrain: FinetuneConfig,
    pub finetune: FinetuneConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            in_dim: 6,
            num_classes: 4,
            depth: 2,
            width: 32,
            emb_dim: 8,
            anchor_scale: 1.0,
            noise: 0.3,
            pretrain_noise: 0.3,
            rotation: (1.0, 2.0),
            shift: (2.0, 3.0),
            shared_plane: true,
            pretrain_per_class: 200,
            train_per_class: 100,
            val_per_class: 40,
            test_per_class: 100,
            pretrain: FinetuneConfig {
                epochs: 20,
                batch_size: 32,
                optimizer: AdamWConfig { learning_rate: 3e-3, weight_decay: 0.0, ..AdamWConfig::default() },
                seed: 0,
                linearized: false,
            },
            finetune: FinetuneConfig {
                epochs: 40,
                batch_size: 32,
                optimizer: AdamWConfig { learning_rate: 2e-3, weight_decay: 0.0, ..AdamWConfig::default() },
                seed: 0,
                linearized: false,
            },
        }
    }
}

impl SuiteConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            width: self.width,
            emb_dim: self.emb_dim,
            ..ModelConfig::new(self.in_dim, self.num_classes)
        }
    }

    fn anchor_seed(&self, seed: u64) -> u64 {
        seeds::derive(seed, "suite/anchors")
    }

    /// Spec of the pre-training task.
    pub fn pretrain_spec(&self, seed: u64) -> TaskSpec {
        TaskSpec {
            id: "pretrain".into(),
            in_dim: self.in_dim,
            num_classes: self.num_classes,
            train_per_class: self.pretrain_per_class,
            val_per_class: self.val_per_class,
            test_per_class: self.test_per_class,
            rotation: 0.0,
            shift: 0.0,
            noise: self.pretrain_noise,
            domain_shift: 0.0,
            anchor_seed: self.anchor_seed(seed),
            plane_seed: None,
            anchor_scale: self.anchor_scale,
            seed: seeds::derive(seed, "suite/pretrain"),
        }
    }

    /// `n` downstream task specs named `{family}-{i}`.
    pub fn task_specs(&self, seed: u64, family: &str, n: usize) -> Vec<TaskSpec> {
        let mut rng = seeds::stream(seed, &format!("suite/{family}"));
        (0..n)
            .map(|i| TaskSpec {
                id: format!("{family}-{i}"),
                in_dim: self.in_dim,
                num_classes: self.num_classes,
                train_per_class: self.train_per_class,
                val_per_class: self.val_per_class,
                test_per_class: self.test_per_class,
                rotation: rng.random_range(self.rotation.0..=self.rotation.1),
                shift: rng.random_range(self.shift.0..=self.shift.1),
                noise: self.noise,
                domain_shift: 0.0,
                anchor_seed: self.anchor_seed(seed),
                plane_seed: self.shared_plane.then(|| seeds::derive(seed, "suite/plane")),
                anchor_scale: self.anchor_scale,
                seed: seeds::derive(seed, &format!("suite/{family}/{i}")),
            })
            .collect()
    }
}

/// Everything the experiments share for one seed.
#[derive(Debug, Clone)]
pub struct World {
    pub config: SuiteConfig,
    pub seed: u64,
    pub model: ToyModel,
    pub theta0: BlockedTensor,
    pub pretrain: Dataset,
    pub specs: Vec<TaskSpec>,
    pub tasks: Vec<Dataset>,
    pub tvs: Vec<TaskVector>,
    /// Test accuracy of each fine-tuned model.
    pub finetuned_acc: Vec<f64>,
}

impl World {
    pub fn val_sets(&self) -> Vec<Batch> {
        self.tasks.iter().map(|t| t.val.clone()).collect()
    }

    pub fn test_sets(&self) -> Vec<Batch> {
        self.tasks.iter().map(|t| t.test.clone()).collect()
    }

    /// Task vectors other than task `i`'s.
    pub fn tvs_without(&self, i: usize) -> Vec<TaskVector> {
        self.tvs.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, t)| t.clone()).collect()
    }

    /// Mean test accuracy of `theta` over every task.
    pub fn mean_test_accuracy(&self, theta: &BlockedTensor) -> Result<f64> {
        let mut sum = 0.0;
        for t in &self.tasks {
            sum += accuracy(&self.model, theta, &t.test)?;
        }
        Ok(sum / self.tasks.len() as f64)
    }
}

/// Pre-trains a model for `seed`.
pub fn pretrain(config: &SuiteConfig, seed: u64) -> Result<(ToyModel, BlockedTensor, Dataset)> {
    let model = ToyModel::new(ModelConfig { embedding_seed: seeds::derive(seed, "suite/embeddings"), ..config.model_config() })?;
    let data = generate(&config.pretrain_spec(seed))?;
    let init = model.init(seeds::derive(seed, "suite/init"));
    let cfg = FinetuneConfig { seed: seeds::derive(seed, "suite/pretrain-shuffle"), ..config.pretrain.clone() };
    let (theta0, _) = finetune(&model, &init, &data.train, &cfg)?;
    Ok((model, theta0, data))
}

/// Pre-trains, then fine-tunes one model per task of `family` and keeps the
/// resulting task vectors.
pub fn build_world(config: &SuiteConfig, seed: u64, family: &str, n: usize) -> Result<World> {
    let (model, theta0, pretrain_data) = pretrain(config, seed)?;
    let specs = config.task_specs(seed, family, n);
    let mut tasks = Vec::with_capacity(n);
    let mut tvs = Vec::with_capacity(n);
    let mut finetuned_acc = Vec::with_capacity(n);
    for spec in &specs {
        let data = generate(spec)?;
        let cfg = FinetuneConfig { seed: seeds::derive(seed, &format!("suite/finetune/{}", spec.id)), ..config.finetune.clone() };
        let (ft, _) = finetune(&model, &theta0, &data.train, &cfg)?;
        finetuned_acc.push(accuracy(&model, &ft, &data.test)?);
        tvs.push(diff(&ft, &theta0)?.with_id(spec.id.clone()));
        tasks.push(data);
    }
    Ok(World { config: config.clone(), seed, model, theta0, pretrain: pretrain_data, specs, tasks, tvs, finetuned_acc })
}

/// Eight tasks for addition, negation and disentanglement.
pub fn arithmetic_world(seed: u64) -> Result<World> {
    build_world(&SuiteConfig::default(), seed, "arith", 8)
}

/// Twelve tasks for few-shot transfer, selection and subspace training.
pub fn transfer_world(seed: u64) -> Result<World> {
    build_world(&SuiteConfig::default(), seed, "transfer", 12)
}
