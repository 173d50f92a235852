mod common;

use common::*;
use tvkit::blocks::{apply_isotropic, BlockedTensor, TaskVector};
use tvkit::data::kshot;
use tvkit::evalx::accuracy;
use tvkit::learn::{learn_fewshot, TrainConfig};
use tvkit::lora::{finetune_lora, LoraConfig};
use tvkit::optim::AdamWConfig;
use tvkit::suite::transfer_world;

#[test]
fn zero_epochs_leave_a_zero_delta() {
    let model = small_model();
    let mut r = rng("lora-zero");
    let theta0 = model.init(1);
    let data = random_batch(5, 3, 30, &mut r);
    let tv = finetune_lora(&model, &theta0, &data, "z", &LoraConfig { epochs: 0, ..LoraConfig::default() }).unwrap();
    assert!(tv.is_factored());
    assert!(tv.to_dense().blocks().iter().flatten().all(|&v| v == 0.0));
    assert_eq!(apply_isotropic(&theta0, 1.0, &[tv]).unwrap(), theta0);
}

#[test]
fn unit_composite_is_base_plus_densified_delta() {
    let model = small_model();
    let mut r = rng("lora-unit");
    let theta0 = model.init(2);
    let data = random_batch(5, 3, 30, &mut r);
    let cfg = LoraConfig { rank: 2, epochs: 3, batch_size: 8, ..LoraConfig::default() };
    let tv = finetune_lora(&model, &theta0, &data, "u", &cfg).unwrap();
    let dense = tv.to_dense();
    assert!(dense.blocks().iter().flatten().any(|&v| v != 0.0));
    let want = BlockedTensor::new(
        theta0.specs().to_vec(),
        theta0.blocks().iter().zip(dense.blocks()).map(|(a, d)| a.iter().zip(d).map(|(x, y)| x + y).collect()).collect(),
    )
    .unwrap();
    let got = apply_isotropic(&theta0, 1.0, std::slice::from_ref(&tv)).unwrap();
    assert!(rel_norm_diff(&got, &want) <= 1e-6);
    // only weight matrices move
    for (spec, block) in theta0.specs().iter().zip(dense.blocks()) {
        if spec.matrix_dims().is_none() {
            assert!(block.iter().all(|&v| v == 0.0), "{}", spec.name);
        }
    }
    assert_eq!(finetune_lora(&model, &theta0, &data, "u", &cfg).unwrap(), tv);
}

/// Dense task vector restricted to its weight-matrix blocks.
fn weights_only(tv: &TaskVector) -> TaskVector {
    let dense = tv.to_dense();
    let blocks = dense
        .specs()
        .iter()
        .zip(dense.blocks())
        .map(|(s, b)| if s.matrix_dims().is_some() { b.clone() } else { vec![0.0; b.len()] })
        .collect();
    TaskVector::dense(tv.id.clone(), tv.base_fingerprint, BlockedTensor::new(dense.specs().to_vec(), blocks).unwrap())
}

#[test]
fn full_rank_lora_matches_dense_weight_vectors_in_few_shot_transfer() {
    let mut gaps = Vec::new();
    for seed in 0..3u64 {
        let w = transfer_world(seed).unwrap();
        let ft = &w.config.finetune;
        let lora: Vec<TaskVector> = w
            .tasks
            .iter()
            .zip(&w.specs)
            .map(|(t, s)| {
                let cfg = LoraConfig {
                    rank: 64,
                    epochs: ft.epochs,
                    batch_size: ft.batch_size,
                    optimizer: AdamWConfig { learning_rate: ft.optimizer.learning_rate, ..AdamWConfig::default() },
                    seed: tvkit::seeds::derive(seed, &format!("lora/{}", s.id)),
                    ..LoraConfig::default()
                };
                finetune_lora(&w.model, &w.theta0, &t.train, s.id.clone(), &cfg).unwrap()
            })
            .collect();
        let dense: Vec<TaskVector> = w.tvs.iter().map(weights_only).collect();
        let cfg = TrainConfig { epochs: 20, batch_size: 32, seed, ..TrainConfig::default() };
        let mut acc = [0.0f64; 2];
        for (i, task) in w.tasks.iter().enumerate() {
            let shots = kshot(task, 16, seed).unwrap().batch(task);
            for (slot, set) in [&lora, &dense].into_iter().enumerate() {
                let others: Vec<TaskVector> = set.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, t)| t.clone()).collect();
                let rep = learn_fewshot(&w.model, &w.theta0, &others, &shots, &w.tvs[i].id, &cfg).unwrap();
                acc[slot] += accuracy(&w.model, &rep.compose(&w.theta0, &others).unwrap(), &task.test).unwrap();
            }
        }
        let n = w.tasks.len() as f64;
        eprintln!("seed {seed}: lora {:.2} dense {:.2}", acc[0] / n, acc[1] / n);
        gaps.push((acc[0] - acc[1]) / n);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(mean.abs() <= 1.0, "mean LoRA - dense gap {mean:.2} over seeds {gaps:?}");
}
