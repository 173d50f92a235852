#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tvkit::blocks::{BlockedTensor, TaskVector};
use tvkit::lora::LoraFactor;
use tvkit::net::{Batch, ModelConfig, ToyModel};
use tvkit::seeds;

pub fn rng(label: &str) -> ChaCha8Rng {
    seeds::stream(20_241, label)
}

pub fn small_model() -> ToyModel {
    let cfg = ModelConfig { depth: 2, width: 8, emb_dim: 4, embedding_seed: 3, ..ModelConfig::new(5, 3) };
    ToyModel::new(cfg).unwrap()
}

pub fn random_batch(in_dim: usize, classes: usize, n: usize, r: &mut ChaCha8Rng) -> Batch {
    let inputs = (0..n * in_dim).map(|_| r.sample::<f32, _>(StandardNormal)).collect();
    let labels = (0..n).map(|i| i % classes).collect();
    Batch::new(in_dim, inputs, labels).unwrap()
}

pub fn gaussian_like(theta: &BlockedTensor, scale: f64, r: &mut ChaCha8Rng) -> BlockedTensor {
    let data = theta
        .blocks()
        .iter()
        .map(|b| b.iter().map(|_| (scale * r.sample::<f64, _>(StandardNormal)) as f32).collect())
        .collect();
    BlockedTensor::new(theta.specs().to_vec(), data).unwrap()
}

pub fn dense_tv(id: &str, theta0: &BlockedTensor, scale: f64, r: &mut ChaCha8Rng) -> TaskVector {
    TaskVector::dense(id, theta0.fingerprint(), gaussian_like(theta0, scale, r))
}

/// Rank-`rank` factors on every weight matrix.
pub fn factored_tv(id: &str, theta0: &BlockedTensor, rank: usize, scale: f64, r: &mut ChaCha8Rng) -> TaskVector {
    let factors = theta0
        .specs()
        .iter()
        .filter_map(|s| s.matrix_dims().map(|d| (s.name.clone(), d)))
        .map(|(name, (rows, cols))| {
            let rk = rank.min(rows.min(cols));
            let down = (0..rk * cols).map(|_| (scale * r.sample::<f64, _>(StandardNormal)) as f32).collect();
            let up = (0..rows * rk).map(|_| (scale * r.sample::<f64, _>(StandardNormal)) as f32).collect();
            LoraFactor::new(name, rows, cols, rk, down, up).unwrap()
        })
        .collect();
    TaskVector::factored(id, theta0.fingerprint(), theta0.specs().to_vec(), factors).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let fp = f(&p);
    p[i] -= 2.0 * h;
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rel_norm_diff(a: &BlockedTensor, b: &BlockedTensor) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.blocks().iter().flatten().zip(b.blocks().iter().flatten()) {
        num += ((*x as f64) - (*y as f64)).powi(2);
        den += (*y as f64).powi(2);
    }
    (num / den.max(1e-300)).sqrt()
}
