//! Built-in toy encoder with a frozen cosine-similarity class head.
//!
//! Each hidden layer computes `h ← GELU(γ ⊙ LN(W h + b) + β)`; a final
//! projection maps to the embedding space, the embedding is L2-normalised and
//! compared against frozen unit-norm class embeddings, scaled by a fixed
//! logit scale. Layer norm uses the biased (population) variance. GELU is the
//! tanh approximation.
//!
//! Three evaluation paths share the same arithmetic order:
//! - a cached 64-bit forward used by [`ToyModel::forward`] and the reverse pass,
//! - a dual-number forward ([`Dual`]) giving exact Jacobian-vector products,
//! - the reverse pass itself ([`ToyModel::vjp64`]).

use std::ops::{Add, Div, Mul, Neg, Sub};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, BlockSpec, BlockedTensor, CoefficientSet, TaskVector};
use crate::compose::Composer;
use crate::error::{Error, Result};
use crate::seeds;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub in_dim: usize,
    pub emb_dim: usize,
    pub num_classes: usize,
    pub logit_scale: f64,
    pub ln_eps: f64,
    /// Seed of the frozen class embeddings.
    pub embedding_seed: u64,
}

impl ModelConfig {
    pub fn new(in_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            depth: 3,
            width: 64,
            in_dim,
            emb_dim: 16,
            num_classes,
            logit_scale: 10.0,
            ln_eps: 1e-5,
            embedding_seed: 0,
        }
    }
}

/// Inputs are `rows × in_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub in_dim: usize,
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(in_dim: usize, inputs: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if in_dim == 0 || inputs.len() != in_dim * labels.len() {
            return Err(Error::config(format!(
                "batch of {} labels needs {} inputs, got {}",
                labels.len(),
                in_dim * labels.len(),
                inputs.len()
            )));
        }
        Ok(Batch { in_dim, inputs, labels })
    }

    pub fn empty(in_dim: usize) -> Self {
        Batch { in_dim, inputs: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(idx.len() * self.in_dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch { in_dim: self.in_dim, inputs, labels }
    }

    pub fn concat(parts: &[&Batch]) -> Batch {
        let in_dim = parts.first().map_or(0, |b| b.in_dim);
        let mut out = Batch::empty(in_dim);
        for p in parts {
            assert_eq!(p.in_dim, in_dim, "batch input widths differ");
            out.inputs.extend_from_slice(&p.inputs);
            out.labels.extend_from_slice(&p.labels);
        }
        out
    }

    pub fn check_labels(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= num_classes) {
            Some(l) => Err(Error::config(format!("label {l} outside [0, {num_classes})"))),
            None => Ok(()),
        }
    }
}

/// Row-major `rows × cols` matrix of 64-bit logits (or logit derivatives).
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Logits { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Arg-max per row; exact ties resolve to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.rows).map(|i| argmax(self.row(i))).collect()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Scalar type of a forward pass: plain `f64` or a [`Dual`] number.
pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// First-order dual number `v + d·ε`, `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: f64,
}

impl Dual {
    pub fn new(v: f64, d: f64) -> Self {
        Dual { v, d }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.v + o.v, self.d + o.d)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.v - o.v, self.d - o.d)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.v * o.v, self.d * o.v + self.v * o.d)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual::new(self.v / o.v, (self.d * o.v - self.v * o.d) / (o.v * o.v))
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.d)
    }
}

impl Scalar for Dual {
    fn cst(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual::new(s, self.d / (2.0 * s))
    }
    fn tanh(self) -> Self {
        let t = self.v.tanh();
        Dual::new(t, self.d * (1.0 - t * t))
    }
}

fn gelu<T: Scalar>(u: T) -> T {
    let inner = T::cst(GELU_K) * (u + T::cst(GELU_C) * u * u * u);
    T::cst(0.5) * u * (T::cst(1.0) + inner.tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_K * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * u * u)
}

/// Loss applied to the logits of a batch. All built-in losses are batch means.
#[derive(Debug, Clone, Copy)]
pub enum Loss<'a> {
    CrossEntropy,
    NegatedCrossEntropy,
    /// Mean Shannon entropy of the softmax predictions (labels ignored).
    Entropy,
    /// Caller-supplied `∂L/∂logits` (`rows × C`). The gradient is the plain
    /// sum over rows; the returned loss value is 0.
    Cotangent(&'a [f64]),
}

impl Loss<'_> {
    /// Loss value and `∂L/∂logits` for a batch of logits.
    pub fn evaluate(&self, logits: &Logits, labels: &[usize]) -> (f64, Logits) {
        let n = logits.rows as f64;
        let mut cot = Logits::zeros(logits.rows, logits.cols);
        let mut total = 0.0;
        match self {
            Loss::CrossEntropy | Loss::NegatedCrossEntropy => {
                let sign = if matches!(self, Loss::CrossEntropy) { 1.0 } else { -1.0 };
                for i in 0..logits.rows {
                    let lp = log_softmax(logits.row(i));
                    total -= lp[labels[i]];
                    for (c, g) in cot.row_mut(i).iter_mut().enumerate() {
                        let onehot = if c == labels[i] { 1.0 } else { 0.0 };
                        *g = sign * (lp[c].exp() - onehot) / n;
                    }
                }
                total *= sign;
            }
            Loss::Entropy => {
                for i in 0..logits.rows {
                    let lp = log_softmax(logits.row(i));
                    let h: f64 = -lp.iter().map(|&l| l.exp() * l).sum::<f64>();
                    total += h;
                    for (c, g) in cot.row_mut(i).iter_mut().enumerate() {
                        *g = -lp[c].exp() * (lp[c] + h) / n;
                    }
                }
            }
            Loss::Cotangent(c) => {
                cot.data.copy_from_slice(c);
                return (0.0, cot);
            }
        }
        (total / n, cot)
    }
}

struct LayerCache {
    input: Vec<f64>,
    normed: Vec<f64>,
    inv_std: f64,
    pre_gelu: Vec<f64>,
}

struct ExampleCache {
    layers: Vec<LayerCache>,
    hidden: Vec<f64>,
    z: Vec<f64>,
    emb_norm: f64,
}

/// Built-in differentiable encoder. The class embeddings are frozen and never
/// part of the parameter blocks.
#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ModelConfig,
    class_embeddings: Vec<f64>,
    specs: Vec<BlockSpec>,
    threads: usize,
}

impl ToyModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.depth == 0 || config.width == 0 || config.in_dim == 0 || config.emb_dim == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if config.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if !(config.logit_scale > 0.0) {
            return Err(Error::config("logit scale must be positive"));
        }
        let mut rng = seeds::stream(config.embedding_seed, "class-embeddings");
        let mut class_embeddings = Vec::with_capacity(config.num_classes * config.emb_dim);
        for _ in 0..config.num_classes {
            let row: Vec<f64> = (0..config.emb_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            class_embeddings.extend(row.iter().map(|v| v / norm));
        }
        let mut specs = Vec::new();
        let mut fan_in = config.in_dim;
        for l in 0..config.depth {
            specs.push(BlockSpec::new(format!("layers.{l}.weight"), vec![config.width, fan_in], BlockKind::WeightMatrix)?);
            specs.push(BlockSpec::new(format!("layers.{l}.bias"), vec![config.width], BlockKind::Bias)?);
            specs.push(BlockSpec::new(format!("layers.{l}.ln.gain"), vec![config.width], BlockKind::LnGain)?);
            specs.push(BlockSpec::new(format!("layers.{l}.ln.bias"), vec![config.width], BlockKind::LnBias)?);
            fan_in = config.width;
        }
        specs.push(BlockSpec::new("proj.weight", vec![config.emb_dim, config.width], BlockKind::WeightMatrix)?);
        specs.push(BlockSpec::new("proj.bias", vec![config.emb_dim], BlockKind::Bias)?);
        Ok(ToyModel { config, class_embeddings, specs, threads: 1 })
    }

    /// Evaluates batches on `threads` shards, reduced in shard order.
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[BlockSpec] {
        &self.specs
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn class_embeddings(&self) -> &[f64] {
        &self.class_embeddings
    }

    /// Random initialisation: `W ~ N(0, 1/fan_in)`, biases 0, LN gain 1.
    pub fn init(&self, seed: u64) -> BlockedTensor {
        let mut rng = seeds::stream(seed, "init");
        let data = self
            .specs
            .iter()
            .map(|s| match s.kind {
                BlockKind::WeightMatrix => {
                    let std = 1.0 / (s.shape[1] as f64).sqrt();
                    (0..s.len()).map(|_| (std * rng.sample::<f64, _>(StandardNormal)) as f32).collect()
                }
                BlockKind::LnGain => vec![1.0; s.len()],
                _ => vec![0.0; s.len()],
            })
            .collect();
        BlockedTensor::new(self.specs.clone(), data).expect("specs are valid by construction")
    }

    fn check_theta(&self, theta: &BlockedTensor) -> Result<()> {
        theta.check_same_specs(&self.specs)
    }

    fn check_params(&self, params: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(Error::shape("<params>", format!("{} blocks, expected {}", params.len(), self.specs.len())));
        }
        for (p, s) in params.iter().zip(&self.specs) {
            if p.len() != s.len() {
                return Err(Error::shape(&s.name, format!("{} elements, expected {}", p.len(), s.len())));
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.in_dim != self.config.in_dim {
            return Err(Error::config(format!("batch width {} != model input {}", batch.in_dim, self.config.in_dim)));
        }
        batch.check_labels(self.config.num_classes)
    }

    fn forward_example(&self, p: &[Vec<f64>], x: &[f32], cache: Option<&mut ExampleCache>) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let mut h: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut layers = Vec::new();
        for l in 0..cfg.depth {
            let (w, b, gain, beta) = (&p[4 * l], &p[4 * l + 1], &p[4 * l + 2], &p[4 * l + 3]);
            let fan_in = h.len();
            let mut a = vec![0.0; cfg.width];
            for (r, out) in a.iter_mut().enumerate() {
                let row = &w[r * fan_in..(r + 1) * fan_in];
                *out = row.iter().zip(&h).map(|(wv, hv)| wv * hv).sum::<f64>() + b[r];
            }
            let mean = a.iter().sum::<f64>() / cfg.width as f64;
            let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cfg.width as f64;
            let inv_std = 1.0 / (var + cfg.ln_eps).sqrt();
            let normed: Vec<f64> = a.iter().map(|v| (v - mean) * inv_std).collect();
            let pre: Vec<f64> = normed.iter().zip(gain).zip(beta).map(|((n, g), bt)| g * n + bt).collect();
            let next: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite activation in layer {l}")));
            }
            if cache.is_some() {
                layers.push(LayerCache { input: h, normed, inv_std, pre_gelu: pre });
            }
            h = next;
        }
        let (wp, bp) = (&p[4 * cfg.depth], &p[4 * cfg.depth + 1]);
        let width = h.len();
        let e: Vec<f64> = (0..cfg.emb_dim)
            .map(|r| wp[r * width..(r + 1) * width].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + bp[r])
            .collect();
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Numeric("degenerate embedding at projection layer".into()));
        }
        let z: Vec<f64> = e.iter().map(|v| v / norm).collect();
        let logits = self.head(&z);
        if let Some(c) = cache {
            c.layers = layers;
            c.hidden = h;
            c.z = z;
            c.emb_norm = norm;
        }
        Ok(logits)
    }

    fn head<T: Scalar>(&self, z: &[T]) -> Vec<T> {
        let d = self.config.emb_dim;
        (0..self.config.num_classes)
            .map(|c| {
                let row = &self.class_embeddings[c * d..(c + 1) * d];
                let mut acc = T::cst(0.0);
                for (zk, &ek) in z.iter().zip(row) {
                    acc = acc + *zk * T::cst(ek);
                }
                T::cst(self.config.logit_scale) * acc
            })
            .collect()
    }

    fn latent_generic<T: Scalar>(&self, p: &[Vec<T>], x: &[f32]) -> Vec<T> {
        let cfg = &self.config;
        let mut h: Vec<T> = x.iter().map(|&v| T::cst(v as f64)).collect();
        for l in 0..cfg.depth {
            let (w, b, gain, beta) = (&p[4 * l], &p[4 * l + 1], &p[4 * l + 2], &p[4 * l + 3]);
            let fan_in = h.len();
            let a: Vec<T> = (0..cfg.width)
                .map(|r| {
                    let mut acc = T::cst(0.0);
                    for (wv, hv) in w[r * fan_in..(r + 1) * fan_in].iter().zip(&h) {
                        acc = acc + *wv * *hv;
                    }
                    acc + b[r]
                })
                .collect();
            let n = T::cst(cfg.width as f64);
            let mean = a.iter().fold(T::cst(0.0), |s, &v| s + v) / n;
            let var = a.iter().fold(T::cst(0.0), |s, &v| s + (v - mean) * (v - mean)) / n;
            let inv_std = T::cst(1.0) / (var + T::cst(cfg.ln_eps)).sqrt();
            h = a.iter().zip(gain).zip(beta).map(|((&v, &g), &bt)| gelu(g * ((v - mean) * inv_std) + bt)).collect();
        }
        let (wp, bp) = (&p[4 * cfg.depth], &p[4 * cfg.depth + 1]);
        let width = h.len();
        let e: Vec<T> = (0..cfg.emb_dim)
            .map(|r| {
                let mut acc = T::cst(0.0);
                for (wv, hv) in wp[r * width..(r + 1) * width].iter().zip(&h) {
                    acc = acc + *wv * *hv;
                }
                acc + bp[r]
            })
            .collect();
        let norm = e.iter().fold(T::cst(0.0), |s, &v| s + v * v).sqrt();
        e.into_iter().map(|v| v / norm).collect()
    }

    /// Splits `0..n` into contiguous shards and maps them, possibly on threads.
    fn sharded<R: Send>(&self, n: usize, f: impl Fn(std::ops::Range<usize>) -> R + Sync) -> Vec<R> {
        let shards = self.threads.min(n.max(1));
        let chunk = n.div_ceil(shards.max(1)).max(1);
        let ranges: Vec<_> = (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect();
        if shards <= 1 {
            return ranges.into_iter().map(f).collect();
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = ranges.into_iter().map(|r| scope.spawn(|| f(r))).collect();
            handles.into_iter().map(|h| h.join().expect("shard panicked")).collect()
        })
    }

    /// Logits of every row (64-bit, from 64-bit parameters).
    pub fn forward64(&self, params: &[Vec<f64>], batch: &Batch) -> Result<Logits> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let c = self.config.num_classes;
        let parts = self.sharded(batch.len(), |range| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(range.len() * c);
            for i in range {
                out.extend(self.forward_example(params, batch.row(i), None)?);
            }
            Ok(out)
        });
        let mut data = Vec::with_capacity(batch.len() * c);
        for p in parts {
            data.extend(p?);
        }
        Ok(Logits { rows: batch.len(), cols: c, data })
    }

    /// Logits for 32-bit weights, evaluated with 64-bit accumulation.
    pub fn forward(&self, theta: &BlockedTensor, batch: &Batch) -> Result<Logits> {
        self.check_theta(theta)?;
        self.forward64(&theta.to_f64(), batch)
    }

    /// L2-normalised embeddings `z` (pre-logit), one row per example.
    pub fn latents(&self, theta: &BlockedTensor, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        self.check_theta(theta)?;
        self.check_batch(batch)?;
        let p = theta.to_f64();
        let z: Vec<Vec<f64>> = (0..batch.len()).map(|i| self.latent_generic::<f64>(&p, batch.row(i))).collect();
        if z.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite latent".into()));
        }
        Ok(z)
    }

    /// `Σ_rows Jᵀ cotangent`: reverse pass from a logit cotangent to weights.
    pub fn vjp64(&self, params: &[Vec<f64>], batch: &Batch, cotangent: &Logits) -> Result<Vec<Vec<f64>>> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        if cotangent.rows != batch.len() || cotangent.cols != self.config.num_classes {
            return Err(Error::config("cotangent shape does not match the batch"));
        }
        let parts = self.sharded(batch.len(), |range| -> Result<Vec<Vec<f64>>> {
            let mut grad: Vec<Vec<f64>> = self.specs.iter().map(|s| vec![0.0; s.len()]).collect();
            for i in range {
                self.backward_example(params, batch.row(i), cotangent.row(i), &mut grad)?;
            }
            Ok(grad)
        });
        let mut total: Vec<Vec<f64>> = self.specs.iter().map(|s| vec![0.0; s.len()]).collect();
        for part in parts {
            for (t, g) in total.iter_mut().zip(part?) {
                for (a, b) in t.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(total)
    }

    fn backward_example(&self, p: &[Vec<f64>], x: &[f32], dlogits: &[f64], grad: &mut [Vec<f64>]) -> Result<()> {
        let cfg = &self.config;
        if dlogits.iter().all(|&g| g == 0.0) {
            return Ok(());
        }
        let mut cache = ExampleCache { layers: Vec::new(), hidden: Vec::new(), z: Vec::new(), emb_norm: 0.0 };
        self.forward_example(p, x, Some(&mut cache))?;
        let d = cfg.emb_dim;
        let mut dz = vec![0.0; d];
        for (c, &g) in dlogits.iter().enumerate() {
            let row = &self.class_embeddings[c * d..(c + 1) * d];
            for (dzk, &ek) in dz.iter_mut().zip(row) {
                *dzk += cfg.logit_scale * g * ek;
            }
        }
        let zdz: f64 = cache.z.iter().zip(&dz).map(|(a, b)| a * b).sum();
        let de: Vec<f64> = dz.iter().zip(&cache.z).map(|(g, z)| (g - z * zdz) / cache.emb_norm).collect();

        let width = cache.hidden.len();
        let (wi, bi) = (4 * cfg.depth, 4 * cfg.depth + 1);
        let mut dh = vec![0.0; width];
        for (r, &g) in de.iter().enumerate() {
            grad[bi][r] += g;
            let wrow = &p[wi][r * width..(r + 1) * width];
            let grow = &mut grad[wi][r * width..(r + 1) * width];
            for ((gw, &h), (dhk, &w)) in grow.iter_mut().zip(&cache.hidden).zip(dh.iter_mut().zip(wrow)) {
                *gw += g * h;
                *dhk += g * w;
            }
        }

        for l in (0..cfg.depth).rev() {
            let lc = &cache.layers[l];
            let n = cfg.width as f64;
            let du: Vec<f64> = dh.iter().zip(&lc.pre_gelu).map(|(g, &u)| g * gelu_grad(u)).collect();
            let mut dn = vec![0.0; cfg.width];
            for r in 0..cfg.width {
                grad[4 * l + 2][r] += du[r] * lc.normed[r];
                grad[4 * l + 3][r] += du[r];
                dn[r] = du[r] * p[4 * l + 2][r];
            }
            let mean_dn = dn.iter().sum::<f64>() / n;
            let mean_dn_n = dn.iter().zip(&lc.normed).map(|(a, b)| a * b).sum::<f64>() / n;
            let da: Vec<f64> =
                dn.iter().zip(&lc.normed).map(|(g, nv)| lc.inv_std * (g - mean_dn - nv * mean_dn_n)).collect();
            let fan_in = lc.input.len();
            let mut dprev = vec![0.0; fan_in];
            for (r, &g) in da.iter().enumerate() {
                grad[4 * l + 1][r] += g;
                if g == 0.0 {
                    continue;
                }
                let wrow = &p[4 * l][r * fan_in..(r + 1) * fan_in];
                let grow = &mut grad[4 * l][r * fan_in..(r + 1) * fan_in];
                for ((gw, &h), (dp, &w)) in grow.iter_mut().zip(&lc.input).zip(dprev.iter_mut().zip(wrow)) {
                    *gw += g * h;
                    *dp += g * w;
                }
            }
            dh = dprev;
        }
        Ok(())
    }

    /// Loss and weight gradient at 64-bit parameters.
    pub fn backward64(&self, params: &[Vec<f64>], batch: &Batch, loss: Loss<'_>) -> Result<(f64, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        if let Loss::Cotangent(c) = loss {
            if c.len() != batch.len() * self.config.num_classes {
                return Err(Error::config("cotangent shape does not match the batch"));
            }
        }
        let logits = self.forward64(params, batch)?;
        let (value, cot) = loss.evaluate(&logits, &batch.labels);
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let grad = self.vjp64(params, batch, &cot)?;
        Ok((value, grad))
    }

    /// Loss and weight gradient (the gradient keeps the model's block list).
    pub fn backward(&self, theta: &BlockedTensor, batch: &Batch, loss: Loss<'_>) -> Result<(f64, BlockedTensor)> {
        self.check_theta(theta)?;
        let (value, grad) = self.backward64(&theta.to_f64(), batch, loss)?;
        Ok((value, BlockedTensor::from_f64(&self.specs, &grad)?))
    }

    /// Primal logits and their directional derivative along `direction`.
    pub fn jvp64(&self, params: &[Vec<f64>], direction: &[Vec<f64>], batch: &Batch) -> Result<(Logits, Logits)> {
        self.check_params(params)?;
        self.check_params(direction)?;
        self.check_batch(batch)?;
        let duals: Vec<Vec<Dual>> = params
            .iter()
            .zip(direction)
            .map(|(p, d)| p.iter().zip(d).map(|(&v, &t)| Dual::new(v, t)).collect())
            .collect();
        let c = self.config.num_classes;
        let parts = self.sharded(batch.len(), |range| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut primal = Vec::with_capacity(range.len() * c);
            let mut tangent = Vec::with_capacity(range.len() * c);
            for i in range {
                let z = self.latent_generic::<Dual>(&duals, batch.row(i));
                for out in self.head(&z) {
                    if !out.v.is_finite() || !out.d.is_finite() {
                        return Err(Error::Numeric(format!("non-finite tangent output for row {i}")));
                    }
                    primal.push(out.v);
                    tangent.push(out.d);
                }
            }
            Ok((primal, tangent))
        });
        let mut primal = Logits::zeros(batch.len(), c);
        let mut tangent = Logits::zeros(batch.len(), c);
        primal.data.clear();
        tangent.data.clear();
        for part in parts {
            let (p, t) = part?;
            primal.data.extend(p);
            tangent.data.extend(t);
        }
        Ok((primal, tangent))
    }

    /// Forward-mode derivative of the logits along `direction` at `theta0`.
    pub fn jvp(&self, theta0: &BlockedTensor, direction: &BlockedTensor, batch: &Batch) -> Result<Logits> {
        self.check_theta(theta0)?;
        self.check_theta(direction)?;
        Ok(self.jvp64(&theta0.to_f64(), &direction.to_f64(), batch)?.1)
    }

    /// Tangent-model logits `f(x; θ₀) + J(θ₀)·Δ` for a 64-bit offset `Δ`.
    pub fn linearized64(&self, params0: &[Vec<f64>], delta: &[Vec<f64>], batch: &Batch) -> Result<Logits> {
        let mut out = self.forward64(params0, batch)?;
        let (_, tangent) = self.jvp64(params0, delta, batch)?;
        for (o, t) in out.data.iter_mut().zip(&tangent.data) {
            *o += t;
        }
        Ok(out)
    }

    /// Logits of the linearised model `g(x) = f(x; θ₀) + (Σ Λᵢτᵢ)ᵀ ∇f(x; θ₀)`.
    pub fn linearized_forward(
        &self,
        theta0: &BlockedTensor,
        coeffs: &CoefficientSet,
        tvs: &[TaskVector],
        batch: &Batch,
    ) -> Result<Logits> {
        self.check_theta(theta0)?;
        if coeffs.partitions != 1 {
            return Err(Error::config("linearized_forward takes K=1 coefficients"));
        }
        crate::blocks::check_coefficients(theta0, coeffs, tvs)?;
        let composer = Composer::new(theta0, tvs)?;
        let delta = composer.delta64(&coeffs.to_f64());
        self.linearized64(composer.base64(), &delta, batch)
    }
}
