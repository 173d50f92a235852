//! Seeded synthetic classification tasks, k-shot sampling and IDX ingestion.
//!
//! Every task draws Gaussian clusters around a shared set of class anchors.
//! A task transforms the anchors by a rotation in a random 2-D plane followed
//! by a mean shift, so tasks built from the same anchors are related but
//! distinct. Each split uses its own seed stream.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Batch;
use crate::seeds;
use crate::tvck::{self, BlockEntry, Container, Header, TvckObject};

/// Recipe for one synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub in_dim: usize,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Rotation angle (radians) applied to the anchors in a random plane.
    pub rotation: f64,
    /// Length of the mean-shift vector; its direction comes from `seed`.
    pub shift: f64,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    /// Extra shift along an independent direction, for shifted variants.
    #[serde(default)]
    pub domain_shift: f64,
    /// Seed of the anchor set shared by related tasks.
    pub anchor_seed: u64,
    /// Seed of the rotation plane; tasks sharing it rotate within one plane.
    /// Defaults to a plane drawn from `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane_seed: Option<u64>,
    /// Standard deviation of the anchor coordinates.
    pub anchor_scale: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!("task `{}` needs at least 2 classes", self.id)));
        }
        if self.in_dim < 2 {
            return Err(Error::config(format!("task `{}` needs in_dim >= 2", self.id)));
        }
        if !(self.noise > 0.0) {
            return Err(Error::config(format!("task `{}`: noise must be positive, got {}", self.id, self.noise)));
        }
        if !(self.anchor_scale > 0.0) {
            return Err(Error::config(format!("task `{}`: anchor_scale must be positive", self.id)));
        }
        Ok(())
    }

    /// Same task with an additional domain shift (used for test-time adaptation).
    pub fn shifted(&self, amount: f64) -> TaskSpec {
        TaskSpec { id: format!("{}-shifted", self.id), domain_shift: self.domain_shift + amount, ..self.clone() }
    }

    /// Untransformed anchors of this task's anchor set.
    pub fn anchors(&self) -> Vec<Vec<f64>> {
        let mut rng = seeds::stream(self.anchor_seed, "anchors");
        (0..self.num_classes)
            .map(|_| (0..self.in_dim).map(|_| self.anchor_scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    }

    /// Transformed class centres.
    pub fn centres(&self) -> Vec<Vec<f64>> {
        let mut rng = seeds::stream(self.seed, "task-geometry");
        let mut plane_rng = match self.plane_seed {
            Some(p) => seeds::stream(p, "task-plane"),
            None => rng.clone(),
        };
        let u = random_unit(&mut plane_rng, self.in_dim, &[]);
        let v = random_unit(&mut plane_rng, self.in_dim, &[&u]);
        if self.plane_seed.is_none() {
            rng = plane_rng;
        }
        let shift_dir = random_unit(&mut rng, self.in_dim, &[]);
        let domain_dir = random_unit(&mut rng, self.in_dim, &[]);
        let (s, c) = self.rotation.sin_cos();
        self.anchors()
            .into_iter()
            .map(|a| {
                let pu = dot(&a, &u);
                let pv = dot(&a, &v);
                (0..self.in_dim)
                    .map(|k| {
                        a[k] + (c - 1.0) * (pu * u[k] + pv * v[k]) + s * (pu * v[k] - pv * u[k])
                            + self.shift * shift_dir[k]
                            + self.domain_shift * domain_dir[k]
                    })
                    .collect()
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize, orth: &[&Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for o in orth {
            let p = dot(&v, o);
            for (x, y) in v.iter_mut().zip(o.iter()) {
                *x -= p * y;
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task_id: String,
    pub num_classes: usize,
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
}

impl Dataset {
    pub fn in_dim(&self) -> usize {
        self.train.in_dim
    }
}

fn draw_split(spec: &TaskSpec, centres: &[Vec<f64>], per_class: usize, stream: &str) -> Batch {
    let mut rng = seeds::stream(spec.seed, stream);
    let mut inputs = Vec::with_capacity(per_class * spec.num_classes * spec.in_dim);
    let mut labels = Vec::with_capacity(per_class * spec.num_classes);
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..per_class {
            inputs.extend(centre.iter().map(|&m| (m + spec.noise * rng.sample::<f64, _>(StandardNormal)) as f32));
            labels.push(c);
        }
    }
    Batch { in_dim: spec.in_dim, inputs, labels }
}

/// Draws all three splits.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let centres = spec.centres();
    Ok(Dataset {
        task_id: spec.id.clone(),
        num_classes: spec.num_classes,
        train: draw_split(spec, &centres, spec.train_per_class, "split/train"),
        val: draw_split(spec, &centres, spec.val_per_class, "split/val"),
        test: draw_split(spec, &centres, spec.test_per_class, "split/test"),
    })
}

/// Indices (into the train split) of `k` examples per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KShotSample {
    pub k: usize,
    pub seed: u64,
    pub per_class: Vec<Vec<usize>>,
}

impl KShotSample {
    pub fn indices(&self) -> Vec<usize> {
        self.per_class.iter().flatten().copied().collect()
    }

    pub fn batch(&self, data: &Dataset) -> Batch {
        data.train.select(&self.indices())
    }
}

/// Uniform sample without replacement of `k` train examples per class.
pub fn kshot(data: &Dataset, k: usize, seed: u64) -> Result<KShotSample> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let mut by_class = vec![Vec::new(); data.num_classes];
    for (i, &l) in data.train.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = seeds::stream(seed, "kshot");
    let mut per_class = Vec::with_capacity(data.num_classes);
    for (c, pool) in by_class.iter().enumerate() {
        if pool.len() < k {
            return Err(Error::config(format!("class {c} has {} train examples, need {k}", pool.len())));
        }
        let mut pick: Vec<usize> = pool.choose_multiple(&mut rng, k).copied().collect();
        pick.sort_unstable();
        per_class.push(pick);
    }
    Ok(KShotSample { k, seed, per_class })
}

/// Shuffled mini-batches of `0..n`; the last batch may be short.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(bytes.len() as u64, format!("truncated IDX header (need byte {})", at + 4)))
}

/// Parses an IDX image file into `(count, pixels_per_image, values in [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(0, format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(Error::format(bytes.len() as u64, format!("truncated image payload: {} of {need} bytes", bytes.len())));
    }
    let pixels = bytes[16..need].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((n, rows * cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::format(0, format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::format(bytes.len() as u64, format!("truncated label payload: {} of {} bytes", bytes.len(), 8 + n)));
    }
    Ok(bytes[8..8 + n].iter().map(|&b| b as usize).collect())
}

/// Reads an IDX image/label pair into the train split of a dataset.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (n, dim, pixels) = parse_idx_images(&std::fs::read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path.as_ref())?)?;
    if labels.len() != n {
        return Err(Error::config(format!("{n} images but {} labels", labels.len())));
    }
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let task_id = images_path.as_ref().file_stem().and_then(|s| s.to_str()).unwrap_or("idx").to_string();
    Ok(Dataset {
        task_id,
        num_classes,
        train: Batch { in_dim: dim, inputs: pixels, labels },
        val: Batch::empty(dim),
        test: Batch::empty(dim),
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    task_id: String,
    num_classes: usize,
    in_dim: usize,
}

impl TvckObject for Dataset {
    const KIND: &'static str = "dataset";

    fn to_container(&self) -> Result<Container> {
        let mut payload = Vec::new();
        let mut blocks: Vec<BlockEntry> = Vec::new();
        for (name, split) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if split.is_empty() {
                continue;
            }
            let labels: Vec<f32> = split.labels.iter().map(|&l| l as f32).collect();
            blocks.push(tvck::push_block(&mut payload, &format!("{name}.inputs"), vec![split.len(), split.in_dim], "data", &split.inputs));
            blocks.push(tvck::push_block(&mut payload, &format!("{name}.labels"), vec![split.len()], "labels", &labels));
        }
        let meta = serde_json::to_value(DatasetMeta {
            task_id: self.task_id.clone(),
            num_classes: self.num_classes,
            in_dim: self.in_dim(),
        })?;
        Ok(Container {
            header: Header { kind: Self::KIND.into(), base_fingerprint: tvck::fingerprint_hex(0), blocks, factored: None, meta },
            payload,
        })
    }

    fn from_container(c: Container) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_value(c.header.meta.clone())?;
        let split = |name: &str| -> Result<Batch> {
            let find = |suffix: &str| c.header.blocks.iter().find(|b| b.name == format!("{name}.{suffix}"));
            match (find("inputs"), find("labels")) {
                (Some(x), Some(y)) => {
                    let labels = c.slice(y.offset_elems, y.len_elems).iter().map(|&v| v as usize).collect();
                    Batch::new(meta.in_dim, c.slice(x.offset_elems, x.len_elems).to_vec(), labels)
                }
                _ => Ok(Batch::empty(meta.in_dim)),
            }
        };
        Ok(Dataset {
            task_id: meta.task_id.clone(),
            num_classes: meta.num_classes,
            train: split("train")?,
            val: split("val")?,
            test: split("test")?,
        })
    }
}
