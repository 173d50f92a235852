//! Choosing which task vectors (or which of their blocks) to learn
//! coefficients for under a budget `b`.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockedTensor, TaskVector};
use crate::compose::Composer;
use crate::error::{Error, Result};
use crate::net::{Batch, Loss, ToyModel};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    Features,
    GradientWhole,
    GradientBlockwise,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "features" => Ok(Strategy::Features),
            "gradient-whole" | "gradient" => Ok(Strategy::GradientWhole),
            "gradient-blockwise" | "blockwise" => Ok(Strategy::GradientBlockwise),
            _ => Err(Error::config(format!("unknown selection strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    Whole,
    Blockwise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Whole(Vec<String>),
    /// Block name → ids supplying that block.
    Blockwise(BTreeMap<String, Vec<String>>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub strategy: Strategy,
    pub budget: usize,
    #[serde(flatten)]
    pub choice: Choice,
}

impl SelectionPlan {
    /// Every id referenced by the plan, sorted and deduplicated.
    pub fn selected_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = match &self.choice {
            Choice::Whole(ids) => ids.clone(),
            Choice::Blockwise(map) => map.values().flatten().cloned().collect(),
        };
        ids.sort();
        ids.dedup();
        ids
    }

    /// Whether coefficient `(tv, block)` is learned under this plan.
    pub fn allows(&self, tv_id: &str, block: &str) -> bool {
        match &self.choice {
            Choice::Whole(ids) => ids.iter().any(|i| i == tv_id),
            Choice::Blockwise(map) => map.get(block).is_some_and(|ids| ids.iter().any(|i| i == tv_id)),
        }
    }

    /// Trainable flags in coefficient layout `(i·m + j)·K + p`.
    pub fn trainable_mask(&self, tvs: &[TaskVector], block_names: &[String], k: usize) -> Result<Vec<bool>> {
        for id in self.selected_ids() {
            if !tvs.iter().any(|t| t.id == id) {
                return Err(Error::config(format!("plan references unknown task vector `{id}`")));
            }
        }
        if let Choice::Blockwise(map) = &self.choice {
            if let Some(name) = map.keys().find(|n| !block_names.contains(n)) {
                return Err(Error::UnknownBlock(name.clone()));
            }
        }
        let mut mask = Vec::with_capacity(tvs.len() * block_names.len() * k);
        for tv in tvs {
            for name in block_names {
                let on = self.allows(&tv.id, name);
                mask.extend(std::iter::repeat_n(on, k));
            }
        }
        Ok(mask)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan is serialisable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Uniform choice of `min(b, n)` task vectors without replacement.
pub fn select_random(tvs: &[TaskVector], b: usize, seed: u64) -> Result<SelectionPlan> {
    if b == 0 {
        return Err(Error::config("budget must be at least 1"));
    }
    let n = tvs.len();
    let mut picked = index::sample(&mut seeds::stream(seed, "select"), n, b.min(n)).into_vec();
    picked.sort_unstable();
    Ok(SelectionPlan {
        strategy: Strategy::Random,
        budget: b,
        choice: Choice::Whole(picked.into_iter().map(|i| tvs[i].id.clone()).collect()),
    })
}

/// Mean pre-logit embedding of `data` under `theta`.
pub fn mean_feature(model: &ToyModel, theta: &BlockedTensor, data: &Batch) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::config("mean feature of an empty dataset"));
    }
    let z = model.latents(theta, data)?;
    let mut mean = vec![0.0; model.config().emb_dim];
    for row in &z {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= z.len() as f64;
    }
    Ok(mean)
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Picks the `b` candidates whose mean feature under `theta0` is most
/// cosine-similar to the target's. Ties (including zero-norm means, scored
/// 0) keep candidate order.
pub fn select_by_features(
    model: &ToyModel,
    theta0: &BlockedTensor,
    candidates: &[(&str, &Batch)],
    target: &Batch,
    b: usize,
) -> Result<SelectionPlan> {
    if b == 0 {
        return Err(Error::config("budget must be at least 1"));
    }
    let t = mean_feature(model, theta0, target)?;
    let mut scored = Vec::with_capacity(candidates.len());
    for (i, (id, data)) in candidates.iter().enumerate() {
        scored.push((cosine(&mean_feature(model, theta0, data)?, &t), i, id.to_string()));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(SelectionPlan {
        strategy: Strategy::Features,
        budget: b,
        choice: Choice::Whole(scored.into_iter().take(b).map(|s| s.2).collect()),
    })
}

/// Probe gradient `∂L/∂λᵢ⁽ʲ⁾` at `λ = 0` for every task vector, returned in
/// the order of `tvs`, evaluated group by group.
pub fn probe_gradients(
    model: &ToyModel,
    theta0: &BlockedTensor,
    tvs: &[TaskVector],
    target: &Batch,
    group_size: usize,
) -> Result<Vec<Vec<f64>>> {
    if target.is_empty() {
        return Err(Error::config("gradient selection needs target data"));
    }
    if group_size == 0 {
        return Err(Error::config("group size must be at least 1"));
    }
    let (_, weight_grad) = model.backward64(&theta0.to_f64(), target, Loss::CrossEntropy)?;
    let m = theta0.num_blocks();
    let mut out = Vec::with_capacity(tvs.len());
    for group in tvs.chunks(group_size) {
        let g = Composer::new(theta0, group)?.coefficient_grad(&weight_grad)?;
        out.extend(g.chunks(m).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Gradient-based selection. `whole` ranks task vectors by the L1 norm of
/// their blockwise probe gradients; `blockwise` ranks, per block, by the
/// magnitude of that block's entry. Candidates are taken in id order and ties
/// go to the smaller id.
pub fn select_by_gradient(
    model: &ToyModel,
    theta0: &BlockedTensor,
    tvs: &[TaskVector],
    target: &Batch,
    b: usize,
    group_size: usize,
    mode: GradientMode,
) -> Result<SelectionPlan> {
    if b == 0 {
        return Err(Error::config("budget must be at least 1"));
    }
    let mut order: Vec<usize> = (0..tvs.len()).collect();
    order.sort_by(|&a, &c| tvs[a].id.cmp(&tvs[c].id));
    let sorted: Vec<TaskVector> = order.iter().map(|&i| tvs[i].clone()).collect();
    let grads = probe_gradients(model, theta0, &sorted, target, group_size)?;
    let take = b.min(sorted.len());
    let top = |score: &dyn Fn(usize) -> f64| -> Vec<String> {
        let mut idx: Vec<usize> = (0..sorted.len()).collect();
        idx.sort_by(|&a, &c| score(c).total_cmp(&score(a)).then(a.cmp(&c)));
        idx.into_iter().take(take).map(|i| sorted[i].id.clone()).collect()
    };
    let (strategy, choice) = match mode {
        GradientMode::Whole => {
            (Strategy::GradientWhole, Choice::Whole(top(&|i| grads[i].iter().map(|g| g.abs()).sum())))
        }
        GradientMode::Blockwise => {
            let map = theta0
                .block_names()
                .into_iter()
                .enumerate()
                .map(|(j, name)| (name, top(&|i| grads[i][j].abs())))
                .collect();
            (Strategy::GradientBlockwise, Choice::Blockwise(map))
        }
    };
    Ok(SelectionPlan { strategy, budget: b, choice })
}
