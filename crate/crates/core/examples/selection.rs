//! Pick which task vectors to train under a budget, per block or as a whole.

use tvkit::data::kshot;
use tvkit::evalx::accuracy;
use tvkit::learn::{Learner, TrainConfig};
use tvkit::select::{select_by_features, select_by_gradient, select_random, GradientMode};
use tvkit::suite::transfer_world;
use tvkit::Result;

fn main() -> Result<()> {
    let w = transfer_world(1)?;
    let i = 0;
    let task = &w.tasks[i];
    let others = w.tvs_without(i);
    let shots = kshot(task, 16, 0)?.batch(task);
    let cfg = TrainConfig { epochs: 20, batch_size: 32, ..TrainConfig::default() };

    println!("random: {:?}", select_random(&others, 2, 7)?.selected_ids());
    let named: Vec<(&str, &tvkit::Batch)> = w.tasks.iter().zip(&w.tvs).skip(1).map(|(t, tv)| (tv.id.as_str(), &t.train)).collect();
    println!("features: {:?}", select_by_features(&w.model, &w.theta0, &named, &shots, 2)?.selected_ids());

    for mode in [GradientMode::Whole, GradientMode::Blockwise] {
        let plan = select_by_gradient(&w.model, &w.theta0, &others, &shots, 1, 1, mode)?;
        let mask = plan.trainable_mask(&others, &w.theta0.block_names(), 1)?;
        let rep = Learner::new(&w.model, &w.theta0, &others, &cfg).trainable(mask).fit(std::slice::from_ref(&shots))?;
        let acc = accuracy(&w.model, &rep.compose(&w.theta0, &others)?, &task.test)?;
        println!("{mode:?} gradient selection, budget 1: {:?} -> accuracy {acc:.2}", plan.selected_ids());
    }
    Ok(())
}
