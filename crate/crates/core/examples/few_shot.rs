//! 16-shot adaptation to an unseen task using the other task vectors.

use tvkit::data::kshot;
use tvkit::evalx::accuracy;
use tvkit::learn::{learn_fewshot, TrainConfig};
use tvkit::suite::transfer_world;
use tvkit::Result;

fn main() -> Result<()> {
    let w = transfer_world(0)?;
    let cfg = TrainConfig { epochs: 20, batch_size: 32, ..TrainConfig::default() };
    for i in 0..4 {
        let task = &w.tasks[i];
        let others = w.tvs_without(i);
        let shots = kshot(task, 16, 0)?.batch(task);
        let rep = learn_fewshot(&w.model, &w.theta0, &others, &shots, &w.tvs[i].id, &cfg)?;
        let zero = accuracy(&w.model, &w.theta0, &task.test)?;
        let adapted = accuracy(&w.model, &rep.compose(&w.theta0, &others)?, &task.test)?;
        println!("{}: zero-shot {zero:.2}, 16-shot {adapted:.2}, fine-tuned {:.2}", w.tvs[i].id, w.finetuned_acc[i]);
    }
    Ok(())
}
