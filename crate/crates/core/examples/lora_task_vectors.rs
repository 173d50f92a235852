//! Low-rank fine-tuning produces factored task vectors that compose like
//! dense ones.

use tvkit::evalx::accuracy;
use tvkit::learn::{learn_addition, TrainConfig};
use tvkit::lora::{finetune_lora, LoraConfig};
use tvkit::suite::arithmetic_world;
use tvkit::{Result, TaskVector};

fn main() -> Result<()> {
    let w = arithmetic_world(0)?;
    let cfg = LoraConfig { rank: 4, epochs: 20, ..LoraConfig::default() };
    let loras: Vec<TaskVector> = w
        .tasks
        .iter()
        .zip(&w.specs)
        .take(4)
        .map(|(t, s)| finetune_lora(&w.model, &w.theta0, &t.train, s.id.clone(), &cfg))
        .collect::<Result<_>>()?;
    for (tv, task) in loras.iter().zip(&w.tasks) {
        let theta = tvkit::apply_isotropic(&w.theta0, 1.0, std::slice::from_ref(tv))?;
        println!("{}: factored={} accuracy {:.2}", tv.id, tv.is_factored(), accuracy(&w.model, &theta, &task.test)?);
    }
    let sets: Vec<_> = w.tasks.iter().take(4).map(|t| t.val.clone()).collect();
    let rep = learn_addition(&w.model, &w.theta0, &loras, &sets, &TrainConfig { epochs: 20, ..TrainConfig::default() })?;
    let merged = rep.compose(&w.theta0, &loras)?;
    let mean: f64 = w.tasks.iter().take(4).map(|t| accuracy(&w.model, &merged, &t.test)).sum::<Result<f64>>()? / 4.0;
    println!("merged LoRA task vectors: mean accuracy {mean:.2}");
    Ok(())
}
