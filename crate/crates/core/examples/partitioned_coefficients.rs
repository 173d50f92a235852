//! Split every block into K random partitions, each with its own coefficient.

use tvkit::learn::{Learner, TrainConfig};
use tvkit::partition::{make_partitions, parameter_count};
use tvkit::suite::arithmetic_world;
use tvkit::Result;

fn main() -> Result<()> {
    let w = arithmetic_world(0)?;
    let masks = make_partitions(w.theta0.specs(), 4, 11)?;
    println!("partition sizes of block 0: {:?}", masks.sizes(0));
    for k in [1usize, 2, 4] {
        let cfg = TrainConfig { epochs: 20, batch_size: 64, partitions: k, ..TrainConfig::default() };
        let rep = Learner::new(&w.model, &w.theta0, &w.tvs, &cfg).fit(&w.val_sets())?;
        let theta = rep.compose(&w.theta0, &w.tvs)?;
        println!(
            "K={k}: {} coefficients, mean test accuracy {:.2}",
            parameter_count(w.tvs.len(), w.theta0.num_blocks(), k),
            w.mean_test_accuracy(&theta)?
        );
    }
    Ok(())
}
