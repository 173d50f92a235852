//! Train in a d-dimensional subspace spanned by random directions or by
//! selected task-vector blocks.

use tvkit::intrinsic::{make_random_basis, make_tv_basis, run_subspace_experiment};
use tvkit::learn::TrainConfig;
use tvkit::select::{select_by_gradient, GradientMode};
use tvkit::suite::transfer_world;
use tvkit::Result;

fn main() -> Result<()> {
    let w = transfer_world(0)?;
    let cfg = TrainConfig { epochs: 20, batch_size: 32, ..TrainConfig::default() };
    let i = 2;
    let (train, test) = (&w.tasks[i].train, &w.tasks[i].test);
    let others = w.tvs_without(i);
    println!("d,random,task_vectors");
    for d in [0usize, 1, 2, 4, 8] {
        let random = run_subspace_experiment(&w.model, &w.theta0, &make_random_basis(&w.theta0, d, 0), train, test, w.finetuned_acc[i], &cfg)?;
        let plan = select_by_gradient(&w.model, &w.theta0, &others, train, d.max(1), d.max(1), GradientMode::Blockwise)?;
        let tv = if d == 0 {
            random.rel_acc
        } else {
            run_subspace_experiment(&w.model, &w.theta0, &make_tv_basis(&others, d, &plan)?, train, test, w.finetuned_acc[i], &cfg)?.rel_acc
        };
        println!("{d},{:.2},{tv:.2}", random.rel_acc);
    }
    Ok(())
}
