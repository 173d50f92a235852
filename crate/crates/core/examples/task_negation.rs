//! Remove one task from the pre-trained model while keeping control accuracy.

use tvkit::evalx::negation_report;
use tvkit::learn::{tune_negation, NegationSearch, TrainConfig};
use tvkit::suite::arithmetic_world;
use tvkit::Result;

fn main() -> Result<()> {
    let w = arithmetic_world(0)?;
    let cfg = TrainConfig { epochs: 20, batch_size: 32, ..TrainConfig::default() };
    for (tv, task) in w.tvs.iter().zip(&w.tasks).take(3) {
        let (rep, choice) = tune_negation(&w.model, &w.theta0, tv, &task.val, &w.pretrain.val, &cfg, &NegationSearch::default())?;
        let edited = rep.compose(&w.theta0, std::slice::from_ref(tv))?;
        let r = negation_report(&w.model, &w.theta0, &edited, &task.test, &w.pretrain.test)?;
        println!(
            "{}: lr {} epochs {}, target {:.1} -> {:.1}, control {:.1} -> {:.1} ({})",
            tv.id,
            choice.learning_rate,
            choice.epochs,
            r.target_pretrained,
            r.target,
            r.control_pretrained,
            r.control,
            if r.pass { "retained" } else { "below 95%" }
        );
    }
    Ok(())
}
