//! Merge eight task vectors into one model: a searched global scale against
//! learned per-block coefficients.

use tvkit::learn::{learn_addition, search_isotropic, TrainConfig};
use tvkit::suite::arithmetic_world;
use tvkit::{apply_isotropic, Result};

fn main() -> Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let w = arithmetic_world(seed)?;
    println!("fine-tuned accuracy per task: {:?}", w.finetuned_acc.iter().map(|a| a.round()).collect::<Vec<_>>());

    let iso = search_isotropic(&w.model, &w.theta0, &w.tvs, &w.val_sets())?;
    let iso_theta = apply_isotropic(&w.theta0, iso.alpha as f32, &w.tvs)?;
    println!("isotropic alpha {:.2}: mean test accuracy {:.2}", iso.alpha, w.mean_test_accuracy(&iso_theta)?);

    let cfg = TrainConfig { epochs: 20, batch_size: 64, seed, ..TrainConfig::default() };
    let rep = learn_addition(&w.model, &w.theta0, &w.tvs, &w.val_sets(), &cfg)?;
    let theta = rep.compose(&w.theta0, &w.tvs)?;
    println!("learned coefficients: mean test accuracy {:.2}", w.mean_test_accuracy(&theta)?);
    println!("final training loss {:.4}", rep.loss_trace.last().copied().unwrap_or(f64::NAN));
    Ok(())
}
