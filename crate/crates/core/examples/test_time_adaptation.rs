//! Adapt coefficients on unlabelled, shifted test data.

use tvkit::data::generate;
use tvkit::evalx::accuracy;
use tvkit::learn::TrainConfig;
use tvkit::suite::transfer_world;
use tvkit::tta::{adapt_entropy, adapt_ufm, UfmConfig};
use tvkit::Result;

fn main() -> Result<()> {
    let w = transfer_world(0)?;
    let cfg = TrainConfig { epochs: 20, batch_size: 32, ..TrainConfig::default() };
    for i in 0..4 {
        let others = w.tvs_without(i);
        let shifted = generate(&w.specs[i].shifted(w.config.anchor_scale))?.test;
        let zero = accuracy(&w.model, &w.theta0, &shifted)?;
        let ufm = adapt_ufm(&w.model, &w.theta0, &others, &shifted, &cfg, &UfmConfig::default())?;
        let ent = adapt_entropy(&w.model, &w.theta0, &others, &shifted, &cfg)?;
        println!(
            "{}: zero-shot {zero:.2}, UFM {:.2} (trusted {} of {}), entropy {:.2}",
            w.specs[i].id,
            accuracy(&w.model, &ufm.learn.compose(&w.theta0, &others)?, &shifted)?,
            ufm.trusted_sizes.first().copied().unwrap_or(0),
            shifted.len(),
            accuracy(&w.model, &ent.learn.compose(&w.theta0, &others)?, &shifted)?,
        );
    }
    Ok(())
}
