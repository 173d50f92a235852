//! Pairwise disentanglement error of the merged task vectors.

use tvkit::evalx::disentanglement_matrix;
use tvkit::learn::{learn_addition, search_isotropic, TrainConfig};
use tvkit::suite::arithmetic_world;
use tvkit::{CoefficientSet, Result};

fn main() -> Result<()> {
    let w = arithmetic_world(0)?;
    let m = w.theta0.num_blocks();
    let split = |c: &CoefficientSet| -> Vec<_> {
        (0..w.tvs.len())
            .map(|i| {
                let one = CoefficientSet { tv_ids: vec![c.tv_ids[i].clone()], values: c.values[i * m..(i + 1) * m].to_vec(), ..c.clone() };
                (one, w.tvs[i].clone())
            })
            .collect()
    };
    let iso = search_isotropic(&w.model, &w.theta0, &w.tvs, &w.val_sets())?;
    let searched = CoefficientSet::uniform_for(&w.tvs, &w.theta0, iso.alpha as f32);
    let learned = learn_addition(&w.model, &w.theta0, &w.tvs, &w.val_sets(), &TrainConfig { epochs: 20, batch_size: 64, ..TrainConfig::default() })?.coeffs;

    for (name, c) in [("searched", &searched), ("learned", &learned)] {
        let xi = disentanglement_matrix(&w.model, &w.theta0, &split(c), &w.test_sets())?;
        println!("{name}: mean error {:.2}%", xi.mean());
    }
    let xi = disentanglement_matrix(&w.model, &w.theta0, &split(&learned), &w.test_sets())?;
    xi.write_csv(std::io::stdout().lock())?;
    Ok(())
}
