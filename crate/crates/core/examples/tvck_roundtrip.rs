//! Save and reload weights and task vectors in the TVCK container.

use tvkit::blocks::diff;
use tvkit::learn::{finetune, FinetuneConfig};
use tvkit::suite::arithmetic_world;
use tvkit::tvck::{self, Container};
use tvkit::{BlockedTensor, Result, TaskVector};

fn main() -> Result<()> {
    let w = arithmetic_world(0)?;
    let dir = std::env::temp_dir().join(format!("tvck-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;

    let (ft, _) = finetune(&w.model, &w.theta0, &w.tasks[0].train, &FinetuneConfig { epochs: 2, ..FinetuneConfig::default() })?;
    let tv = diff(&ft, &w.theta0)?.with_id("task0");
    tvck::save(dir.join("base.tvck"), &w.theta0)?;
    tvck::save(dir.join("task0.tvck"), &tv)?;

    let base: BlockedTensor = tvck::load(dir.join("base.tvck"))?;
    let back: TaskVector = tvck::load(dir.join("task0.tvck"))?;
    println!("weights identical: {}", base == w.theta0);
    println!("task vector identical: {}", back == tv);

    let header = Container::read(&dir.join("task0.tvck"))?.header;
    println!("{}", serde_json::to_string_pretty(&header).expect("header serialises"));

    let mut bytes = std::fs::read(dir.join("base.tvck"))?;
    bytes.truncate(bytes.len() - 3);
    if let Err(e) = Container::from_bytes(&bytes) {
        println!("truncated file: {e}");
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
