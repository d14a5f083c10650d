//! Training in two halves across a checkpoint file gives the same log and
//! the same bytes as one uninterrupted run.
//!
//! ```text
//! cargo run --release --example checkpoint_resume
//! ```

use poformer::checkpoint::Checkpoint;
use poformer::train::{format_log, Trainer};
use poformer::RunConfig;

fn main() -> poformer::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.schedule.total_steps = 60;
    cfg.schedule.warmup_steps = 10;
    cfg.run.steps = 60;
    cfg.run.batch_size = 8;

    let mut straight = Trainer::new(cfg.clone())?;
    let full = straight.run(60)?;

    let path = std::env::temp_dir().join("poformer_resume_example.ckpt");
    let mut first = Trainer::new(cfg)?;
    let mut log = first.run(25)?;
    first.checkpoint().save(&path)?;
    println!("saved step {} to {}", first.step_count(), path.display());

    let mut second = Trainer::from_checkpoint(Checkpoint::load(&path)?)?;
    log.extend(second.run(35)?);
    std::fs::remove_file(&path)?;

    print!("{}", format_log(&log[log.len() - 3..]));
    println!("logs identical: {}", format_log(&log) == format_log(&full));
    println!(
        "final checkpoints identical: {}",
        second.checkpoint().to_bytes() == straight.checkpoint().to_bytes()
    );
    Ok(())
}
