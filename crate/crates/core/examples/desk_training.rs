//! Trains the desk-scale network on the synthetic speaker task and scores
//! held-out trials.
//!
//! ```text
//! cargo run --release --example desk_training [class_token|class_token_plus_stats|stats_pooling_baseline]
//! ```

use std::time::Instant;

use poformer::train::Trainer;
use poformer::{compute_eer, compute_min_dcf, DcfParams, RunConfig};

fn main() -> poformer::Result<()> {
    let mut config = RunConfig::desk();
    if let Some(head) = std::env::args().nth(1) {
        config.model.pooling.head = serde_json::from_value(serde_json::Value::String(head))?;
    }
    let start = Instant::now();
    let mut trainer = Trainer::new(config.clone())?;
    for chunk in 0..config.run.steps / 100 {
        let log = trainer.run(100)?;
        let mean = log.iter().map(|e| e.loss).sum::<f64>() / log.len() as f64;
        println!("step {:>5}  lr {:.2e}  mean loss {mean:.4}", (chunk + 1) * 100, log[log.len() - 1].lr);
    }
    let trials = trainer.heldout_trial_set(10, 1)?;
    println!(
        "held-out: {} trials  EER {:.4}  minDCF {:.4}  ({:.1?})",
        trials.len(),
        compute_eer(&trials)?,
        compute_min_dcf(&trials, &DcfParams::default())?,
        start.elapsed()
    );
    Ok(())
}
