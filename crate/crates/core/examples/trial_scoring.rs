//! Writes a held-out trial list, scores it with a briefly trained model and
//! reads the score file back, the same files the `eval` and `score`
//! subcommands use.
//!
//! ```text
//! cargo run --release --example trial_scoring
//! ```

use poformer::train::Trainer;
use poformer::trials::{format_scores, format_trial_list, join_scores, parse_scores, parse_trial_list};
use poformer::{compute_eer, compute_min_dcf, DcfParams, RunConfig};

fn main() -> poformer::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.task.num_speakers = 8;
    cfg.schedule.total_steps = 150;
    cfg.schedule.warmup_steps = 15;
    cfg.run.steps = 150;
    cfg.run.batch_size = 16;
    let mut trainer = Trainer::new(cfg)?;
    let log = trainer.run(150)?;
    println!("trained 150 steps, last loss {:.4}", log[log.len() - 1].loss);

    let (keys, scores) = trainer.evaluate_heldout(6, 3)?;
    let dir = std::env::temp_dir();
    let trials_path = dir.join("poformer_trials.txt");
    let scores_path = dir.join("poformer_scores.txt");
    std::fs::write(&trials_path, format_trial_list(&keys))?;
    std::fs::write(&scores_path, format_scores(&scores))?;
    for line in std::fs::read_to_string(&scores_path)?.lines().take(3) {
        println!("  {line}");
    }

    let keys = parse_trial_list(&std::fs::read_to_string(&trials_path)?)?;
    let scores = parse_scores(&std::fs::read_to_string(&scores_path)?)?;
    let set = join_scores(&keys, &scores)?;
    println!(
        "{} trials ({} target): EER={:.6} minDCF={:.6}",
        set.len(),
        set.num_targets(),
        compute_eer(&set)?,
        compute_min_dcf(&set, &DcfParams::default())?
    );
    std::fs::remove_file(trials_path)?;
    std::fs::remove_file(scores_path)?;
    Ok(())
}
