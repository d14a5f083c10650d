//! The warmup + cosine learning-rate schedule, printed at a few steps.
//!
//! ```text
//! cargo run --example lr_schedule
//! ```

use poformer::schedule::LrSchedule;

fn main() -> poformer::Result<()> {
    let s = LrSchedule::full_scale();
    for step in [0, 1, 5_000, 9_999, 10_000, 10_001, 32_500, 55_000, 77_500, 99_999, 100_000] {
        println!("{step:>7}  {:.6e}", s.lr_at_step(step)?);
    }
    Ok(())
}
