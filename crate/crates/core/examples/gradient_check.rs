//! Finite-difference check of every parameter gradient of a small network.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use std::time::Instant;

use poformer::gradcheck::{check_model, DEFAULT_STEP};
use poformer::RunConfig;

fn main() -> poformer::Result<()> {
    let config = RunConfig::gradcheck();
    let start = Instant::now();
    let report = check_model(&config, DEFAULT_STEP)?;
    println!("checked {} scalars in {:.1?}", report.checked, start.elapsed());
    println!(
        "worst relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
        report.worst_rel_err, report.worst_param, report.worst_index, report.analytic, report.numeric
    );
    Ok(())
}
