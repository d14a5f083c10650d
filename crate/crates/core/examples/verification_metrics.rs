//! EER, minDCF and the DET curve on a hand-made trial set and on
//! Gaussian score distributions.
//!
//! ```text
//! cargo run --example verification_metrics
//! ```

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use poformer::{compute_eer, compute_min_dcf, det_curve, DcfParams, Rng, TrialSet};

fn main() -> poformer::Result<()> {
    let trials = TrialSet::from_scores(&[0.8, 0.6, 0.4], &[0.7, 0.3, 0.2]);
    println!("threshold   P_miss   P_fa");
    for pt in det_curve(&trials)? {
        println!("{:>9}   {:.4}   {:.4}", pt.threshold, pt.p_miss, pt.p_fa);
    }
    println!(
        "EER {:.6}  minDCF {:.6}",
        compute_eer(&trials)?,
        compute_min_dcf(&trials, &DcfParams::default())?
    );

    // unit-variance Gaussians d apart: EER approaches Φ(−d/2)
    let mut rng = Rng::seed_from_u64(0);
    for d in [0.5, 1.0, 2.0, 3.0] {
        let tar = Normal::new(d, 1.0).expect("valid");
        let non = Normal::new(0.0, 1.0).expect("valid");
        let t: Vec<f64> = (0..20_000).map(|_| tar.sample(&mut rng)).collect();
        let n: Vec<f64> = (0..20_000).map(|_| non.sample(&mut rng)).collect();
        let set = TrialSet::from_scores(&t, &n);
        println!(
            "d' = {d}: EER {:.4} (theory {:.4}), minDCF(p=0.01) {:.4}",
            compute_eer(&set)?,
            poformer::tensor::normal_cdf(-d / 2.0),
            compute_min_dcf(&set, &DcfParams::default())?
        );
    }
    Ok(())
}
