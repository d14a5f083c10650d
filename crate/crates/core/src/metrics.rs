//! Detection-error trade-off, equal error rate and minimum detection cost.
//!
//! A trial is accepted iff its score is `>=` the threshold.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trial {
    pub target: bool,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrialSet {
    trials: Vec<Trial>,
}

impl TrialSet {
    pub fn new(trials: Vec<Trial>) -> Self {
        Self { trials }
    }

    pub fn from_scores(targets: &[f64], nontargets: &[f64]) -> Self {
        let trials = targets
            .iter()
            .map(|&score| Trial { target: true, score })
            .chain(nontargets.iter().map(|&score| Trial { target: false, score }))
            .collect();
        Self { trials }
    }

    pub fn push(&mut self, target: bool, score: f64) {
        self.trials.push(Trial { target, score });
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn num_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }

    pub fn num_nontargets(&self) -> usize {
        self.len() - self.num_targets()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    pub normalize: bool,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
            normalize: true,
        }
    }
}

/// One operating point per distinct score in increasing threshold order,
/// followed by the reject-all point at `+∞`. The first point (threshold at
/// the smallest score) is the accept-all point.
pub fn det_curve(trials: &TrialSet) -> Result<Vec<DetPoint>> {
    let n_tar = trials.num_targets();
    let n_non = trials.num_nontargets();
    if n_tar == 0 || n_non == 0 {
        return Err(Error::invalid(format!(
            "need at least one target and one nontarget trial, got {n_tar} and {n_non}"
        )));
    }
    if let Some(t) = trials.trials().iter().find(|t| !t.score.is_finite()) {
        return Err(Error::invalid(format!("non-finite score {}", t.score)));
    }
    let mut sorted = trials.trials().to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    let mut points = Vec::new();
    // counts of trials strictly below the current threshold
    let (mut tar_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].score;
        points.push(DetPoint {
            threshold,
            p_miss: tar_below as f64 / n_tar as f64,
            p_fa: (n_non - non_below) as f64 / n_non as f64,
        });
        while i < sorted.len() && sorted[i].score == threshold {
            if sorted[i].target {
                tar_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// Rate at which miss and false-alarm probabilities cross, linearly
/// interpolated between the two DET points that bracket the crossing.
pub fn compute_eer(trials: &TrialSet) -> Result<f64> {
    let points = det_curve(trials)?;
    Ok(eer_from_curve(&points))
}

pub(crate) fn eer_from_curve(points: &[DetPoint]) -> f64 {
    for pair in points.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let da = a.p_miss - a.p_fa;
        let db = b.p_miss - b.p_fa;
        if da == 0.0 {
            return a.p_miss;
        }
        if da < 0.0 && db >= 0.0 {
            let alpha = da / (da - db);
            return a.p_miss + alpha * (b.p_miss - a.p_miss);
        }
    }
    // the reject-all endpoint always has p_miss - p_fa = 1 > 0
    unreachable!("DET curve ends at (1, 0)")
}

/// Minimum over DET points of `c_miss·p_target·P_miss + c_fa·(1−p_target)·P_fa`,
/// divided by `min(c_miss·p_target, c_fa·(1−p_target))` when normalizing.
pub fn compute_min_dcf(trials: &TrialSet, params: &DcfParams) -> Result<f64> {
    if !(params.p_target > 0.0 && params.p_target < 1.0) {
        return Err(Error::invalid(format!("p_target {} outside (0, 1)", params.p_target)));
    }
    if !(params.c_miss > 0.0 && params.c_fa > 0.0) {
        return Err(Error::invalid("detection costs must be positive"));
    }
    let points = det_curve(trials)?;
    let w_miss = params.c_miss * params.p_target;
    let w_fa = params.c_fa * (1.0 - params.p_target);
    let min = points
        .iter()
        .map(|pt| w_miss * pt.p_miss + w_fa * pt.p_fa)
        .fold(f64::INFINITY, f64::min);
    Ok(if params.normalize { min / w_miss.min(w_fa) } else { min })
}
