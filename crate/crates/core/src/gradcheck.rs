//! Central finite differences, used as the independent oracle for every
//! backward rule.

use rand::SeedableRng;

use crate::autodiff::Graph;
use crate::config::RunConfig;
use crate::error::Result;
use crate::model::SpeakerNet;
use crate::nn::ForwardMode;
use crate::params::ParamStore;
use crate::synth::synth_batch;
use crate::tensor::Tensor;
use crate::Rng;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h` for every coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, REL_ERR_FLOOR)` over a whole gradient tensor.
pub fn vector_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(REL_ERR_FLOOR)
}

/// Finite-difference gradient of `f` with respect to every scalar of every
/// parameter in `store`.
pub fn finite_diff_params(mut f: impl FnMut(&ParamStore) -> f64, store: &ParamStore, h: f64) -> Vec<Tensor> {
    let mut probe = store.clone();
    let ids: Vec<_> = store.ids().collect();
    ids.into_iter()
        .map(|id| {
            let n = store.get(id).numel();
            let mut grad = Vec::with_capacity(n);
            for i in 0..n {
                let orig = store.get(id).data()[i];
                probe.get_mut(id).data_mut()[i] = orig + h;
                let up = f(&probe);
                probe.get_mut(id).data_mut()[i] = orig - h;
                let down = f(&probe);
                probe.get_mut(id).data_mut()[i] = orig;
                grad.push((up - down) / (2.0 * h));
            }
            Tensor::new(store.get(id).shape(), grad).expect("shape")
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares analytic and numeric gradients element by element.
pub fn compare_grads(store: &ParamStore, analytic: &[Tensor], numeric: &[Tensor]) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        worst_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for ((id, a), n) in store.ids().zip(analytic).zip(numeric) {
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            report.checked += 1;
            let err = relative_error(av, nv);
            if err > report.worst_rel_err || report.worst_param.is_empty() {
                report.worst_rel_err = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic = av;
                report.numeric = nv;
            }
        }
    }
    report
}

/// Full-network gradient check on one synthetic batch drawn for `config`.
///
/// Drop path runs in training mode from a fixed seed, so every loss
/// evaluation sees the same masks.
pub fn check_model(config: &RunConfig, h: f64) -> Result<GradCheckReport> {
    config.validate()?;
    let mut init = Rng::seed_from_u64(config.run.seed);
    let (net, store) = SpeakerNet::new(
        &config.model,
        config.task.feature_dim,
        config.task.num_speakers,
        &mut init,
    )?;
    let (utts, labels) = synth_batch(&config.task, config.run.batch_size, &mut init);
    let mask_seed = config.run.seed ^ 0xD809;

    let loss_of = |store: &ParamStore, grads: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let p = if grads { store.bind(&mut g) } else { store.bind_frozen(&mut g) };
        let mut mask_rng = Rng::seed_from_u64(mask_seed);
        let loss = net.loss(&mut g, &p, &utts, &labels, &mut ForwardMode::Train(&mut mask_rng))?;
        let value = g.value(loss).data()[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        Ok((value, p.grads(&g)))
    };

    let (_, analytic) = loss_of(&store, true)?;
    let numeric = finite_diff_params(|s| loss_of(s, false).expect("forward").0, &store, h);
    Ok(compare_grads(&store, &analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn linear_is_exact_for_any_step() {
        for h in [1e-1, 1e-3, 0.5] {
            let g = finite_diff_grad(|x| 2.5 * x[0] - 4.0 * x[1], &[1.0, -2.0], h);
            assert!((g[0] - 2.5).abs() < 1e-12);
            assert!((g[1] + 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn vector_relative_error_is_normwise() {
        assert_eq!(vector_relative_error(&[3.0, 4.0], &[3.0, 4.0]), 0.0);
        assert!((vector_relative_error(&[3.0, 4.0], &[3.0, 4.5]) - 0.5 / 29.25f64.sqrt()).abs() < 1e-15);
    }
}
