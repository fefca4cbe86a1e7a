//! Accuracy under Gaussian weight perturbation.

use alloc::vec::Vec;

use super::{evaluate, EvalSpec};
use crate::data::{Split, Universe};
use crate::model::ModelParams;
use crate::rng;
use crate::{Error, Result};

/// Mean accuracy for each noise level in `stds`, given in units of the
/// model's global weight RMS. Every evaluation replays the same task stream
/// (`rng::stream(task_seed, "eval")`), so a zero level reproduces a plain
/// evaluation exactly.
pub fn noise_robustness_sweep(
    model: &ModelParams,
    universe: &Universe,
    domain: usize,
    split: Split,
    stds: &[f64],
    n_trials: usize,
    spec: &EvalSpec,
    task_seed: u64,
    noise_seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if n_trials == 0 {
        return Err(Error::invalid("noise sweep needs at least one trial"));
    }
    if stds.first() != Some(&0.0) || stds.windows(2).any(|w| !(w[1] >= w[0])) || stds.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("noise levels must be finite, ascending and start at 0"));
    }
    let rms = model.weight_rms();
    let mut out = Vec::with_capacity(stds.len());
    for (li, &s) in stds.iter().enumerate() {
        let mut acc = 0.0;
        for t in 0..n_trials {
            let mut noise = rng::indexed_stream(noise_seed, "noise", (li * n_trials + t) as u64);
            let m = if s == 0.0 { model.clone() } else { model.perturbed(s * rms, &mut noise) };
            let r = evaluate(&m, universe, domain, split, spec, &mut rng::stream(task_seed, "eval"))?;
            acc += r.mean_acc;
        }
        out.push((s, acc / n_trials as f64));
    }
    Ok(out)
}

/// Trapezoidal area under a curve of `(x, y)` points sorted by `x`.
pub fn curve_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[1].1 + w[0].1)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_of_a_line() {
        assert!((curve_area(&[(0.0, 1.0), (1.0, 1.0), (3.0, 0.0)]) - 2.0).abs() < 1e-15);
        assert_eq!(curve_area(&[(0.0, 5.0)]), 0.0);
    }
}
