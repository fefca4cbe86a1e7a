//! Evaluation and diagnostics.

mod lda;
mod robustness;
mod separation;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Episode, Split, Universe};
use crate::model::ModelParams;
use crate::rng::Stream;
use crate::{Error, Result, Tensor};

pub use lda::{lda_project, lr_acc, LDA_RIDGE};
pub use robustness::{curve_area, noise_robustness_sweep};
pub use separation::{r_fc, r_hv, r_hv_halves, separation_report, tsd, SeparationReport};

/// Anything that produces query logits for an episode.
pub trait Predictor {
    fn predict(&self, episode: &Episode) -> Result<Tensor>;
}

impl Predictor for ModelParams {
    fn predict(&self, episode: &Episode) -> Result<Tensor> {
        self.logits(episode)
    }
}

/// Episode geometry used for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub n_way: usize,
    pub n_shot: usize,
    pub n_query: usize,
    pub n_tasks: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            n_way: 5,
            n_shot: 5,
            n_query: 16,
            n_tasks: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean per-task accuracy in percent.
    pub mean_acc: f64,
    /// 95% confidence half-width, `1.96 · s / √n`, in percent.
    pub ci95: f64,
    pub n_tasks: usize,
    pub per_task: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(per_task: Vec<f64>) -> Result<Self> {
        let n = per_task.len();
        if n == 0 {
            return Err(Error::invalid("evaluation needs at least one task"));
        }
        let mean = per_task.iter().sum::<f64>() / n as f64;
        let ci95 = if n > 1 {
            let var = per_task.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
            1.96 * libm::sqrt(var) / libm::sqrt(n as f64)
        } else {
            0.0
        };
        Ok(EvalReport {
            mean_acc: mean,
            ci95,
            n_tasks: n,
            per_task,
        })
    }
}

/// Fraction (in percent) of query rows whose argmax logit is the pseudo-label.
pub fn episode_accuracy(logits: &Tensor, episode: &Episode) -> Result<f64> {
    if logits.rows() != episode.query_y.len() || logits.cols() != episode.n_way() {
        return Err(Error::ShapeMismatch {
            op: "episode_accuracy",
            lhs: logits.shape().into(),
            rhs: alloc::vec![episode.query_y.len(), episode.n_way()],
        });
    }
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(&episode.query_y)
        .filter(|(p, y)| p == y)
        .count();
    Ok(100.0 * hits as f64 / episode.query_y.len() as f64)
}

/// Mean accuracy over `spec.n_tasks` episodes from `split` of `domain`.
/// Predictions are plain logits, i.e. `τ = 1`.
pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    universe: &Universe,
    domain: usize,
    split: Split,
    spec: &EvalSpec,
    rng: &mut Stream,
) -> Result<EvalReport> {
    let mut acc = Vec::with_capacity(spec.n_tasks);
    for _ in 0..spec.n_tasks {
        let ep = universe.sample_episode(domain, split, spec.n_way, spec.n_shot, spec.n_query, rng)?;
        acc.push(episode_accuracy(&model.predict(&ep)?, &ep)?);
    }
    EvalReport::from_accuracies(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_universe, UniverseConfig};
    use crate::rng;

    struct AlwaysZero;
    impl Predictor for AlwaysZero {
        fn predict(&self, ep: &Episode) -> Result<Tensor> {
            let mut t = Tensor::zeros(&[ep.query_y.len(), ep.n_way()]);
            for r in 0..t.rows() {
                let c = t.cols();
                t.data_mut()[r * c] = 1.0;
            }
            Ok(t)
        }
    }

    struct Oracle;
    impl Predictor for Oracle {
        fn predict(&self, ep: &Episode) -> Result<Tensor> {
            Ok(ep.query_targets())
        }
    }

    fn universe() -> Universe {
        generate_universe(&UniverseConfig { dim: 6, signal_dim: 3, samples_per_class: 40, ..Default::default() }).unwrap()
    }

    #[test]
    fn constant_predictor_is_at_chance() {
        let spec = EvalSpec { n_tasks: 50, ..Default::default() };
        let r = evaluate(&AlwaysZero, &universe(), 0, Split::Novel, &spec, &mut rng::stream(1, "e")).unwrap();
        assert!((r.mean_acc - 20.0).abs() < 1e-12);
        assert_eq!(r.ci95, 0.0);
    }

    #[test]
    fn oracle_predictor_is_perfect() {
        let spec = EvalSpec { n_tasks: 20, ..Default::default() };
        let r = evaluate(&Oracle, &universe(), 1, Split::Base, &spec, &mut rng::stream(1, "e")).unwrap();
        assert_eq!(r.mean_acc, 100.0);
        assert_eq!(r.ci95, 0.0);
        assert_eq!(r.n_tasks, 20);
    }

    #[test]
    fn ci_formula() {
        let r = EvalReport::from_accuracies(alloc::vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let s = libm::sqrt(((15.0f64 * 15.0 + 5.0 * 5.0) * 2.0) / 3.0);
        assert!((r.ci95 - 1.96 * s / 2.0).abs() < 1e-12);
        assert!(EvalReport::from_accuracies(alloc::vec![]).is_err());
    }
}
