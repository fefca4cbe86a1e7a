//! The shared episodic training loop and the single-teacher regimes.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::analysis::{episode_accuracy, tsd};
use crate::data::{Episode, Split, Universe};
use crate::losses::{distill_on, softened_softmax_rows};
use crate::model::{logits_on, ModelParams};
use crate::optim::Adam;
use crate::rng::{self, Stream};
use crate::{Error, Result, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Source domain of this epoch's training episodes.
    pub domain: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    /// Mean confidence statistic of the supervising teacher on the training
    /// queries, at `τ = 1`.
    pub teacher_tsd: Option<f64>,
    /// Temperature at the end of the epoch.
    pub tau: Option<f64>,
}

/// One trained model plus its history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept (highest validation accuracy); `None`
    /// when no epoch ran and the initialization is returned.
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    pub params: ModelParams,
    /// Sorted global ids of every class drawn for training.
    pub training_classes: Vec<usize>,
}

pub(crate) struct StepOutput {
    pub loss: f64,
    pub teacher_tsd: Option<f64>,
}

/// What happens on each training episode.
pub(crate) trait Stepper {
    fn step(&mut self, student: &mut ModelParams, opt: &mut Adam, episode: &Episode, epoch: usize) -> Result<StepOutput>;

    fn tau(&self) -> Option<f64> {
        None
    }
}

/// One Adam step of `student` on `λ_ce·CE + λ_js·τ²·JS(student, teacher)`.
/// Returns the loss and the student's pre-update query logits.
pub(crate) fn student_update(
    student: &mut ModelParams,
    opt: &mut Adam,
    episode: &Episode,
    teacher_logits: Option<&Tensor>,
    lambda_ce: f64,
    lambda_js: f64,
    tau: f64,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let vars = student.bind(&mut tape, true);
    let s = logits_on(&mut tape, &student.config, &vars, episode)?;
    let (t, lambda_js) = match teacher_logits {
        Some(t) => (tape.constant(t.clone()), lambda_js),
        None => (s, 0.0),
    };
    let targets = episode.query_targets();
    let loss = distill_on(&mut tape, s, t, Some(&targets), lambda_ce, lambda_js, tau)?;
    let grads = tape.backward(loss)?;
    let g: Vec<Tensor> = vars
        .iter()
        .zip(&student.tensors)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    let value = tape.value(loss).item();
    let logits = tape.value(s).clone();
    opt.step(&mut student.tensors, &g)?;
    Ok((value, logits))
}

pub(crate) fn teacher_tsd(teacher_logits: &Tensor, m: usize) -> Result<f64> {
    tsd(&softened_softmax_rows(teacher_logits, 1.0)?, m)
}

/// Mean validation accuracy over `cfg.val_tasks` episodes cycling through
/// `domains`. The task stream is rebuilt from `key` on each call, so every
/// epoch is scored on the same tasks.
pub fn validate(model: &ModelParams, universe: &Universe, domains: &[usize], cfg: &TrainConfig, key: &str) -> Result<f64> {
    if domains.is_empty() {
        return Err(Error::invalid("validation needs at least one domain"));
    }
    let mut r = rng::stream(cfg.seed, &format!("{key}/val"));
    let mut acc = 0.0;
    for t in 0..cfg.val_tasks {
        let d = domains[t % domains.len()];
        let ep = universe.sample_episode(d, Split::Valid, cfg.n_way, cfg.n_shot, cfg.n_query, &mut r)?;
        acc += episode_accuracy(&model.logits(&ep)?, &ep)?;
    }
    Ok(acc / cfg.val_tasks as f64)
}

/// Initial weights under stream key `key`: the pretrained encoder when one
/// is given (head freshly drawn), otherwise a fresh draw from `"{key}/init"`.
pub(crate) fn initial_params(cfg: &TrainConfig, key: &str, pretrained: Option<&ModelParams>) -> Result<ModelParams> {
    let mut fresh = ModelParams::init(&cfg.model, &mut rng::stream(cfg.seed, &format!("{key}/init")))?;
    if let Some(p) = pretrained {
        if p.config != cfg.model {
            return Err(Error::invalid("pretrained model does not match the model config"));
        }
        let enc = 2 * (cfg.model.hidden.len() + 1);
        fresh.tensors[..enc].clone_from_slice(&p.tensors[..enc]);
    }
    Ok(fresh)
}

/// Runs `epochs` epochs of episodic training on the base classes of `seen`,
/// keeping the weights with the best validation accuracy. `key` names the
/// random streams (initialization, source domains, tasks, validation) and
/// becomes the stage name.
pub(crate) fn run_stage(
    universe: &Universe,
    seen: &[usize],
    cfg: &TrainConfig,
    key: &str,
    epochs: usize,
    init: ModelParams,
    stepper: &mut dyn Stepper,
) -> Result<Stage> {
    if seen.is_empty() {
        return Err(Error::invalid("training needs at least one source domain"));
    }
    let mut student = init;
    let mut opt = Adam::new(cfg.student_lr, &student.tensors);
    let mut dom_rng: Stream = rng::stream(cfg.seed, &format!("{key}/domain"));
    let mut task_rng: Stream = rng::stream(cfg.seed, &format!("{key}/tasks"));
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut classes = BTreeSet::new();
    let mut records = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let domain = seen[dom_rng.random_range(0..seen.len())];
        let (mut loss, mut tsd_sum, mut tsd_n) = (0.0, 0.0, 0usize);
        for _ in 0..cfg.tasks_per_epoch {
            let ep = universe.sample_episode(domain, Split::Base, cfg.n_way, cfg.n_shot, cfg.n_query, &mut task_rng)?;
            classes.extend(ep.class_map.iter().copied());
            let out = stepper.step(&mut student, &mut opt, &ep, epoch)?;
            loss += out.loss;
            if let Some(t) = out.teacher_tsd {
                tsd_sum += t;
                tsd_n += 1;
            }
        }
        let val_acc = validate(&student, universe, seen, cfg, key)?;
        records.push(EpochRecord {
            epoch,
            domain,
            train_loss: loss / cfg.tasks_per_epoch as f64,
            val_acc,
            teacher_tsd: (tsd_n > 0).then(|| tsd_sum / tsd_n as f64),
            tau: stepper.tau(),
        });
        if best.as_ref().map_or(true, |b| val_acc > b.1) {
            best = Some((epoch, val_acc, student.clone()));
        }
    }
    let (best_epoch, best_val_acc, params) = match best {
        Some((e, a, p)) => (Some(e), Some(a), p),
        None => (None, None, student),
    };
    Ok(Stage {
        name: key.to_string(),
        epochs: records,
        best_epoch,
        best_val_acc,
        params,
        training_classes: classes.into_iter().collect(),
    })
}

struct PlainStep<'a> {
    cfg: &'a TrainConfig,
}

impl Stepper for PlainStep<'_> {
    fn step(&mut self, student: &mut ModelParams, opt: &mut Adam, episode: &Episode, _: usize) -> Result<StepOutput> {
        let (loss, _) = student_update(student, opt, episode, None, self.cfg.weights.lambda1, 0.0, 1.0)?;
        Ok(StepOutput { loss, teacher_tsd: None })
    }
}

struct BanStep<'a> {
    cfg: &'a TrainConfig,
    teacher: &'a ModelParams,
}

impl Stepper for BanStep<'_> {
    fn step(&mut self, student: &mut ModelParams, opt: &mut Adam, episode: &Episode, _: usize) -> Result<StepOutput> {
        let t = self.teacher.logits(episode)?;
        let (loss, _) = student_update(
            student,
            opt,
            episode,
            Some(&t),
            self.cfg.weights.lambda1,
            self.cfg.weights.lambda2,
            self.cfg.tau_init,
        )?;
        Ok(StepOutput {
            loss,
            teacher_tsd: Some(teacher_tsd(&t, self.cfg.tsd_m)?),
        })
    }

    fn tau(&self) -> Option<f64> {
        Some(self.cfg.tau_init)
    }
}

/// Plain episodic cross-entropy training on the base classes of `seen` for
/// `epochs` epochs.
pub fn train_plain(
    universe: &Universe,
    seen: &[usize],
    cfg: &TrainConfig,
    key: &str,
    epochs: usize,
    init: ModelParams,
) -> Result<Stage> {
    run_stage(universe, seen, cfg, key, epochs, init, &mut PlainStep { cfg })
}

/// Gen-0 teacher on `domains` for `cfg.teacher_epochs` epochs.
pub fn train_gen0_teacher(
    universe: &Universe,
    domains: &[usize],
    cfg: &TrainConfig,
    key: &str,
    pretrained: Option<&ModelParams>,
) -> Result<Stage> {
    let init = initial_params(cfg, key, pretrained)?;
    train_plain(universe, domains, cfg, key, cfg.teacher_epochs, init)
}

/// One Born-Again generation: a freshly initialized student trained against
/// a frozen `teacher` with the BAN objective at the fixed `cfg.tau_init`.
pub fn train_ban_generation(
    universe: &Universe,
    seen: &[usize],
    teacher: &ModelParams,
    cfg: &TrainConfig,
    key: &str,
    pretrained: Option<&ModelParams>,
) -> Result<Stage> {
    if teacher.config != cfg.model {
        return Err(Error::invalid("teacher architecture differs from the student"));
    }
    let init = initial_params(cfg, &format!("{key}/student"), pretrained)?;
    run_stage(universe, seen, cfg, key, cfg.epochs, init, &mut BanStep { cfg, teacher })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_universe, UniverseConfig};
    use crate::model::ModelConfig;

    fn setup() -> (Universe, TrainConfig) {
        let u = generate_universe(&UniverseConfig {
            dim: 8,
            signal_dim: 4,
            samples_per_class: 40,
            classes_per_domain: 12,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            model: ModelConfig { input_dim: 8, hidden: alloc::vec![8], feature_dim: 4, ..Default::default() },
            n_way: 3,
            n_query: 4,
            epochs: 2,
            teacher_epochs: 2,
            tasks_per_epoch: 3,
            val_tasks: 3,
            ..Default::default()
        };
        (u, cfg)
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (u, cfg) = setup();
        let cfg = TrainConfig { teacher_epochs: 0, ..cfg };
        let s = train_gen0_teacher(&u, &[1], &cfg, "t", None).unwrap();
        let init = initial_params(&cfg, "t", None).unwrap();
        assert_eq!(s.params, init);
        assert!(s.best_epoch.is_none());
        assert!(s.epochs.is_empty());
    }

    #[test]
    fn zero_distillation_weight_matches_plain_training() {
        let (u, mut cfg) = setup();
        cfg.weights.lambda2 = 0.0;
        let teacher = train_gen0_teacher(&u, &[1, 2], &cfg, "gen0", None).unwrap();
        let ban = train_ban_generation(&u, &[1, 2], &teacher.params, &cfg, "s", None).unwrap();
        let init = initial_params(&cfg, "s/student", None).unwrap();
        let plain = train_plain(&u, &[1, 2], &cfg, "s", cfg.epochs, init).unwrap();
        assert_eq!(ban.params, plain.params);
        let losses = |s: &Stage| s.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>();
        assert_eq!(losses(&ban), losses(&plain));
    }

    #[test]
    fn training_draws_only_from_source_base_classes() {
        let (u, cfg) = setup();
        let s = train_gen0_teacher(&u, &[2, 3], &cfg, "gen0", None).unwrap();
        let allowed: BTreeSet<usize> = [2, 3].iter().flat_map(|&d| u.domains[d].split.base.clone()).collect();
        assert!(!s.training_classes.is_empty());
        assert!(s.training_classes.iter().all(|c| allowed.contains(c)));
    }

    #[test]
    fn stages_are_reproducible() {
        let (u, cfg) = setup();
        let a = train_gen0_teacher(&u, &[0, 1], &cfg, "gen0", None).unwrap();
        let b = train_gen0_teacher(&u, &[0, 1], &cfg, "gen0", None).unwrap();
        assert_eq!(a, b);
    }
}
