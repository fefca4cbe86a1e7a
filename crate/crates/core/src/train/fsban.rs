//! The multi-teacher student step: mismatched-teacher selection, mutual
//! regularization of teachers and the finite-difference temperature update.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{Components, MrTarget, TrainConfig};
use super::episodic::{student_update, teacher_tsd, StepOutput, Stepper};
use crate::data::{Episode, Split, Universe};
use crate::losses::{mct_meta_loss, mr_loss_on, softplus, MetaTemperature};
use crate::model::{logits_on, ModelParams};
use crate::optim::Adam;
use crate::rng::{self, Stream};
use crate::{Error, Result, Tape, Tensor};

/// One teacher per source domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherBank {
    pub domains: Vec<usize>,
    pub models: Vec<ModelParams>,
}

impl TeacherBank {
    pub fn new(domains: Vec<usize>, models: Vec<ModelParams>) -> Result<Self> {
        if domains.len() != models.len() {
            return Err(Error::invalid("one teacher per domain is required"));
        }
        let mut sorted = domains.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != domains.len() {
            return Err(Error::invalid("duplicate domain in teacher bank"));
        }
        Ok(TeacherBank { domains, models })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn position(&self, domain: usize) -> Option<usize> {
        self.domains.iter().position(|&d| d == domain)
    }
}

/// Picks, uniformly at random, a teacher whose domain differs from
/// `episode_domain`; returns its domain and model.
pub fn select_mismatched_teacher<'a>(bank: &'a TeacherBank, episode_domain: usize, rng: &mut Stream) -> Result<(usize, &'a ModelParams)> {
    let i = select_position(bank, episode_domain, rng)?;
    Ok((bank.domains[i], &bank.models[i]))
}

fn select_position(bank: &TeacherBank, episode_domain: usize, rng: &mut Stream) -> Result<usize> {
    let candidates: Vec<usize> = (0..bank.len()).filter(|&i| bank.domains[i] != episode_domain).collect();
    if bank.len() < 2 || candidates.is_empty() {
        return Err(Error::InsufficientClasses {
            needed: 2,
            available: bank.len(),
        });
    }
    Ok(candidates[rng.random_range(0..candidates.len())])
}

/// Central finite-difference derivative with respect to the raw temperature
/// `rho` of `outer(τ)` with `τ = softplus(rho)`.
pub fn fd_meta_gradient(rho: f64, epsilon: f64, mut outer: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let up = outer(softplus(rho + epsilon))?;
    let down = outer(softplus(rho - epsilon))?;
    let g = (up - down) / (2.0 * epsilon);
    if g.is_finite() {
        Ok(g)
    } else {
        Err(Error::NonFinite("fd_meta_gradient"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TeacherRef {
    Global,
    Bank(usize),
}

/// Mutable state of a multi-teacher student run.
#[derive(Debug, Clone)]
pub struct FsBanState {
    pub cfg: TrainConfig,
    pub components: Components,
    pub global: Option<ModelParams>,
    pub bank: Option<TeacherBank>,
    global_opt: Option<Adam>,
    bank_opts: Vec<Adam>,
    pub temperature: MetaTemperature,
    tau_opt: Adam,
    /// Temperature after every step.
    pub tau_trajectory: Vec<f64>,
    /// `selection_counts[i][j]`: episodes of domain `i` supervised by the
    /// bank teacher of domain `j`.
    pub selection_counts: Vec<Vec<u64>>,
    pub seen: Vec<usize>,
    select_rng: Stream,
    meta_rng: Stream,
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub teacher_tsd: f64,
    /// Domain of the bank teacher that supervised the step; `None` for the
    /// global teacher.
    pub teacher_domain: Option<usize>,
    pub tau: f64,
    pub meta_gradient: Option<f64>,
}

impl FsBanState {
    /// `name` keys the selection and meta-episode streams.
    pub fn new(
        cfg: &TrainConfig,
        seen: &[usize],
        n_domains: usize,
        global: Option<ModelParams>,
        bank: Option<TeacherBank>,
        name: &str,
    ) -> Result<Self> {
        let components = cfg.effective_components();
        if components.mm && bank.as_ref().map_or(true, |b| b.len() < 2) {
            return Err(Error::invalid("mismatched teachers need a bank of at least two teachers"));
        }
        if !components.mm && global.is_none() {
            return Err(Error::invalid("a global teacher is required when mismatched teachers are off"));
        }
        if components.mct && seen.len() < 2 {
            return Err(Error::invalid("temperature meta-learning needs at least two source domains"));
        }
        let lr = cfg.teacher_lr();
        Ok(FsBanState {
            cfg: cfg.clone(),
            components,
            global_opt: global.as_ref().map(|g| Adam::new(lr, &g.tensors)),
            bank_opts: bank
                .as_ref()
                .map(|b| b.models.iter().map(|m| Adam::new(lr, &m.tensors)).collect())
                .unwrap_or_default(),
            global,
            bank,
            temperature: MetaTemperature::from_tau(cfg.tau_init)?,
            tau_opt: Adam::new(cfg.tau_lr, &[Tensor::scalar(0.0)]),
            tau_trajectory: Vec::new(),
            selection_counts: vec![vec![0; n_domains]; n_domains],
            seen: seen.to_vec(),
            select_rng: rng::stream(cfg.seed, &alloc::format!("{name}/teacher-select")),
            meta_rng: rng::stream(cfg.seed, &alloc::format!("{name}/meta-episode")),
        })
    }

    /// Temperature in force: the configured constant unless it is learned.
    pub fn tau(&self) -> f64 {
        if self.components.mct {
            self.temperature.tau()
        } else {
            self.cfg.tau_init
        }
    }

    fn teacher(&self, r: TeacherRef) -> &ModelParams {
        match r {
            TeacherRef::Global => self.global.as_ref().expect("checked at construction"),
            TeacherRef::Bank(i) => &self.bank.as_ref().expect("checked at construction").models[i],
        }
    }

    fn mr_target(&self, used: TeacherRef, episode_domain: usize) -> TeacherRef {
        match self.cfg.mr_target {
            MrTarget::Used => used,
            MrTarget::Matched => self
                .bank
                .as_ref()
                .and_then(|b| b.position(episode_domain))
                .map_or(TeacherRef::Global, TeacherRef::Bank),
        }
    }

    /// One step of mutual regularization: the teacher moves toward the
    /// student's softened predictions `student_logits`.
    fn regularize_teacher(&mut self, r: TeacherRef, episode: &Episode, student_logits: &Tensor, tau: f64) -> Result<()> {
        let weights = self.cfg.weights;
        let (teacher, opt) = match r {
            TeacherRef::Global => (
                self.global.as_mut().ok_or_else(|| Error::invalid("no global teacher"))?,
                self.global_opt.as_mut().ok_or_else(|| Error::invalid("no global teacher"))?,
            ),
            TeacherRef::Bank(i) => (
                &mut self.bank.as_mut().ok_or_else(|| Error::invalid("no teacher bank"))?.models[i],
                &mut self.bank_opts[i],
            ),
        };
        let mut tape = Tape::new();
        let vars = teacher.bind(&mut tape, true);
        let t = logits_on(&mut tape, &teacher.config, &vars, episode)?;
        let s = tape.constant(student_logits.clone());
        let loss = mr_loss_on(&mut tape, s, t, &weights, tau)?;
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = vars
            .iter()
            .zip(&teacher.tensors)
            .map(|(&v, p)| grads.get_or_zeros(v, p))
            .collect();
        opt.step(&mut teacher.tensors, &g)
    }

    fn meta_episode(&mut self, universe: &Universe, episode_domain: usize) -> Result<Episode> {
        let others: Vec<usize> = self.seen.iter().copied().filter(|&d| d != episode_domain).collect();
        if others.is_empty() {
            return Err(Error::invalid("no second domain for the meta episode"));
        }
        let d = others[self.meta_rng.random_range(0..others.len())];
        let c = &self.cfg;
        universe.sample_episode(d, Split::Base, c.n_way, c.n_shot, c.n_query, &mut self.meta_rng)
    }
}

/// One training step of the student on `episode`:
/// 1. supervise with a mismatched bank teacher (or the global teacher),
/// 2. after warm-up, fine-tune a teacher toward the student,
/// 3. move the temperature against the finite-difference meta-gradient of
///    the updated student's loss on an episode from another source domain.
pub fn fsban_step(
    state: &mut FsBanState,
    universe: &Universe,
    student: &mut ModelParams,
    opt: &mut Adam,
    episode: &Episode,
    epoch: usize,
) -> Result<StepOutcome> {
    let comps = state.components;
    let w = state.cfg.weights;
    let tau = state.tau();
    let (used, lambda_js) = if comps.mm {
        let bank = state.bank.as_ref().ok_or_else(|| Error::invalid("no teacher bank"))?;
        let i = select_position(bank, episode.domain_id, &mut state.select_rng)?;
        (TeacherRef::Bank(i), w.lambda3)
    } else {
        (TeacherRef::Global, w.lambda2)
    };
    let teacher_domain = match used {
        TeacherRef::Bank(i) => {
            let d = state.bank.as_ref().map(|b| b.domains[i]).unwrap_or_default();
            if let Some(row) = state.selection_counts.get_mut(episode.domain_id) {
                if let Some(c) = row.get_mut(d) {
                    *c += 1;
                }
            }
            Some(d)
        }
        TeacherRef::Global => None,
    };
    let t_logits = state.teacher(used).logits(episode)?;
    let tsd = teacher_tsd(&t_logits, state.cfg.tsd_m)?;
    let before = comps.mct.then(|| (student.clone(), opt.clone()));

    let (loss, s_logits) = student_update(student, opt, episode, Some(&t_logits), w.lambda1, lambda_js, tau)?;

    if comps.mr && epoch >= state.cfg.warmup_epochs && w.lambda2 > 0.0 {
        let target = state.mr_target(used, episode.domain_id);
        state.regularize_teacher(target, episode, &s_logits, tau)?;
    }

    let mut meta_gradient = None;
    if let Some((s0, o0)) = before {
        if state.cfg.tau_lr > 0.0 {
            let ep2 = state.meta_episode(universe, episode.domain_id)?;
            let g = fd_meta_gradient(state.temperature.rho, state.cfg.fd_epsilon, |t| {
                let (mut s, mut o) = (s0.clone(), o0.clone());
                student_update(&mut s, &mut o, episode, Some(&t_logits), w.lambda1, lambda_js, t)?;
                mct_meta_loss(&s, &ep2)
            })?;
            let mut rho = [Tensor::scalar(state.temperature.rho)];
            state.tau_opt.step(&mut rho, &[Tensor::scalar(g)])?;
            state.temperature.rho = rho[0].item();
            meta_gradient = Some(g);
        }
    }
    let tau_after = state.tau();
    state.tau_trajectory.push(tau_after);
    Ok(StepOutcome {
        loss,
        teacher_tsd: tsd,
        teacher_domain,
        tau: tau_after,
        meta_gradient,
    })
}

pub(crate) struct FsBanStepper<'a> {
    pub state: &'a mut FsBanState,
    pub universe: &'a Universe,
}

impl Stepper for FsBanStepper<'_> {
    fn step(&mut self, student: &mut ModelParams, opt: &mut Adam, episode: &Episode, epoch: usize) -> Result<StepOutput> {
        let o = fsban_step(self.state, self.universe, student, opt, episode, epoch)?;
        Ok(StepOutput {
            loss: o.loss,
            teacher_tsd: Some(o.teacher_tsd),
        })
    }

    fn tau(&self) -> Option<f64> {
        Some(self.state.tau())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(domains: &[usize]) -> TeacherBank {
        let cfg = crate::model::ModelConfig { input_dim: 2, hidden: vec![], feature_dim: 2, ..Default::default() };
        let models = domains
            .iter()
            .map(|&d| ModelParams::init(&cfg, &mut rng::indexed_stream(0, "b", d as u64)).unwrap())
            .collect();
        TeacherBank::new(domains.to_vec(), models).unwrap()
    }

    #[test]
    fn mismatched_selection_never_picks_own_domain() {
        let b = bank(&[1, 2, 3]);
        let mut r = rng::stream(4, "sel");
        let mut hits = [0u32; 3];
        for _ in 0..600 {
            let (d, m) = select_mismatched_teacher(&b, 2, &mut r).unwrap();
            assert_ne!(d, 2);
            let i = b.position(d).unwrap();
            assert_eq!(m, &b.models[i]);
            hits[i] += 1;
        }
        assert_eq!(hits[1], 0);
        assert!(hits[0] > 200 && hits[2] > 200);
    }

    #[test]
    fn selection_needs_two_teachers() {
        assert!(select_mismatched_teacher(&bank(&[1]), 1, &mut rng::stream(0, "s")).is_err());
        assert!(TeacherBank::new(vec![1, 1], bank(&[1, 2]).models).is_err());
    }

    #[test]
    fn fd_gradient_matches_chain_rule() {
        // outer(τ) = (τ − 2)², d/dρ = 2(τ − 2)·sigmoid(ρ)
        let rho = 0.7;
        let g = fd_meta_gradient(rho, 1e-5, |t| Ok((t - 2.0) * (t - 2.0))).unwrap();
        let tau = softplus(rho);
        let sig = 1.0 / (1.0 + libm::exp(-rho));
        assert!((g - 2.0 * (tau - 2.0) * sig).abs() < 1e-8);
        assert!(fd_meta_gradient(rho, 0.0, |t| Ok(t)).is_err());
    }
}
