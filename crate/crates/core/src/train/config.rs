use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Cross-entropy only, no teacher.
    #[serde(rename = "gen0")]
    Gen0,
    /// Chained Born-Again generations.
    #[serde(rename = "ban")]
    Ban,
    /// Per-domain teacher bank with the enabled [`Components`].
    #[serde(rename = "fsban")]
    FsBan,
    /// A single global teacher, a fixed temperature, no mismatched teachers.
    #[serde(rename = "fsban-lite")]
    FsBanLite,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Gen0 => "gen0",
            Mode::Ban => "ban",
            Mode::FsBan => "fsban",
            Mode::FsBanLite => "fsban-lite",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Mode::Gen0, Mode::Ban, Mode::FsBan, Mode::FsBanLite].into_iter().find(|m| m.name() == s)
    }
}

/// Toggles for the three student-side additions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    pub mr: bool,
    pub mm: bool,
    pub mct: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components { mr: true, mm: true, mct: true }
    }
}

impl Components {
    pub const NONE: Components = Components { mr: false, mm: false, mct: false };

    /// All eight on/off combinations, in binary order `(mr, mm, mct)`.
    pub fn all_cells() -> [Components; 8] {
        core::array::from_fn(|i| Components {
            mr: i & 4 != 0,
            mm: i & 2 != 0,
            mct: i & 1 != 0,
        })
    }

    pub fn label(&self) -> String {
        let mut s = String::new();
        for (on, name) in [(self.mr, "mr"), (self.mm, "mm"), (self.mct, "mct")] {
            if on {
                if !s.is_empty() {
                    s.push('+');
                }
                s.push_str(name);
            }
        }
        if s.is_empty() {
            s.push_str("none");
        }
        s
    }
}

/// Which teacher the mutual-regularization update fine-tunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MrTarget {
    /// The teacher that supervised the student on this step.
    Used,
    /// The teacher of the episode's own domain.
    Matched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: Mode,
    pub components: Components,
    pub mr_target: MrTarget,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub n_way: usize,
    pub n_shot: usize,
    pub n_query: usize,
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    /// Episodes per validation pass (drawn from the validation classes of
    /// the seen domains, identical every epoch).
    pub val_tasks: usize,
    /// Epochs used for gen-0 and per-domain teachers.
    pub teacher_epochs: usize,
    pub student_lr: f64,
    /// Teacher fine-tuning rate is `student_lr / teacher_lr_divisor`.
    pub teacher_lr_divisor: f64,
    /// Epochs before teachers start being fine-tuned.
    pub warmup_epochs: usize,
    pub tau_init: f64,
    /// Step size of the temperature update; zero freezes it.
    pub tau_lr: f64,
    /// Half-width of the finite-difference probe on the raw temperature.
    pub fd_epsilon: f64,
    /// Number of Born-Again generations after gen-0.
    pub generations: usize,
    pub held_out_domain: usize,
    /// Supervised encoder pretraining epochs before episodic training; zero
    /// disables pretraining.
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    /// Number of top probabilities used by the teacher confidence statistic.
    pub tsd_m: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            mode: Mode::FsBan,
            components: Components::default(),
            mr_target: MrTarget::Used,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            n_way: 5,
            n_shot: 5,
            n_query: 16,
            epochs: 60,
            tasks_per_epoch: 50,
            val_tasks: 100,
            teacher_epochs: 60,
            student_lr: 1e-3,
            teacher_lr_divisor: 5.0,
            warmup_epochs: 5,
            tau_init: 4.0,
            tau_lr: 0.01,
            fd_epsilon: 1e-2,
            generations: 1,
            held_out_domain: 0,
            pretrain_epochs: 0,
            pretrain_batch: 64,
            tsd_m: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.n_way < 2 || self.n_shot < 1 || self.n_query < 1 {
            return Err(Error::invalid("episodes need n_way >= 2, n_shot >= 1, n_query >= 1"));
        }
        if self.tasks_per_epoch == 0 || self.val_tasks == 0 {
            return Err(Error::invalid("tasks_per_epoch and val_tasks must be positive"));
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.student_lr) || !(self.teacher_lr_divisor >= 1.0 && self.teacher_lr_divisor.is_finite()) {
            return Err(Error::invalid("student_lr must be positive and teacher_lr_divisor at least 1"));
        }
        if !positive(self.tau_init) || !positive(self.fd_epsilon) {
            return Err(Error::invalid("tau_init and fd_epsilon must be positive"));
        }
        if !(self.tau_lr >= 0.0 && self.tau_lr.is_finite()) {
            return Err(Error::invalid("tau_lr must be non-negative"));
        }
        if self.tsd_m < 2 || self.tsd_m > self.n_way {
            return Err(Error::invalid("tsd_m must lie in 2..=n_way"));
        }
        if self.pretrain_epochs > 0 && self.pretrain_batch == 0 {
            return Err(Error::invalid("pretrain_batch must be positive"));
        }
        if matches!(self.mode, Mode::Ban) && self.generations == 0 {
            return Err(Error::invalid("ban mode needs at least one generation"));
        }
        Ok(())
    }

    /// Components actually in force for the configured mode.
    pub fn effective_components(&self) -> Components {
        match self.mode {
            Mode::FsBan => self.components,
            Mode::FsBanLite => Components { mr: self.components.mr, mm: false, mct: false },
            Mode::Gen0 | Mode::Ban => Components::NONE,
        }
    }

    pub fn teacher_lr(&self) -> f64 {
        self.student_lr / self.teacher_lr_divisor
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_enumerate_every_combination() {
        let cells = Components::all_cells();
        assert_eq!(cells[0], Components::NONE);
        assert_eq!(cells[7], Components::default());
        let mut labels: alloc::vec::Vec<_> = cells.iter().map(|c| c.label()).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 8);
    }

    #[test]
    fn defaults_validate_and_bad_values_fail() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { tsd_m: 9, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { tau_init: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [Mode::Gen0, Mode::Ban, Mode::FsBan, Mode::FsBanLite] {
            assert_eq!(Mode::parse(m.name()), Some(m));
        }
        assert_eq!(Mode::parse("x"), None);
    }
}
