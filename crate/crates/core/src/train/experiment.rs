//! Whole runs: teachers, students and their records.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::{Mode, TrainConfig};
use super::episodic::{initial_params, run_stage, train_ban_generation, train_gen0_teacher, Stage};
use super::fsban::{FsBanState, FsBanStepper, TeacherBank};
use super::pretrain::pretrain_encoder;
use crate::data::Universe;
use crate::model::ModelParams;
use crate::{Error, Result};

/// Stream key shared by the global teacher and every student, so all
/// generations see the same episodes. Students draw their initial weights
/// from a separate `student` stream.
pub const EPISODIC_KEY: &str = "episodic";
pub const STUDENT: &str = "student";
pub const GLOBAL_TEACHER: &str = "gen0";

fn renamed(mut stage: Stage, name: &str) -> Stage {
    stage.name = String::from(name);
    stage
}

/// Pretrained teachers (and encoder) a student run can draw on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Teachers {
    pub seen: Vec<usize>,
    pub pretrained: Option<ModelParams>,
    /// Gen-0 teacher trained on every seen domain.
    pub global: Option<Stage>,
    /// Per-domain teachers, in the order of `seen`.
    pub bank: Vec<Stage>,
}

impl Teachers {
    /// Trains the teachers `cfg` needs.
    pub fn train(universe: &Universe, cfg: &TrainConfig) -> Result<Self> {
        let comps = cfg.effective_components();
        let need_bank = matches!(cfg.mode, Mode::FsBan) && comps.mm;
        let need_global = !matches!(cfg.mode, Mode::FsBan) || !comps.mm;
        Self::train_selected(universe, cfg, need_global, need_bank)
    }

    /// Trains the global teacher and/or the per-domain bank.
    pub fn train_selected(universe: &Universe, cfg: &TrainConfig, global: bool, bank: bool) -> Result<Self> {
        cfg.validate()?;
        if cfg.model.input_dim != universe.config.dim {
            return Err(Error::invalid("model input_dim differs from the universe dimension"));
        }
        let (seen, _) = universe.leave_one_out(cfg.held_out_domain)?;
        let pretrained = if cfg.pretrain_epochs > 0 {
            Some(pretrain_encoder(universe, &seen, cfg)?)
        } else {
            None
        };
        let global = if global {
            let s = train_gen0_teacher(universe, &seen, cfg, EPISODIC_KEY, pretrained.as_ref())?;
            Some(renamed(s, GLOBAL_TEACHER))
        } else {
            None
        };
        let bank = if bank {
            seen.iter()
                .map(|&d| train_gen0_teacher(universe, &[d], cfg, &format!("teacher-d{d}"), pretrained.as_ref()))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Teachers { seen, pretrained, global, bank })
    }

    fn bank(&self) -> Result<Option<TeacherBank>> {
        if self.bank.is_empty() {
            return Ok(None);
        }
        TeacherBank::new(self.seen.clone(), self.bank.iter().map(|s| s.params.clone()).collect()).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub seen_domains: Vec<usize>,
    pub held_out_domain: usize,
    /// Teachers first, then students in training order. The final student
    /// is the last stage.
    pub stages: Vec<Stage>,
    /// Teachers after mutual-regularization fine-tuning, named like their
    /// stage.
    pub tuned_teachers: Vec<(String, ModelParams)>,
    pub tau_trajectory: Vec<f64>,
    /// `[episode domain][teacher domain]` counts of mismatched supervision.
    pub teacher_selection: Vec<Vec<u64>>,
}

impl RunRecord {
    pub fn student(&self) -> &ModelParams {
        &self.stages.last().expect("a run has at least one stage").params
    }

    pub fn student_stage(&self) -> &Stage {
        self.stages.last().expect("a run has at least one stage")
    }

    pub fn stage(&self, name: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Every class id any stage trained on.
    pub fn training_classes(&self) -> Vec<usize> {
        let all: BTreeSet<usize> = self.stages.iter().flat_map(|s| s.training_classes.iter().copied()).collect();
        all.into_iter().collect()
    }
}

/// Trains the teachers `cfg` needs, then the student(s).
pub fn run_experiment(universe: &Universe, cfg: &TrainConfig) -> Result<RunRecord> {
    let teachers = Teachers::train(universe, cfg)?;
    run_experiment_with(universe, cfg, &teachers)
}

/// Runs the student side of `cfg` against already trained `teachers`.
pub fn run_experiment_with(universe: &Universe, cfg: &TrainConfig, teachers: &Teachers) -> Result<RunRecord> {
    cfg.validate()?;
    let (seen, held_out) = universe.leave_one_out(cfg.held_out_domain)?;
    if seen != teachers.seen {
        return Err(Error::invalid("teachers were trained for different source domains"));
    }
    let global = || teachers.global.as_ref().ok_or_else(|| Error::invalid("run needs the global teacher"));
    let mut record = RunRecord {
        mode: cfg.mode,
        seen_domains: seen.clone(),
        held_out_domain: held_out,
        stages: Vec::new(),
        tuned_teachers: Vec::new(),
        tau_trajectory: Vec::new(),
        teacher_selection: Vec::new(),
    };
    let pre = teachers.pretrained.as_ref();
    match cfg.mode {
        Mode::Gen0 => record.stages.push(global()?.clone()),
        Mode::Ban => {
            record.stages.push(global()?.clone());
            for g in 1..=cfg.generations {
                let name = if g == 1 { String::from(STUDENT) } else { format!("{STUDENT}-gen{g}") };
                let teacher = &record.stages.last().expect("gen0 pushed").params;
                let stage = train_ban_generation(universe, &seen, teacher, cfg, EPISODIC_KEY, pre)?;
                record.stages.push(renamed(stage, &name));
            }
        }
        Mode::FsBan | Mode::FsBanLite => {
            let comps = cfg.effective_components();
            let bank = if comps.mm { teachers.bank()? } else { None };
            let global_model = if comps.mm { None } else { Some(global()?.params.clone()) };
            if let Some(g) = &teachers.global {
                if !comps.mm {
                    record.stages.push(g.clone());
                }
            }
            if comps.mm {
                record.stages.extend(teachers.bank.iter().cloned());
            }
            let mut state = FsBanState::new(cfg, &seen, universe.domains.len(), global_model, bank, EPISODIC_KEY)?;
            let init = initial_params(cfg, &format!("{EPISODIC_KEY}/student"), pre)?;
            let stage = run_stage(
                universe,
                &seen,
                cfg,
                EPISODIC_KEY,
                cfg.epochs,
                init,
                &mut FsBanStepper { state: &mut state, universe },
            )?;
            record.stages.push(renamed(stage, STUDENT));
            if comps.mr {
                if let Some(g) = state.global {
                    record.tuned_teachers.push((String::from(GLOBAL_TEACHER), g));
                }
                if let Some(b) = state.bank {
                    for (s, m) in teachers.bank.iter().zip(b.models) {
                        record.tuned_teachers.push((s.name.clone(), m));
                    }
                }
            }
            record.tau_trajectory = state.tau_trajectory;
            record.teacher_selection = state.selection_counts;
        }
    }
    Ok(record)
}
