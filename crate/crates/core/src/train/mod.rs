//! Training regimes: gen-0 teachers, chained Born-Again generations and the
//! few-shot multi-task variant with mutual regularization, mismatched
//! teachers and a meta-controlled temperature.
//!
//! Every random draw goes through a named stream derived from
//! [`TrainConfig::seed`] and the name of the model being trained, so two runs
//! that train the same model with the same settings agree bit for bit even
//! when other parts of the run differ.

mod config;
mod episodic;
mod experiment;
mod fsban;
mod pretrain;

pub use config::{Components, Mode, MrTarget, TrainConfig};
pub use episodic::{train_ban_generation, train_gen0_teacher, train_plain, validate, EpochRecord, Stage};
pub use experiment::{run_experiment, run_experiment_with, RunRecord, Teachers};
pub use fsban::{fd_meta_gradient, fsban_step, select_mismatched_teacher, FsBanState, StepOutcome, TeacherBank};
pub use pretrain::pretrain_encoder;
