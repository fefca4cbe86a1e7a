//! Experiment configuration: one flat TOML file, every key optional,
//! unknown keys rejected.

use std::path::Path;

use fsban_core::analysis::EvalSpec;
use fsban_core::data::UniverseConfig;
use fsban_core::train::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Settings of the diagnostics written by `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Noise levels in units of the weight RMS; must start at 0.
    pub noise_stds: Vec<f64>,
    pub noise_trials: usize,
    pub separation_tasks: usize,
    pub separation_per_class: usize,
    /// Samples per class for the LDA projection and LR-Acc probes.
    pub lda_per_class: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            noise_stds: vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.5],
            noise_trials: 3,
            separation_tasks: 20,
            separation_per_class: 20,
            lda_per_class: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Training seed. The universe has its own seed in `[universe]`.
    pub seed: u64,
    pub mode: Mode,
    /// Output directory; falls back to the output root.
    pub out: Option<String>,
    pub universe: UniverseConfig,
    pub train: TrainConfig,
    pub eval: EvalSpec,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            mode: Mode::FsBan,
            out: None,
            universe: UniverseConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSpec::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML. `seed` and `mode` live at the top level only.
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let value: toml::Table = text.parse().map_err(CliError::config)?;
        if let Some(train) = value.get("train").and_then(|t| t.as_table()) {
            for key in ["seed", "mode"] {
                if train.contains_key(key) {
                    return Err(CliError::config(format!("`train.{key}` is not allowed; set `{key}` at the top level")));
                }
            }
        }
        let cfg: ExperimentConfig = value.try_into().map_err(CliError::config)?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| e.context(path.display()))
    }

    /// Copies the top-level seed and mode into the training section.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self.train.mode = self.mode;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self.resolved()
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate().map_err(CliError::config)?;
        if self.train.model.input_dim != self.universe.dim {
            return Err(CliError::config(format!(
                "train.model.input_dim = {} but universe.dim = {}",
                self.train.model.input_dim, self.universe.dim
            )));
        }
        if self.train.held_out_domain >= self.universe.n_domains {
            return Err(CliError::config("train.held_out_domain is not a universe domain"));
        }
        let e = &self.eval;
        if e.n_way < 2 || e.n_shot < 1 || e.n_query < 1 || e.n_tasks < 1 {
            return Err(CliError::config("eval needs n_way >= 2 and positive n_shot, n_query, n_tasks"));
        }
        if e.n_shot + e.n_query > self.universe.samples_per_class {
            return Err(CliError::config("eval n_shot + n_query exceeds universe.samples_per_class"));
        }
        let a = &self.analysis;
        let s = &a.noise_stds;
        if s.first() != Some(&0.0) || s.windows(2).any(|w| !(w[1] > w[0])) || s.iter().any(|x| !x.is_finite()) {
            return Err(CliError::config("analysis.noise_stds must start at 0 and increase strictly"));
        }
        if a.noise_trials == 0 || a.separation_tasks == 0 || a.separation_per_class < 2 || a.lda_per_class < 2 {
            return Err(CliError::config("analysis counts must be positive (per-class counts at least 2)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default().resolved());
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_and_misplaced_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("sed = 1"), Err(CliError::Config(_))));
        assert!(ExperimentConfig::from_toml("[train]\nepocs = 3").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nseed = 3").is_err());
        assert!(ExperimentConfig::from_toml("[universe]\ndim = \"x\"").is_err());
    }

    #[test]
    fn top_level_seed_and_mode_reach_training() {
        let c = ExperimentConfig::from_toml("seed = 9\nmode = \"ban\"\n[train]\nepochs = 2").unwrap();
        assert_eq!((c.train.seed, c.train.mode, c.train.epochs), (9, Mode::Ban, 2));
    }

    #[test]
    fn mode_names_match_the_command_line() {
        for m in [Mode::Gen0, Mode::Ban, Mode::FsBan, Mode::FsBanLite] {
            let c = ExperimentConfig::from_toml(&format!("mode = \"{}\"", m.name())).unwrap();
            assert_eq!(c.mode, m);
        }
    }

    #[test]
    fn validation_catches_dimension_mismatch() {
        let c = ExperimentConfig::from_toml("[universe]\ndim = 8").unwrap();
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let c = ExperimentConfig::from_toml("[analysis]\nnoise_stds = [0.1, 0.2]").unwrap();
        assert!(c.validate().is_err());
    }
}
