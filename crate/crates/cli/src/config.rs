//! Run configuration: one TOML file with optional `synth`, `train`,
//! `scenes` and `eval` tables, overridden by command-line flags.

use std::fs;
use std::path::Path;

use mmlstm_core::dataset::SynthConfig;
use mmlstm_core::evaluator::{small_windows_in, Averaging, FalseAlarmMode, RocOptions};
use mmlstm_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub count: usize,
    /// Small windows per scene; 11 covers a 3.0 s vote.
    pub windows: usize,
    pub absent_rate: f64,
    pub max_distractors: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            count: 200,
            windows: 11,
            absent_rate: 0.2,
            max_distractors: 3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.count == 0 || self.windows == 0 {
            return Err(CliError::Config("scene count and windows must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.absent_rate) {
            return Err(CliError::Config(format!("absent_rate {} outside [0, 1]", self.absent_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Thresholds for the ROC sweep; every `m` in `0..=T` when absent.
    pub m_list: Option<Vec<usize>>,
    /// Voting windows in seconds for scene scoring.
    pub vote_windows: Vec<f64>,
    /// Genuine and distractor samples each in the ROC test set.
    pub per_kind: usize,
    /// Rejection threshold for scene scoring.
    pub scene_m: usize,
    pub averaging: Averaging,
    pub false_alarm: FalseAlarmMode,
    /// Permutations averaged by the shuffled chance level.
    pub chance_rounds: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            m_list: None,
            vote_windows: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
            per_kind: 2000,
            scene_m: 5,
            averaging: Averaging::Probabilities,
            false_alarm: FalseAlarmMode::RejectionOrMislabel,
            chance_rounds: 20,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.per_kind == 0 {
            return Err(CliError::Config("per_kind must be positive".into()));
        }
        if self.vote_windows.is_empty() {
            return Err(CliError::Config("at least one vote window is required".into()));
        }
        for &w in &self.vote_windows {
            small_windows_in(w)?;
        }
        if matches!(&self.m_list, Some(ms) if ms.is_empty()) {
            return Err(CliError::Config("m list is empty".into()));
        }
        Ok(())
    }

    pub fn roc_options(&self) -> RocOptions {
        RocOptions {
            averaging: self.averaging,
            false_alarm: self.false_alarm,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub scenes: SceneConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate()?;
        self.train.validate()?;
        self.scenes.validate()?;
        self.eval.validate()
    }
}
