//! The TOML experiment file. Every block has documented defaults and unknown
//! keys are rejected.
//!
//! | block          | field            | default       |
//! |----------------|------------------|---------------|
//! | top level      | `output_dir`     | none          |
//! | top level      | `threads`        | all cores     |
//! | top level      | `execution`      | `parallel`    |
//! | `[dataset]`    | `trajectories`   | 100           |
//! | `[dataset]`    | `horizon`        | 30            |
//! | `[dataset]`    | `seed`           | 0             |
//! | `[training]`   | `solver`         | `ls`          |
//! | `[training]`   | `step`           | automatic     |
//! | `[training]`   | `iters`          | 100000        |
//! | `[training]`   | `tol`            | 1e-10         |
//! | matching       | `test_tasks`     | 64            |
//! | matching       | `horizon`        | 30            |
//! | matching       | `seed`           | 1             |
//! | shock          | `test_tasks`     | 256           |
//! | shock          | `horizon`        | 10            |
//! | shock          | `seed`           | 1             |
//! | shock          | `shock_round`    | 2             |
//! | shock          | `shock_delta`    | 1.0           |
//! | shock          | `c_b`            | `"exp_b"`     |
//! | shock          | `lambda_sweep`   | empty         |
//! | me-icpo        | `tie_seed`       | 0             |
//!
//! The lemma-suite block takes the analysis suite options and the me-icpo
//! block takes the loop settings under `[experiment.algorithm]`.

use std::path::{Path, PathBuf};

use icpo_core::analysis::LemmaSuiteOptions;
use icpo_core::icpo_loop::CbChoice;
use icpo_core::{Exec, TeacherConfig, TeacherSettings};
use icpo_meicpo::{HttpSettings, MeIcpoConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl From<Execution> for Exec {
    fn from(e: Execution) -> Self {
        match e {
            Execution::Sequential => Exec::Sequential,
            Execution::Parallel => Exec::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetBlock {
    pub trajectories: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for DatasetBlock {
    fn default() -> Self {
        Self {
            trajectories: 100,
            horizon: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Gd,
    #[default]
    Ls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingBlock {
    pub solver: Solver,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    pub iters: usize,
    pub tol: f64,
}

impl Default for TrainingBlock {
    fn default() -> Self {
        Self {
            solver: Solver::Ls,
            step: None,
            iters: 100_000,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingBlock {
    pub test_tasks: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for MatchingBlock {
    fn default() -> Self {
        Self {
            test_tasks: 64,
            horizon: 30,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShockBlock {
    pub test_tasks: usize,
    pub horizon: usize,
    pub seed: u64,
    pub shock_round: usize,
    pub shock_delta: f64,
    pub c_b: CbChoice,
    /// Visit-penalty values for which the per-task `b` range is reported.
    pub lambda_sweep: Vec<f64>,
}

impl Default for ShockBlock {
    fn default() -> Self {
        Self {
            test_tasks: 256,
            horizon: 10,
            seed: 1,
            shock_round: 2,
            shock_delta: 1.0,
            c_b: CbChoice::ExpB,
            lambda_sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum GeneratorBlock {
    /// Scripted playback from a JSON file.
    Mock {
        script: PathBuf,
    },
    Http(HttpSettings),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeIcpoBlock {
    /// JSON-lines file of `{"question": ..., "gold": ...}` records.
    pub questions: PathBuf,
    pub generator: GeneratorBlock,
    #[serde(default)]
    pub algorithm: MeIcpoConfig,
    #[serde(default)]
    pub tie_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExperimentBlock {
    Matching(MatchingBlock),
    Shock(ShockBlock),
    LemmaSuite(LemmaSuiteOptions),
    MeIcpo(MeIcpoBlock),
}

impl ExperimentBlock {
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentBlock::Matching(_) => "matching",
            ExperimentBlock::Shock(_) => "shock",
            ExperimentBlock::LemmaSuite(_) => "lemma-suite",
            ExperimentBlock::MeIcpo(_) => "me-icpo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherSettings>,
    #[serde(default)]
    pub dataset: DatasetBlock,
    #[serde(default)]
    pub training: TrainingBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentBlock>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        cfg.validate().map_err(|reason| CliError::Config {
            path: path.to_path_buf(),
            reason,
        })?;
        Ok(cfg)
    }

    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(ExperimentBlock::MeIcpo(block)) = &mut cfg.experiment {
            block.questions = base.join(&block.questions);
            if let GeneratorBlock::Mock { script } = &mut block.generator {
                *script = base.join(&*script);
            }
        }
        Ok(cfg)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if let Some(t) = &self.teacher {
            TeacherConfig::try_from(t.clone()).map_err(|e| format!("[teacher]: {e}"))?;
        }
        if self.dataset.trajectories == 0 {
            return Err("[dataset]: trajectories must be at least 1".into());
        }
        if self.dataset.horizon < 2 {
            return Err("[dataset]: horizon must be at least 2".into());
        }
        if self.threads == Some(0) {
            return Err("threads must be at least 1".into());
        }
        if let Some(step) = self.training.step {
            if !(step > 0.0 && step.is_finite()) {
                return Err(format!("[training]: step must be positive, got {step}"));
            }
        }
        match &self.experiment {
            Some(ExperimentBlock::Matching(m)) if m.test_tasks == 0 || m.horizon == 0 => {
                Err("[experiment]: test_tasks and horizon must be positive".into())
            }
            Some(ExperimentBlock::Shock(s)) if s.shock_round == 0 || s.shock_round > s.horizon => {
                Err(format!(
                    "[experiment]: shock_round {} outside 1..={}",
                    s.shock_round, s.horizon
                ))
            }
            Some(ExperimentBlock::Shock(s)) if s.test_tasks == 0 => {
                Err("[experiment]: test_tasks must be positive".into())
            }
            Some(ExperimentBlock::MeIcpo(m)) => m
                .algorithm
                .validate()
                .map_err(|e| format!("[experiment]: {e}")),
            _ => Ok(()),
        }
    }

    pub fn teacher_config(&self) -> Result<TeacherConfig> {
        let settings = self
            .teacher
            .clone()
            .ok_or_else(|| CliError::Usage("config has no [teacher] block".into()))?;
        Ok(TeacherConfig::try_from(settings)?)
    }

    /// Replaces the dataset seed and the experiment seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        match &mut self.experiment {
            Some(ExperimentBlock::Matching(m)) => m.seed = seed,
            Some(ExperimentBlock::Shock(s)) => s.seed = seed,
            Some(ExperimentBlock::LemmaSuite(l)) => l.seed = seed,
            Some(ExperimentBlock::MeIcpo(m)) => m.tie_seed = seed,
            None => {}
        }
    }

    pub fn exec(&self) -> Exec {
        self.execution.into()
    }
}
