//! Stage and run configuration, read from TOML.
//!
//! [`StageConfig::full_scale`] records the large-model recipe values
//! (batch 128, learning rate 1e-5 for both distillation stages, 5 epochs,
//! warmup 0.1, 16K packed / 20K non-packed sequences; 5e-7 for preference
//! learning and RL, 16K and 25K sequences). [`StageConfig::desk`] and
//! [`RunConfig::desk`] are the profiles that fit a tiny policy on a CPU.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::objectives::ClipConfig;
use crate::optim::OptimizerKind;
use crate::policy::PolicyConfig;
use crate::recipe::RecipeConfig;
use crate::task::Difficulty;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Midtrain,
    Sft,
    Dpo,
    Rl,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Midtrain, Stage::Sft, Stage::Dpo, Stage::Rl];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Midtrain => "midtrain",
            Stage::Sft => "sft",
            Stage::Dpo => "dpo",
            Stage::Rl => "rl",
        }
    }

    /// Stage whose marker an input checkpoint must carry.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Midtrain => None,
            Stage::Sft => Some(Stage::Midtrain),
            Stage::Dpo => Some(Stage::Sft),
            Stage::Rl => Some(Stage::Dpo),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Early stop: end training once validation pass@1 has failed to improve on
/// the best value by at least `min_delta_points` for `patience` consecutive
/// evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStop {
    pub min_delta_points: f64,
    pub patience: usize,
    /// Evaluate every this many optimizer steps (0 = once per epoch).
    pub every_steps: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self { min_delta_points: 0.5, patience: 3, every_steps: 0 }
    }
}

/// Group-sampling knobs of the RL stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub group_size: usize,
    pub prompts_per_step: usize,
    /// Optimizer updates per sampled batch.
    pub updates_per_step: usize,
    /// Evaluate consensus on the held-out suite every this many steps (0 = never).
    pub eval_every: usize,
    pub recipe: RecipeConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self { group_size: 8, prompts_per_step: 16, updates_per_step: 1, eval_every: 0, recipe: RecipeConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    /// Rows (midtrain/sft), pairs (dpo) or unused (rl, see `rl`).
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// RL steps; other stages derive their step count from `epochs`.
    #[serde(default)]
    pub total_steps: Option<usize>,
    pub warmup_fraction: f64,
    pub sequence_length: usize,
    pub packing: bool,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip (0 disables).
    #[serde(default)]
    pub max_grad_norm: f64,
    pub seed: u64,
    #[serde(default)]
    pub clip: ClipConfig,
    #[serde(default)]
    pub rl: Option<RlConfig>,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
    /// Completion budget when sampling.
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

fn default_max_new_tokens() -> usize {
    160
}

impl StageConfig {
    /// Documented large-model values.
    pub fn full_scale(stage: Stage) -> Self {
        let base = Self {
            stage,
            batch_size: 128,
            learning_rate: 1e-5,
            epochs: 5,
            total_steps: None,
            warmup_fraction: 0.1,
            sequence_length: 16_384,
            packing: stage == Stage::Midtrain,
            optimizer: OptimizerKind::Sgd,
            max_grad_norm: 0.0,
            seed: 0,
            clip: ClipConfig::default(),
            rl: None,
            early_stop: None,
            max_new_tokens: 16_384,
        };
        match stage {
            Stage::Midtrain => Self { early_stop: Some(EarlyStop::default()), ..base },
            Stage::Sft => Self { sequence_length: 20_480, max_new_tokens: 20_480, ..base },
            Stage::Dpo => Self { learning_rate: 5e-7, epochs: 1, ..base },
            Stage::Rl => Self {
                learning_rate: 5e-7,
                epochs: 1,
                sequence_length: 25_000,
                max_new_tokens: 25_000,
                total_steps: Some(100),
                rl: Some(RlConfig::default()),
                ..base
            },
        }
    }

    /// Profile for the default tiny policy.
    pub fn desk(stage: Stage) -> Self {
        let full = Self::full_scale(stage);
        let base = Self {
            optimizer: OptimizerKind::Adam,
            max_grad_norm: 1.0,
            max_new_tokens: 160,
            ..full
        };
        match stage {
            Stage::Midtrain => Self { batch_size: 8, learning_rate: 1e-2, sequence_length: 256, ..base },
            Stage::Sft => Self { batch_size: 32, learning_rate: 3e-3, epochs: 3, sequence_length: 320, ..base },
            Stage::Dpo => Self {
                batch_size: 16,
                learning_rate: 1e-5,
                sequence_length: 256,
                clip: ClipConfig { dpo_beta: 1.0, ..ClipConfig::default() },
                ..base
            },
            Stage::Rl => Self {
                learning_rate: 1e-4,
                sequence_length: 320,
                total_steps: Some(480),
                warmup_fraction: 0.0,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{} stage: {m}", self.stage)));
        if self.packing != (self.stage == Stage::Midtrain) {
            return bad("packing is required for midtrain and forbidden otherwise".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup fraction {} outside [0, 1]", self.warmup_fraction));
        }
        if self.sequence_length == 0 || self.max_new_tokens == 0 {
            return bad("lengths must be positive".into());
        }
        if self.stage != Stage::Rl && (self.batch_size == 0 || self.epochs == 0) {
            return bad("batch size and epochs must be positive".into());
        }
        self.clip.validate()?;
        if self.stage == Stage::Rl {
            let Some(rl) = &self.rl else { return bad("missing [rl] section".into()) };
            if rl.group_size < 2 || rl.prompts_per_step == 0 || rl.updates_per_step == 0 {
                return bad("group_size >= 2, prompts_per_step >= 1 and updates_per_step >= 1".into());
            }
            if self.total_steps.unwrap_or(0) == 0 {
                return bad("total_steps must be positive".into());
            }
            rl.recipe.schedule(1).validate()?;
        }
        Ok(())
    }
}

/// Synthetic corpus and task-pool settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Questions sent to the teacher.
    pub train_tasks: usize,
    /// Sampling weights over the five difficulty levels.
    pub difficulty_weights: [f64; 5],
    pub teacher_error_rate: f64,
    pub rollouts_per_task: usize,
    /// Training examples kept after rejection sampling, at most.
    pub max_examples: usize,
    pub sft_min_difficulty: Difficulty,
    /// Cap on distinct questions in the fine-tuning subset (0 = no cap).
    pub sft_max_tasks: usize,
    pub pair_min_difficulty: Difficulty,
    pub max_pairs_per_task: usize,
    pub validation_tasks: usize,
    /// RL prompt pool size, drawn from `rl_difficulties`.
    pub rl_pool: usize,
    pub rl_difficulties: Vec<Difficulty>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_tasks: 6000,
            difficulty_weights: [0.3, 0.3, 0.25, 0.1, 0.05],
            teacher_error_rate: 0.3,
            rollouts_per_task: 8,
            max_examples: 50_000,
            sft_min_difficulty: Difficulty::College,
            sft_max_tasks: 0,
            pair_min_difficulty: Difficulty::HighSchool,
            max_pairs_per_task: 2,
            validation_tasks: 60,
            rl_pool: 400,
            rl_difficulties: vec![Difficulty::Middle, Difficulty::HighSchool],
        }
    }
}

/// Held-out evaluation suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Tasks per suite; suites are one per listed difficulty.
    pub tasks: usize,
    pub difficulties: Vec<Difficulty>,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            tasks: 200,
            difficulties: vec![Difficulty::Elementary, Difficulty::Middle, Difficulty::HighSchool],
            seed: 9_000_000,
        }
    }
}

/// A full four-stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub suite: SuiteConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub midtrain: StageConfig,
    pub sft: StageConfig,
    pub dpo: StageConfig,
    pub rl: StageConfig,
}

impl RunConfig {
    pub fn desk(seed: u64) -> Self {
        let stage = |s| StageConfig { seed, ..StageConfig::desk(s) };
        Self {
            seed,
            policy: PolicyConfig { layers: 2, ..PolicyConfig::default() },
            // At desk scale the upper levels are long chains only; a subset
            // without short problems never learns to stop on them. RL draws
            // from the harder levels, where the fine-tuned policy still fails.
            data: DataConfig {
                sft_min_difficulty: Difficulty::Elementary,
                rl_pool: 1000,
                rl_difficulties: vec![Difficulty::HighSchool, Difficulty::College],
                ..DataConfig::default()
            },
            suite: SuiteConfig::default(),
            eval: EvalConfig::default(),
            midtrain: stage(Stage::Midtrain),
            sft: stage(Stage::Sft),
            dpo: stage(Stage::Dpo),
            rl: stage(Stage::Rl),
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Midtrain => &self.midtrain,
            Stage::Sft => &self.sft,
            Stage::Dpo => &self.dpo,
            Stage::Rl => &self.rl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        for s in Stage::ALL {
            let c = self.stage(s);
            if c.stage != s {
                return Err(Error::Config(format!("[{s}] section declares stage {}", c.stage)));
            }
            c.validate()?;
        }
        self.eval.validate()?;
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.teacher_error_rate) || d.rollouts_per_task == 0 {
            return Err(Error::Config("teacher error rate in [0, 1] and rollouts_per_task >= 1".into()));
        }
        if d.difficulty_weights.iter().any(|w| *w < 0.0) || d.difficulty_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("difficulty weights must be non-negative and not all zero".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}
