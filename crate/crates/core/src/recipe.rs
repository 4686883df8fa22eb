//! Stabilizers for group-relative RL: prompt selection by length
//! uniformity, reward rebalancing with an accuracy filter, and temperature
//! annealing — plus the 0/1-accuracy filter used as a baseline.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::{LengthStats, Rollout, RolloutGroup};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Keep,
    Drop,
}

impl Decision {
    pub fn keep(self) -> bool {
        self == Decision::Keep
    }

    fn from_keep(keep: bool) -> Self {
        if keep {
            Decision::Keep
        } else {
            Decision::Drop
        }
    }
}

/// Linear decay from `t_start` to `t_end` over the first
/// `anneal_fraction · total_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub t_start: f64,
    pub t_end: f64,
    pub anneal_fraction: f64,
    pub total_steps: usize,
}

impl AnnealSchedule {
    pub fn new(total_steps: usize) -> Self {
        Self { t_start: 1.0, t_end: 0.6, anneal_fraction: 0.5, total_steps }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_start >= self.t_end
            && self.t_end > 0.0
            && self.anneal_fraction > 0.0
            && self.anneal_fraction <= 1.0
        {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid anneal schedule {self:?}")))
        }
    }
}

pub fn anneal_temperature(step: usize, schedule: &AnnealSchedule) -> Result<f64> {
    schedule.validate()?;
    if step > schedule.total_steps {
        return Err(Error::StepOutOfRange { step, total: schedule.total_steps });
    }
    let knee = schedule.anneal_fraction * schedule.total_steps as f64;
    let s = step as f64;
    if s >= knee {
        return Ok(schedule.t_end);
    }
    Ok(schedule.t_start + (schedule.t_end - schedule.t_start) * (s / knee))
}

/// Keep iff the coefficient of variation of positive completion lengths,
/// pooled over all probe groups, is at most `cv_threshold`. Prompts without
/// any positive rollout are dropped.
pub fn prompt_variance_filter(probe_groups: &[RolloutGroup], cv_threshold: f64) -> Decision {
    let stats = LengthStats::of(
        probe_groups
            .iter()
            .flat_map(|g| g.rollouts.iter())
            .filter(|r| r.is_positive())
            .map(Rollout::length),
    );
    if stats.count == 0 {
        return Decision::Drop;
    }
    Decision::from_keep(stats.cv() <= cv_threshold)
}

/// All positives plus `min(P, N)` negatives drawn uniformly without
/// replacement. Input order is preserved in the output.
pub fn rebalance_group(group: &RolloutGroup, seed: u64) -> Result<RolloutGroup> {
    let (pos, neg): (Vec<usize>, Vec<usize>) =
        (0..group.rollouts.len()).partition(|&i| group.rollouts[i].is_positive());
    if pos.is_empty() {
        return Err(Error::PromptUnusable);
    }
    let take = pos.len().min(neg.len());
    let mut rng = seed::rng(&[0xBA1A, seed]);
    let mut keep = pos;
    keep.extend(index::sample(&mut rng, neg.len(), take).into_iter().map(|k| neg[k]));
    keep.sort_unstable();
    Ok(RolloutGroup::new(
        group.prompt_id.clone(),
        keep.into_iter().map(|i| group.rollouts[i].clone()).collect(),
    ))
}

/// Drop iff the (pre-rebalancing) group accuracy strictly exceeds `threshold`.
pub fn accuracy_filter(group: &RolloutGroup, threshold: f64) -> Decision {
    Decision::from_keep(group.group_accuracy() <= threshold)
}

/// Drop iff group accuracy is exactly 0 or 1.
pub fn dapo_filter(group: &RolloutGroup) -> Decision {
    let p = group.positives();
    Decision::from_keep(p != 0 && p != group.size())
}

/// Recipe knobs of the RL stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecipeConfig {
    pub cv_threshold: f64,
    pub accuracy_threshold: f64,
    /// Total rollouts a prompt may receive while searching for a positive.
    pub oversample_cap: usize,
    /// Sampling rounds used to probe each prompt for length uniformity.
    pub probe_rounds: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub anneal_fraction: f64,
    /// Replace accuracy filter and rebalancing with the 0/1 filter.
    pub baseline: bool,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        Self {
            cv_threshold: 0.35,
            accuracy_threshold: 0.5,
            oversample_cap: 128,
            probe_rounds: 2,
            t_start: 1.0,
            t_end: 0.6,
            anneal_fraction: 0.5,
            baseline: false,
        }
    }
}

impl RecipeConfig {
    pub fn schedule(&self, total_steps: usize) -> AnnealSchedule {
        AnnealSchedule {
            t_start: self.t_start,
            t_end: self.t_end,
            anneal_fraction: self.anneal_fraction,
            total_steps,
        }
    }
}
