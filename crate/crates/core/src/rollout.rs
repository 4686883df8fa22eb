//! Scored policy samples and the groups and pairs built from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::SampledSequence;
use crate::task::{Difficulty, TaskInstance};
use crate::verifier::{self, VerifiedBy};
use crate::vocab::{TokenId, Vocabulary};

/// One sampled response with its verified reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub id: u64,
    pub task_id: String,
    /// Prompt followed by the completion.
    pub tokens: Vec<TokenId>,
    pub prompt_length: usize,
    /// Sampling-time log-probabilities, one per completion token.
    pub logprobs: Vec<f64>,
    pub answer: Option<String>,
    pub reward: i8,
    pub verified_by: VerifiedBy,
}

impl Rollout {
    /// Scores a sampled sequence against the task's ground truth.
    pub fn score(
        id: u64,
        task: &TaskInstance,
        sample: SampledSequence,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let symbols = vocab.decode(sample.completion())?;
        let record = verifier::reward(&id.to_string(), &symbols, &task.ground_truth)?;
        Ok(Self {
            id,
            task_id: task.id.clone(),
            answer: verifier::extract_final_answer(&symbols),
            tokens: sample.tokens,
            prompt_length: sample.prompt_length,
            logprobs: sample.logprobs,
            reward: record.reward,
            verified_by: record.verified_by,
        })
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.prompt_length]
    }

    pub fn completion(&self) -> &[TokenId] {
        &self.tokens[self.prompt_length..]
    }

    pub fn length(&self) -> usize {
        self.tokens.len() - self.prompt_length
    }

    pub fn is_positive(&self) -> bool {
        self.reward > 0
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl LengthStats {
    pub fn of(lengths: impl IntoIterator<Item = usize>) -> Self {
        let v: Vec<f64> = lengths.into_iter().map(|l| l as f64).collect();
        if v.is_empty() {
            return Self { mean: 0.0, std: 0.0, count: 0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), count: v.len() }
    }

    /// Coefficient of variation, `std / mean`.
    pub fn cv(&self) -> f64 {
        self.std / self.mean
    }
}

/// The rollouts sampled for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn new(prompt_id: impl Into<String>, rollouts: Vec<Rollout>) -> Self {
        Self { prompt_id: prompt_id.into(), rollouts }
    }

    pub fn size(&self) -> usize {
        self.rollouts.len()
    }

    pub fn positives(&self) -> usize {
        self.rollouts.iter().filter(|r| r.is_positive()).count()
    }

    /// Fraction of rollouts with reward +1; zero for an empty group.
    pub fn group_accuracy(&self) -> f64 {
        if self.rollouts.is_empty() {
            return 0.0;
        }
        self.positives() as f64 / self.rollouts.len() as f64
    }

    /// Completion-length statistics over positive rollouts only.
    pub fn length_stats(&self) -> LengthStats {
        LengthStats::of(self.rollouts.iter().filter(|r| r.is_positive()).map(Rollout::length))
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| f64::from(r.reward)).collect()
    }
}

/// A verified-correct and a verified-wrong response to the same prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<TokenId>,
    pub preferred: Rollout,
    pub dispreferred: Rollout,
    pub difficulty: Difficulty,
}

impl PreferencePair {
    pub fn check(&self) -> Result<()> {
        if self.preferred.prompt() != self.prompt.as_slice()
            || self.dispreferred.prompt() != self.prompt.as_slice()
        {
            return Err(Error::PromptMismatch);
        }
        Ok(())
    }
}
