//! Training objectives: masked causal-LM loss, preference loss, the clipped
//! surrogate with generalized advantage estimation, and the group-relative
//! objective with a KL penalty.
//!
//! Every objective has a `*_tape` builder used for gradients and a plain
//! evaluator. Log-probabilities inside objectives are always taken at
//! temperature 1.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::policy::{self, forward_logprobs, forward_tape, Layout, ParamVars, PolicyParameters};
use crate::rollout::{PreferencePair, Rollout, RolloutGroup};
use crate::vocab::TokenId;

/// Clipping, penalty and discount coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub epsilon: f64,
    pub beta_kl: f64,
    pub dpo_beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { epsilon: 0.2, beta_kl: 0.04, dpo_beta: 0.1, gamma: 1.0, lambda: 1.0 }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon > 0.0
            && self.beta_kl >= 0.0
            && self.dpo_beta > 0.0
            && (0.0..=1.0).contains(&self.gamma)
            && (0.0..=1.0).contains(&self.lambda);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("clip configuration out of range: {self:?}")))
        }
    }
}

/// One training row: tokens, document ids and the supervision mask.
///
/// `supervised[i]` marks token `i` as a prediction target (predicted from
/// position `i - 1`); position 0 is never a target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRow {
    pub tokens: Vec<TokenId>,
    pub segments: Vec<u32>,
    pub supervised: Vec<bool>,
}

impl SftRow {
    pub fn supervised_count(&self) -> usize {
        self.supervised.iter().skip(1).filter(|&&s| s).count()
    }

    fn targets(&self) -> (Vec<usize>, Vec<TokenId>) {
        (1..self.tokens.len())
            .filter(|&i| self.supervised[i])
            .map(|i| (i - 1, self.tokens[i]))
            .unzip()
    }
}

/// Mean negative log-likelihood over all supervised positions of a batch.
pub fn sft_loss_tape(
    tape: &mut Tape,
    params: &PolicyParameters,
    pv: &ParamVars,
    batch: &[SftRow],
) -> Result<Var> {
    let total: usize = batch.iter().map(SftRow::supervised_count).sum();
    if total == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut parts = Vec::with_capacity(batch.len());
    for row in batch {
        if row.segments.len() != row.tokens.len() || row.supervised.len() != row.tokens.len() {
            return Err(Error::LengthMismatch("row tokens, segments and mask differ in length".into()));
        }
        let (rows, targets) = row.targets();
        if rows.is_empty() {
            continue;
        }
        // Causal attention: positions after the last target cannot matter.
        let end = rows[rows.len() - 1] + 1;
        let layout = Layout::from_segments(&row.segments[..end]);
        let logits = forward_tape(tape, params, pv, &row.tokens[..end], &layout)?;
        let lp = tape.target_logprobs(logits, &rows, &targets, 1.0);
        parts.push(tape.sum(lp));
    }
    let all = tape.concat(&parts);
    let s = tape.sum(all);
    Ok(tape.scale(s, -1.0 / total as f64))
}

/// Loss and gradient of [`sft_loss_tape`].
pub fn sft_loss(params: &PolicyParameters, batch: &[SftRow]) -> Result<(f64, PolicyParameters)> {
    policy::gradient(params, |t, pv| sft_loss_tape(t, params, pv, batch))
}

/// `−ln σ(β (Δ_w − Δ_l))`.
pub fn dpo_loss_from_margins(delta_w: f64, delta_l: f64, beta: f64) -> f64 {
    -log_sigmoid(beta * (delta_w - delta_l))
}

/// Sequence log-probability of a rollout's completion under `params`.
pub fn sequence_logprob(params: &PolicyParameters, rollout: &Rollout) -> Result<f64> {
    Ok(forward_logprobs(params, &rollout.tokens, rollout.prompt_length, 1.0)?.iter().sum())
}

/// Reference sequence log-probabilities `(preferred, dispreferred)` per pair.
pub fn reference_logprobs(ref_params: &PolicyParameters, pairs: &[PreferencePair]) -> Result<Vec<(f64, f64)>> {
    pairs
        .iter()
        .map(|p| {
            p.check()?;
            Ok((sequence_logprob(ref_params, &p.preferred)?, sequence_logprob(ref_params, &p.dispreferred)?))
        })
        .collect()
}

/// Mean preference loss over `pairs`, with reference log-probabilities
/// precomputed by [`reference_logprobs`].
pub fn dpo_loss_tape(
    tape: &mut Tape,
    params: &PolicyParameters,
    pv: &ParamVars,
    pairs: &[PreferencePair],
    reference: &[(f64, f64)],
    beta: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if reference.len() != pairs.len() {
        return Err(Error::LengthMismatch("one reference entry per pair".into()));
    }
    let mut losses = Vec::with_capacity(pairs.len());
    for (pair, &(ref_w, ref_l)) in pairs.iter().zip(reference) {
        pair.check()?;
        let seq = |tape: &mut Tape, r: &Rollout| -> Result<Var> {
            let lp = policy::completion_logprobs_tape(tape, params, pv, &r.tokens, r.prompt_length, 1.0)?;
            Ok(tape.sum(lp))
        };
        let w = seq(tape, &pair.preferred)?;
        let l = seq(tape, &pair.dispreferred)?;
        let rw = tape.constant(Tensor::scalar(ref_w));
        let rl = tape.constant(Tensor::scalar(ref_l));
        let dw = tape.sub(w, rw);
        let dl = tape.sub(l, rl);
        let margin = tape.sub(dw, dl);
        let scaled = tape.scale(margin, beta);
        losses.push(tape.log_sigmoid(scaled));
    }
    let all = tape.concat(&losses);
    let s = tape.sum(all);
    Ok(tape.scale(s, -1.0 / pairs.len() as f64))
}

pub fn dpo_loss(
    params: &PolicyParameters,
    ref_params: &PolicyParameters,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<f64> {
    let reference = reference_logprobs(ref_params, pairs)?;
    policy::loss_value(params, |t, pv| dpo_loss_tape(t, params, pv, pairs, &reference, beta))
}

pub fn dpo_gradient(
    params: &PolicyParameters,
    pairs: &[PreferencePair],
    reference: &[(f64, f64)],
    beta: f64,
) -> Result<(f64, PolicyParameters)> {
    policy::gradient(params, |t, pv| dpo_loss_tape(t, params, pv, pairs, reference, beta))
}

/// Generalized advantage estimates by backward recursion:
/// `Â_t = δ_t + γλ Â_{t+1}` with `δ_t = R_t + γ V_{t+1} − V_t`.
pub fn gae_advantages(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::LengthMismatch(format!(
            "{} rewards need {} values, got {}",
            rewards.len(),
            rewards.len() + 1,
            values.len()
        )));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut next = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        next = delta + gamma * lambda * next;
        adv[t] = next;
    }
    Ok(adv)
}

/// `min(r Â, clip(r, 1−ε, 1+ε) Â)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage)
}

/// `exp(q − p) − (q − p) − 1` with `p = log π_θ`, `q = log π_ref`.
pub fn kl_k3(p: f64, q: f64) -> f64 {
    let d = q - p;
    d.exp() - d - 1.0
}

/// [`clipped_surrogate`] elementwise on a ratio column; row `i` uses
/// `advantages[i]`. Bit-identical to the scalar function.
pub fn surrogate_tape(tape: &mut Tape, ratio: Var, advantages: &[f64], epsilon: f64) -> Var {
    let unclipped = tape.scale_rows(ratio, advantages);
    let clipped = tape.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
    let clipped = tape.scale_rows(clipped, advantages);
    tape.min(unclipped, clipped)
}

/// [`kl_k3`] elementwise on columns `p` (differentiable) and `q`.
pub fn kl_k3_tape(tape: &mut Tape, p: Var, q: Var) -> Var {
    let d = tape.sub(q, p);
    let e = tape.exp(d);
    let k = tape.sub(e, d);
    tape.add_scalar(k, -1.0)
}

/// Per-token group-objective terms `min(r A, clip(r) A) − β k3` for one
/// sequence.
pub fn grpo_token_terms_tape(
    tape: &mut Tape,
    logprobs: Var,
    old_logprobs: &[f64],
    ref_logprobs: &[f64],
    advantage: f64,
    epsilon: f64,
    beta_kl: f64,
) -> Var {
    let n = old_logprobs.len();
    let old = tape.constant(Tensor::column(old_logprobs.to_vec()));
    let reference = tape.constant(Tensor::column(ref_logprobs.to_vec()));
    let diff = tape.sub(logprobs, old);
    let ratio = tape.exp(diff);
    let surrogate = surrogate_tape(tape, ratio, &vec![advantage; n], epsilon);
    let kl = kl_k3_tape(tape, logprobs, reference);
    let penalty = tape.scale(kl, beta_kl);
    tape.sub(surrogate, penalty)
}

/// One sequence with per-token advantages for the clipped surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoSequence {
    pub tokens: Vec<TokenId>,
    pub prompt_length: usize,
    pub advantages: Vec<f64>,
}

fn completion_len_check(tokens: usize, prompt_length: usize, n: usize) -> Result<()> {
    if prompt_length == 0 || prompt_length >= tokens || tokens - prompt_length != n {
        return Err(Error::LengthMismatch(format!(
            "completion of {} tokens with {n} per-token values",
            tokens.saturating_sub(prompt_length)
        )));
    }
    Ok(())
}

/// Token-mean clipped surrogate; `old_logprobs` per sequence at temperature 1.
pub fn ppo_objective_tape(
    tape: &mut Tape,
    params: &PolicyParameters,
    pv: &ParamVars,
    sequences: &[PpoSequence],
    old_logprobs: &[Vec<f64>],
    epsilon: f64,
) -> Result<Var> {
    if sequences.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut parts = Vec::with_capacity(sequences.len());
    let mut count = 0;
    for (s, old) in sequences.iter().zip(old_logprobs) {
        completion_len_check(s.tokens.len(), s.prompt_length, s.advantages.len())?;
        let lp = policy::completion_logprobs_tape(tape, params, pv, &s.tokens, s.prompt_length, 1.0)?;
        let old = tape.constant(Tensor::column(old.clone()));
        let diff = tape.sub(lp, old);
        let ratio = tape.exp(diff);
        let terms = surrogate_tape(tape, ratio, &s.advantages, epsilon);
        parts.push(tape.sum(terms));
        count += s.advantages.len();
    }
    let all = tape.concat(&parts);
    let s = tape.sum(all);
    Ok(tape.scale(s, 1.0 / count as f64))
}

pub fn ppo_objective(
    params: &PolicyParameters,
    old_params: &PolicyParameters,
    sequences: &[PpoSequence],
    epsilon: f64,
) -> Result<f64> {
    let old = sequences
        .iter()
        .map(|s| forward_logprobs(old_params, &s.tokens, s.prompt_length, 1.0))
        .collect::<Result<Vec<_>>>()?;
    policy::loss_value(params, |t, pv| ppo_objective_tape(t, params, pv, sequences, &old, epsilon))
}

/// `(R_i − mean) / std` with the population standard deviation.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::LengthMismatch("a group needs at least two rollouts".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::DegenerateGroup);
    }
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Everything the group objective needs besides the trainable policy.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
    pub old_logprobs: Vec<Vec<f64>>,
    pub ref_logprobs: Vec<Vec<f64>>,
}

impl GroupBatch {
    /// Computes advantages and the frozen log-probabilities for a group.
    pub fn prepare(
        group: &RolloutGroup,
        old_params: &PolicyParameters,
        ref_params: &PolicyParameters,
    ) -> Result<Self> {
        let advantages = grpo_advantages(&group.rewards())?;
        let lp = |p: &PolicyParameters| {
            group
                .rollouts
                .iter()
                .map(|r| forward_logprobs(p, &r.tokens, r.prompt_length, 1.0))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            rollouts: group.rollouts.clone(),
            advantages,
            old_logprobs: lp(old_params)?,
            ref_logprobs: lp(ref_params)?,
        })
    }
}

/// Group mean of per-sequence token means of [`grpo_token_terms_tape`].
pub fn grpo_objective_tape(
    tape: &mut Tape,
    params: &PolicyParameters,
    pv: &ParamVars,
    batch: &GroupBatch,
    epsilon: f64,
    beta_kl: f64,
) -> Result<Var> {
    let g = batch.rollouts.len();
    if g < 2 {
        return Err(Error::LengthMismatch("a group needs at least two rollouts".into()));
    }
    let mut parts = Vec::with_capacity(g);
    for (i, r) in batch.rollouts.iter().enumerate() {
        completion_len_check(r.tokens.len(), r.prompt_length, batch.old_logprobs[i].len())?;
        let lp = policy::completion_logprobs_tape(tape, params, pv, &r.tokens, r.prompt_length, 1.0)?;
        let terms = grpo_token_terms_tape(
            tape,
            lp,
            &batch.old_logprobs[i],
            &batch.ref_logprobs[i],
            batch.advantages[i],
            epsilon,
            beta_kl,
        );
        parts.push(tape.mean(terms));
    }
    let all = tape.concat(&parts);
    Ok(tape.mean(all))
}

pub fn grpo_objective(
    params: &PolicyParameters,
    old_params: &PolicyParameters,
    ref_params: &PolicyParameters,
    group: &RolloutGroup,
    epsilon: f64,
    beta_kl: f64,
) -> Result<f64> {
    let batch = GroupBatch::prepare(group, old_params, ref_params)?;
    policy::loss_value(params, |t, pv| grpo_objective_tape(t, params, pv, &batch, epsilon, beta_kl))
}

/// Gradient of the mean group objective over several groups.
pub fn grpo_gradient(
    params: &PolicyParameters,
    batches: &[GroupBatch],
    epsilon: f64,
    beta_kl: f64,
) -> Result<(f64, PolicyParameters)> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch);
    }
    policy::gradient(params, |t, pv| {
        let parts = batches
            .iter()
            .map(|b| grpo_objective_tape(t, params, pv, b, epsilon, beta_kl))
            .collect::<Result<Vec<_>>>()?;
        let all = t.concat(&parts);
        Ok(t.mean(all))
    })
}
