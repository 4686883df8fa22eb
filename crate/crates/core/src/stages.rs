//! The stage loop: distillation (packed and non-packed), rollout preference
//! learning, and group-relative RL with the recipe filters.
//!
//! Every stage is a pure function of its configuration, input checkpoint and
//! data; re-running it reproduces losses and checkpoint bytes exactly.

use std::fs::OpenOptions;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Stage, StageConfig};
use crate::data::{pack_batches, Document};
use crate::error::{Error, Result};
use crate::eval::{consensus_at_k_pool, pass_at_k_pool, sample_pool, EvalConfig};
use crate::objectives::{dpo_gradient, grpo_gradient, reference_logprobs, sft_loss, GroupBatch, SftRow};
use crate::optim::{clip_grad_norm, warmup_lr, Optimizer};
use crate::policy::{sample, PolicyParameters};
use crate::recipe::{
    accuracy_filter, anneal_temperature, dapo_filter, prompt_variance_filter, rebalance_group, Decision,
};
use crate::rollout::{PreferencePair, Rollout, RolloutGroup};
use crate::seed;
use crate::task::TaskInstance;

/// One optimizer step of one stage. Optional fields are empty outside RL or
/// when no evaluation ran at that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRunRecord {
    pub stage: Stage,
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub grad_norm: f64,
    pub temperature: Option<f64>,
    /// Mean pre-filter accuracy of the sampled groups.
    pub group_accuracy: Option<f64>,
    /// Mean completion length of all sampled rollouts.
    pub mean_length: Option<f64>,
    pub groups_sampled: Option<usize>,
    pub groups_kept: Option<usize>,
    pub rollouts_sampled: Option<usize>,
    pub rollouts_used: Option<usize>,
    /// Per group, `positives/size:keep|drop`, separated by `;`.
    pub group_decisions: Option<String>,
    /// Validation pass@1 (distillation) or held-out cons@k (RL).
    pub eval_metric: Option<f64>,
    pub checkpoint: String,
}

/// Training data of one stage.
#[derive(Debug, Clone, Copy)]
pub enum StageData<'a> {
    /// Midtrain and SFT.
    Documents(&'a [Document]),
    Pairs(&'a [PreferencePair]),
    /// RL prompt pool, before prompt filtering.
    Prompts(&'a [TaskInstance]),
}

/// Side inputs and outputs of a stage run.
#[derive(Debug, Clone, Default)]
pub struct StageOptions<'a> {
    /// Validation tasks for the early-stop rule.
    pub validation: Option<&'a [TaskInstance]>,
    /// Held-out tasks and `k` for the RL consensus curve.
    pub consensus: Option<(&'a [TaskInstance], usize)>,
    /// Sampling settings for validation and the consensus curve.
    pub eval: EvalConfig,
    /// Run even if the input lacks the preceding stage's marker.
    pub allow_out_of_order: bool,
    /// Final (or, on abort, last good) checkpoint.
    pub output: Option<&'a Path>,
    /// Metrics table, one row appended per step.
    pub metrics: Option<&'a Path>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub records: Vec<TrainingRunRecord>,
    /// `(step, metric)` for every evaluation, including the final state.
    pub curve: Vec<(usize, f64)>,
    pub stopped_early: bool,
    /// RL prompts surviving the length-uniformity probe.
    pub prompts_kept: Option<usize>,
}

pub fn run_stage(
    config: &StageConfig,
    input: &Checkpoint,
    data: StageData<'_>,
    opts: &StageOptions<'_>,
) -> Result<StageOutput> {
    config.validate()?;
    if let Some(pre) = config.stage.prerequisite() {
        if !opts.allow_out_of_order && !input.has_stage(pre) {
            return Err(Error::Config(format!(
                "{} stage needs a checkpoint that completed {pre}; pass the override to skip",
                config.stage
            )));
        }
    }
    let mut run = Runner::new(config, input, opts);
    let outcome = match (config.stage, data) {
        (Stage::Midtrain | Stage::Sft, StageData::Documents(docs)) => run.distill(docs),
        (Stage::Dpo, StageData::Pairs(pairs)) => run.preference(pairs),
        (Stage::Rl, StageData::Prompts(prompts)) => run.reinforce(prompts),
        (s, _) => return Err(Error::Config(format!("wrong data kind for the {s} stage"))),
    };
    match outcome {
        Ok(()) => {
            let mut checkpoint = Checkpoint { params: run.params, stages: input.stages.clone() };
            if !checkpoint.has_stage(config.stage) {
                checkpoint.stages.push(config.stage);
            }
            if let Some(path) = opts.output {
                checkpoint.save(path)?;
            }
            Ok(StageOutput {
                checkpoint,
                records: run.records,
                curve: run.curve,
                stopped_early: run.stopped_early,
                prompts_kept: run.prompts_kept,
            })
        }
        Err(e) => {
            if matches!(e, Error::NonFiniteLoss(_)) {
                if let Some(path) = opts.output {
                    // No stage marker: the stage did not complete.
                    Checkpoint { params: run.params, stages: input.stages.clone() }.save(path)?;
                }
            }
            Err(e)
        }
    }
}

struct Runner<'a> {
    config: &'a StageConfig,
    opts: &'a StageOptions<'a>,
    reference: &'a PolicyParameters,
    /// Always the last parameters with a finite loss.
    params: PolicyParameters,
    optimizer: Optimizer,
    records: Vec<TrainingRunRecord>,
    curve: Vec<(usize, f64)>,
    stopped_early: bool,
    prompts_kept: Option<usize>,
}

impl<'a> Runner<'a> {
    fn new(config: &'a StageConfig, input: &'a Checkpoint, opts: &'a StageOptions<'a>) -> Self {
        Self {
            config,
            opts,
            reference: &input.params,
            params: input.params.clone(),
            optimizer: Optimizer::new(config.optimizer),
            records: Vec::new(),
            curve: Vec::new(),
            stopped_early: false,
            prompts_kept: None,
        }
    }

    fn checkpoint_ref(&self) -> String {
        self.opts.output.map(|p| p.display().to_string()).unwrap_or_default()
    }

    fn record(&self, step: usize, loss: f64, learning_rate: f64, grad_norm: f64) -> TrainingRunRecord {
        TrainingRunRecord {
            stage: self.config.stage,
            step,
            loss,
            learning_rate,
            grad_norm,
            temperature: None,
            group_accuracy: None,
            mean_length: None,
            groups_sampled: None,
            groups_kept: None,
            rollouts_sampled: None,
            rollouts_used: None,
            group_decisions: None,
            eval_metric: None,
            checkpoint: self.checkpoint_ref(),
        }
    }

    fn push(&mut self, record: TrainingRunRecord) -> Result<()> {
        if let Some(path) = self.opts.metrics {
            append_metrics(path, std::slice::from_ref(&record))?;
        }
        self.records.push(record);
        Ok(())
    }

    /// Descends along `grad` (the gradient of `loss`). Leaves the
    /// parameters untouched and fails if the loss or the result is not finite.
    fn update(&mut self, loss: f64, mut grad: PolicyParameters, step: usize, total: usize) -> Result<(f64, f64)> {
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }
        let norm = clip_grad_norm(&mut grad, self.config.max_grad_norm);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }
        let lr = warmup_lr(self.config.learning_rate, step, total, self.config.warmup_fraction);
        let mut next = self.params.clone();
        self.optimizer.step(&mut next, &grad, lr);
        if !next.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }
        self.params = next;
        Ok((lr, norm))
    }

    fn shuffled(&self, n: usize, pass: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(&[0x5EED, self.config.seed, pass as u64]));
        order
    }

    fn validation_pass1(&self, tasks: &[TaskInstance]) -> Result<f64> {
        let e = EvalConfig { k: 1, ..self.opts.eval };
        pass_at_k_pool(&sample_pool(&self.params, tasks, 1, &e, e.seed)?, 1)
    }

    fn distill(&mut self, docs: &[Document]) -> Result<()> {
        if docs.is_empty() {
            return Err(Error::MissingInput(format!("{} stage has no training documents", self.config.stage)));
        }
        let c = self.config;
        let rows = pack_batches(docs, c.sequence_length, c.packing, self.params.vocab())?.rows;
        let per_epoch = rows.len().div_ceil(c.batch_size);
        let total = per_epoch * c.epochs;
        let early = c.early_stop.filter(|_| self.opts.validation.is_some());
        let eval_every = early.map(|e| if e.every_steps == 0 { per_epoch } else { e.every_steps });
        let (mut best, mut stale) = (f64::NEG_INFINITY, 0);
        let mut step = 0;
        'epochs: for epoch in 0..c.epochs {
            let order = self.shuffled(rows.len(), epoch);
            for chunk in order.chunks(c.batch_size) {
                let batch: Vec<SftRow> = chunk.iter().map(|&i| rows[i].clone()).collect();
                let (loss, grad) = match sft_loss(&self.params, &batch) {
                    Err(Error::EmptyBatch) => {
                        step += 1;
                        continue;
                    }
                    r => r?,
                };
                let (lr, norm) = self.update(loss, grad, step, total)?;
                let mut rec = self.record(step, loss, lr, norm);
                step += 1;
                if let (Some(e), Some(every)) = (early, eval_every) {
                    if step % every == 0 {
                        let v = self.validation_pass1(self.opts.validation.expect("checked"))?;
                        rec.eval_metric = Some(v);
                        self.curve.push((step, v));
                        if v >= best + e.min_delta_points / 100.0 {
                            best = best.max(v);
                            stale = 0;
                        } else {
                            best = best.max(v);
                            stale += 1;
                        }
                        if stale >= e.patience {
                            self.push(rec)?;
                            self.stopped_early = true;
                            break 'epochs;
                        }
                    }
                }
                self.push(rec)?;
            }
        }
        Ok(())
    }

    fn preference(&mut self, pairs: &[PreferencePair]) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::MissingInput("dpo stage has no preference pairs".into()));
        }
        let c = self.config;
        let reference = reference_logprobs(self.reference, pairs)?;
        let per_epoch = pairs.len().div_ceil(c.batch_size);
        let total = per_epoch * c.epochs;
        let mut step = 0;
        for epoch in 0..c.epochs {
            let order = self.shuffled(pairs.len(), epoch);
            for chunk in order.chunks(c.batch_size) {
                let batch: Vec<PreferencePair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
                let refs: Vec<(f64, f64)> = chunk.iter().map(|&i| reference[i]).collect();
                let (loss, grad) = dpo_gradient(&self.params, &batch, &refs, c.clip.dpo_beta)?;
                let (lr, norm) = self.update(loss, grad, step, total)?;
                let rec = self.record(step, loss, lr, norm);
                self.push(rec)?;
                step += 1;
            }
        }
        Ok(())
    }

    fn sample_group(
        &self,
        task: &TaskInstance,
        temperature: f64,
        count: usize,
        first_id: usize,
        key: &[u64],
    ) -> Result<Vec<Rollout>> {
        let vocab = self.params.vocab();
        let prompt = vocab.encode(&task.prompt)?;
        (first_id..first_id + count)
            .map(|j| {
                let mut k = key.to_vec();
                k.push(j as u64);
                let seq = sample(
                    &self.params,
                    &prompt,
                    temperature,
                    self.opts.eval.top_p,
                    self.config.max_new_tokens,
                    seed::derive(&k),
                )?;
                Rollout::score(j as u64, task, seq, vocab)
            })
            .collect()
    }

    fn consensus(&self) -> Result<Option<f64>> {
        let Some((tasks, k)) = self.opts.consensus else { return Ok(None) };
        let e = EvalConfig { k, ..self.opts.eval };
        Ok(Some(consensus_at_k_pool(&sample_pool(&self.params, tasks, k, &e, e.seed)?, k)?))
    }

    fn reinforce(&mut self, pool: &[TaskInstance]) -> Result<()> {
        let c = self.config;
        let rl = c.rl.expect("validated");
        let recipe = rl.recipe;
        let total = c.total_steps.expect("validated");
        let schedule = recipe.schedule(total);
        if pool.is_empty() {
            return Err(Error::MissingInput("rl stage has an empty prompt pool".into()));
        }

        // Prompt optimization: probe each prompt and keep those whose
        // correct completions have uniform length.
        let mut prompts = Vec::new();
        for (i, task) in pool.iter().enumerate() {
            let probes = (0..recipe.probe_rounds)
                .map(|round| {
                    let key = [c.seed, 0x9B0E, i as u64, round as u64];
                    Ok(RolloutGroup::new(task.id.clone(), self.sample_group(task, recipe.t_start, rl.group_size, 0, &key)?))
                })
                .collect::<Result<Vec<_>>>()?;
            if prompt_variance_filter(&probes, recipe.cv_threshold).keep() {
                prompts.push(task);
            }
        }
        self.prompts_kept = Some(prompts.len());
        if prompts.is_empty() {
            return Err(Error::MissingInput("no rl prompt survived the length-uniformity filter".into()));
        }

        let mut order = Vec::new();
        let mut cursor = 0;
        for step in 0..total {
            let eval_metric = if step == 0 || (rl.eval_every > 0 && step % rl.eval_every == 0) {
                let v = self.consensus()?;
                if let Some(v) = v {
                    self.curve.push((step, v));
                }
                v
            } else {
                None
            };
            let temperature = anneal_temperature(step, &schedule)?;
            let mut sampled = 0;
            let mut lengths = 0usize;
            let mut accuracy = 0.0;
            let mut decisions = Vec::new();
            let mut kept = Vec::new();
            for slot in 0..rl.prompts_per_step {
                if cursor == order.len() {
                    order = self.shuffled(prompts.len(), step * rl.prompts_per_step + slot);
                    cursor = 0;
                }
                let task = prompts[order[cursor]];
                cursor += 1;
                let key = [c.seed, 0x57E9, step as u64, slot as u64];
                let mut rollouts = self.sample_group(task, temperature, rl.group_size, 0, &key)?;
                if !recipe.baseline {
                    // Oversample prompts with no correct rollout, up to the cap.
                    while !rollouts.iter().any(Rollout::is_positive) && rollouts.len() < recipe.oversample_cap {
                        let n = rl.group_size.min(recipe.oversample_cap - rollouts.len());
                        rollouts.extend(self.sample_group(task, temperature, n, rollouts.len(), &key)?);
                    }
                }
                let group = RolloutGroup::new(task.id.clone(), rollouts);
                sampled += group.size();
                lengths += group.rollouts.iter().map(Rollout::length).sum::<usize>();
                accuracy += group.group_accuracy();
                let chosen = if recipe.baseline {
                    (dapo_filter(&group) == Decision::Keep).then(|| group.clone())
                } else if accuracy_filter(&group, recipe.accuracy_threshold).keep() {
                    match rebalance_group(&group, seed::derive(&[c.seed, step as u64, slot as u64])) {
                        Ok(g) => Some(g),
                        Err(Error::PromptUnusable) => None,
                        Err(e) => return Err(e),
                    }
                } else {
                    None
                };
                let batch = match chosen {
                    Some(g) => match GroupBatch::prepare(&g, &self.params, self.reference) {
                        Ok(b) => Some(b),
                        Err(Error::DegenerateGroup) => None,
                        Err(e) => return Err(e),
                    },
                    None => None,
                };
                decisions.push(format!(
                    "{}/{}:{}",
                    group.positives(),
                    group.size(),
                    if batch.is_some() { "keep" } else { "drop" }
                ));
                kept.extend(batch);
            }
            let groups = rl.prompts_per_step;
            let used: usize = kept.iter().map(|b| b.rollouts.len()).sum();
            let (mut loss, mut lr, mut norm) = (0.0, 0.0, 0.0);
            if !kept.is_empty() {
                for _ in 0..rl.updates_per_step {
                    let (objective, grad) = grpo_gradient(&self.params, &kept, c.clip.epsilon, c.clip.beta_kl)?;
                    let mut descent = grad.zeros_like();
                    descent.add_scaled(&grad, -1.0);
                    loss = -objective;
                    (lr, norm) = self.update(loss, descent, step, total)?;
                }
            }
            let mut rec = self.record(step, loss, lr, norm);
            rec.temperature = Some(temperature);
            rec.group_accuracy = Some(accuracy / groups as f64);
            rec.mean_length = Some(lengths as f64 / sampled as f64);
            rec.groups_sampled = Some(groups);
            rec.groups_kept = Some(kept.len());
            rec.rollouts_sampled = Some(sampled);
            rec.rollouts_used = Some(used);
            rec.group_decisions = Some(decisions.join(";"));
            rec.eval_metric = eval_metric;
            self.push(rec)?;
        }
        if let Some(v) = self.consensus()? {
            self.curve.push((total, v));
        }
        Ok(())
    }
}

/// Appends records to a metrics table, writing the header if the file is new.
pub fn append_metrics(path: impl AsRef<Path>, records: &[TrainingRunRecord]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in records {
        w.serialize(r).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a metrics table back.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<TrainingRunRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| Error::Record { line: i + 2, message: e.to_string() }))
        .collect()
}
