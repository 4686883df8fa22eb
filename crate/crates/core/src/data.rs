//! Data curation: rejection sampling from the teacher, preference-pair
//! mining from rejected traces, and packed / non-packed batching.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::SftRow;
use crate::rollout::{PreferencePair, Rollout};
use crate::seed;
use crate::task::{teacher_rollout, Difficulty, TaskInstance, TeacherTrace};
use crate::verifier::VerifiedBy;
use crate::vocab::{TokenId, Vocabulary};

/// Default teacher samples per question.
pub const ROLLOUTS_PER_TASK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherParams {
    pub error_rate: f64,
    pub seed: u64,
}

/// A question with one teacher trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub task: TaskInstance,
    pub trace: TeacherTrace,
}

impl CorpusEntry {
    /// Prompt and completion token ids.
    pub fn encode(&self, vocab: &Vocabulary) -> Result<(Vec<TokenId>, usize)> {
        let mut ids = vocab.encode(&self.task.prompt)?;
        let prompt_length = ids.len();
        ids.extend(vocab.encode(&self.trace.tokens)?);
        Ok((ids, prompt_length))
    }

    /// As a scored rollout; teacher rollouts carry no log-probabilities.
    pub fn to_rollout(&self, id: u64, vocab: &Vocabulary) -> Result<Rollout> {
        let (tokens, prompt_length) = self.encode(vocab)?;
        Ok(Rollout {
            id,
            task_id: self.task.id.clone(),
            tokens,
            prompt_length,
            logprobs: Vec::new(),
            answer: Some(self.trace.stated_answer.clone()),
            reward: if self.trace.is_correct { 1 } else { -1 },
            verified_by: VerifiedBy::Primary,
        })
    }
}

/// Verified-correct traces for training and the rejects kept for pair mining.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub retained: Vec<CorpusEntry>,
    pub rejected: Vec<CorpusEntry>,
}

/// Samples `rollouts_per_task` teacher traces per task and splits them by
/// verified correctness. Output order follows task order, then sample order.
pub fn rejection_sample_dataset(
    tasks: &[TaskInstance],
    teacher: TeacherParams,
    rollouts_per_task: usize,
) -> Result<Corpus> {
    if rollouts_per_task == 0 {
        return Err(Error::Config("rollouts_per_task must be at least 1".into()));
    }
    let mut corpus = Corpus::default();
    for (i, task) in tasks.iter().enumerate() {
        for k in 0..rollouts_per_task {
            let s = seed::derive(&[teacher.seed, i as u64, k as u64]);
            let trace = teacher_rollout(task, teacher.error_rate, s)?;
            let entry = CorpusEntry { task: task.clone(), trace };
            if entry.trace.is_correct {
                corpus.retained.push(entry);
            } else {
                corpus.rejected.push(entry);
            }
        }
    }
    Ok(corpus)
}

/// All scored rollouts of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRollouts {
    pub task: TaskInstance,
    pub rollouts: Vec<Rollout>,
}

/// Groups a corpus by task, in first-appearance order, as rollouts with
/// sequential ids.
pub fn group_corpus(corpus: &Corpus, vocab: &Vocabulary) -> Result<Vec<TaskRollouts>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_task: BTreeMap<String, TaskRollouts> = BTreeMap::new();
    let mut next_id = 0;
    for entry in corpus.retained.iter().chain(&corpus.rejected) {
        let slot = by_task.entry(entry.task.id.clone()).or_insert_with(|| {
            order.push(entry.task.id.clone());
            TaskRollouts { task: entry.task.clone(), rollouts: Vec::new() }
        });
        slot.rollouts.push(entry.to_rollout(next_id, vocab)?);
        next_id += 1;
    }
    Ok(order.into_iter().map(|id| by_task.remove(&id).expect("grouped task")).collect())
}

/// Pairs each correct rollout with a distinct incorrect one of the closest
/// completion length (ties go to the earlier rollout), for tasks at or
/// above `min_difficulty`, at most `max_pairs_per_task` per task.
pub fn build_preference_pairs(
    tasks: &[TaskRollouts],
    min_difficulty: Difficulty,
    max_pairs_per_task: usize,
) -> Vec<PreferencePair> {
    let mut pairs = Vec::new();
    for t in tasks {
        if t.task.difficulty < min_difficulty {
            continue;
        }
        let mut wrong: Vec<&Rollout> = t.rollouts.iter().filter(|r| r.reward < 0).collect();
        let mut made = 0;
        for good in t.rollouts.iter().filter(|r| r.reward > 0) {
            if made == max_pairs_per_task || wrong.is_empty() {
                break;
            }
            let j = (0..wrong.len())
                .min_by_key(|&j| wrong[j].length().abs_diff(good.length()))
                .expect("non-empty");
            let bad = wrong.remove(j);
            pairs.push(PreferencePair {
                prompt: good.prompt().to_vec(),
                preferred: good.clone(),
                dispreferred: bad.clone(),
                difficulty: t.task.difficulty,
            });
            made += 1;
        }
    }
    pairs
}

/// One training document: prompt plus completion ending in the end marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub tokens: Vec<TokenId>,
    pub prompt_length: usize,
}

impl Document {
    pub fn from_entry(entry: &CorpusEntry, vocab: &Vocabulary) -> Result<Self> {
        let (tokens, prompt_length) = entry.encode(vocab)?;
        Ok(Self { tokens, prompt_length })
    }
}

/// Batched rows and their fill ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatches {
    pub rows: Vec<SftRow>,
    /// Non-pad tokens over total row capacity.
    pub utilization: f64,
}

/// Segment id given to padding.
pub const PAD_SEGMENT: u32 = u32::MAX;

/// Lays documents out in rows of `sequence_length` tokens.
///
/// With `packing`, documents are placed greedily first-fit in corpus order;
/// each document's closing end marker is replaced by the boundary marker and
/// left unsupervised, so the model never learns to stop. Without packing
/// every document gets its own row and the end marker is supervised. Only
/// completion tokens are supervised; prompts and padding never are, and
/// attention never crosses a document boundary.
pub fn pack_batches(
    docs: &[Document],
    sequence_length: usize,
    packing: bool,
    vocab: &Vocabulary,
) -> Result<PackedBatches> {
    let mut bins: Vec<Vec<usize>> = Vec::new();
    let mut used: Vec<usize> = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if d.tokens.len() > sequence_length {
            return Err(Error::ExampleTooLong { length: d.tokens.len(), capacity: sequence_length });
        }
        let slot = if packing {
            used.iter().position(|&u| u + d.tokens.len() <= sequence_length)
        } else {
            None
        };
        match slot {
            Some(b) => {
                bins[b].push(i);
                used[b] += d.tokens.len();
            }
            None => {
                bins.push(vec![i]);
                used.push(d.tokens.len());
            }
        }
    }
    let (eos, sep, pad) = (vocab.eos(), vocab.sep(), vocab.pad());
    let mut rows = Vec::with_capacity(bins.len());
    for bin in &bins {
        let mut row = SftRow {
            tokens: Vec::with_capacity(sequence_length),
            segments: Vec::with_capacity(sequence_length),
            supervised: Vec::with_capacity(sequence_length),
        };
        for (seg, &i) in bin.iter().enumerate() {
            let d = &docs[i];
            let last = d.tokens.len() - 1;
            for (k, &t) in d.tokens.iter().enumerate() {
                let boundary = packing && k == last && t == eos;
                row.tokens.push(if boundary { sep } else { t });
                row.segments.push(seg as u32);
                row.supervised.push(k >= d.prompt_length.max(1) && !boundary);
            }
        }
        while row.tokens.len() < sequence_length {
            row.tokens.push(pad);
            row.segments.push(PAD_SEGMENT);
            row.supervised.push(false);
        }
        rows.push(row);
    }
    let filled: usize = used.iter().sum();
    let capacity = rows.len() * sequence_length;
    let utilization = if capacity == 0 { 0.0 } else { filled as f64 / capacity as f64 };
    Ok(PackedBatches { rows, utilization })
}
