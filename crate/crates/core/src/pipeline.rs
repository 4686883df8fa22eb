//! End-to-end driver: synthesize data, run the four stages in order, and
//! evaluate every checkpoint on the held-out suites.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Stage};
use crate::data::{
    build_preference_pairs, group_corpus, rejection_sample_dataset, Corpus, CorpusEntry, Document, TeacherParams,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_suite, ReportRow, Suite};
use crate::policy::PolicyParameters;
use crate::rollout::PreferencePair;
use crate::seed;
use crate::stages::{run_stage, StageData, StageOptions, StageOutput};
use crate::io::{read_jsonl, write_jsonl};
use crate::task::{annotate, generate_task, AnnotationRecord, Difficulty, DomainTag, TaskInstance, TeacherTrace};
use crate::vocab::Vocabulary;

/// Seed offsets keeping the task pools disjoint.
const VALIDATION_SEEDS: u64 = 8_000_000;
const RL_SEEDS: u64 = 7_000_000;

/// `n` training tasks: difficulty drawn by `weights`, domain uniform, task
/// seeds `0..n`.
pub fn sample_tasks(n: usize, weights: &[f64; 5], seed: u64) -> Result<Vec<TaskInstance>> {
    let pick = WeightedIndex::new(weights).map_err(|e| Error::Config(format!("difficulty weights: {e}")))?;
    let mut rng = seed::rng(&[0x7A5E, seed]);
    Ok((0..n as u64)
        .map(|i| {
            let d = Difficulty::ALL[pick.sample(&mut rng)];
            let dom = DomainTag::ALL[rng.random_range(0..DomainTag::ALL.len())];
            generate_task(d, dom, i)
        })
        .collect())
}

/// Everything the four stages train and evaluate on.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub tasks: Vec<TaskInstance>,
    pub corpus: Corpus,
    pub midtrain: Vec<Document>,
    pub sft: Vec<Document>,
    pub pairs: Vec<PreferencePair>,
    pub rl_prompts: Vec<TaskInstance>,
    pub validation: Vec<TaskInstance>,
    pub suites: Vec<Suite>,
}

/// Training documents from retained entries at or above `min`, covering at
/// most `max_tasks` distinct tasks (0 = all).
pub fn select_documents(
    corpus: &Corpus,
    min: Difficulty,
    max_tasks: usize,
    vocab: &Vocabulary,
) -> Result<Vec<Document>> {
    let mut seen = BTreeSet::new();
    corpus
        .retained
        .iter()
        .filter(|e| e.task.difficulty >= min)
        .filter(|e| {
            let keep = seen.contains(&e.task.id) || max_tasks == 0 || seen.len() < max_tasks;
            if keep {
                seen.insert(e.task.id.clone());
            }
            keep
        })
        .map(|e| Document::from_entry(e, vocab))
        .collect()
}

pub fn build_datasets(config: &RunConfig, vocab: &Vocabulary) -> Result<Datasets> {
    let d = &config.data;
    let tasks = sample_tasks(d.train_tasks, &d.difficulty_weights, config.seed)?;
    let teacher = TeacherParams { error_rate: d.teacher_error_rate, seed: config.seed };
    let corpus = rejection_sample_dataset(&tasks, teacher, d.rollouts_per_task)?;
    let rl_prompts = (0..d.rl_pool)
        .map(|i| {
            let diff = d.rl_difficulties[i % d.rl_difficulties.len()];
            let dom = DomainTag::ALL[(i / d.rl_difficulties.len()) % DomainTag::ALL.len()];
            generate_task(diff, dom, RL_SEEDS + i as u64)
        })
        .collect();
    let all: Vec<Difficulty> = Difficulty::ALL[..3].to_vec();
    let validation = Suite::generate("validation", d.validation_tasks, &all, VALIDATION_SEEDS).tasks;
    let s = &config.suite;
    let suites = vec![Suite::generate("heldout", s.tasks, &s.difficulties, s.seed)];
    Datasets::assemble(config, vocab, tasks, corpus, rl_prompts, validation, suites)
}

impl Datasets {
    /// Derives the stage datasets from a corpus.
    pub fn assemble(
        config: &RunConfig,
        vocab: &Vocabulary,
        tasks: Vec<TaskInstance>,
        mut corpus: Corpus,
        rl_prompts: Vec<TaskInstance>,
        validation: Vec<TaskInstance>,
        suites: Vec<Suite>,
    ) -> Result<Self> {
        let d = &config.data;
        corpus.retained.truncate(d.max_examples);
        let midtrain = select_documents(&corpus, Difficulty::Elementary, 0, vocab)?;
        let sft = select_documents(&corpus, d.sft_min_difficulty, d.sft_max_tasks, vocab)?;
        let pairs = build_preference_pairs(&group_corpus(&corpus, vocab)?, d.pair_min_difficulty, d.max_pairs_per_task);
        Ok(Self { tasks, corpus, midtrain, sft, pairs, rl_prompts, validation, suites })
    }

    /// Writes every dataset as line-delimited records under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let traces = |entries: &[CorpusEntry]| entries.iter().map(|e| e.trace.clone()).collect::<Vec<_>>();
        write_jsonl(dir.join(TASKS), &self.tasks)?;
        write_jsonl(dir.join(RETAINED), &traces(&self.corpus.retained))?;
        write_jsonl(dir.join(REJECTED), &traces(&self.corpus.rejected))?;
        write_jsonl(dir.join(ANNOTATIONS), &annotations(&self.corpus)?)?;
        write_jsonl(dir.join(PAIRS), &self.pairs)?;
        write_jsonl(dir.join(RL_PROMPTS), &self.rl_prompts)?;
        write_jsonl(dir.join(VALIDATION), &self.validation)?;
        for s in &self.suites {
            write_jsonl(dir.join(format!("{SUITE_PREFIX}{}.jsonl", s.name)), &s.tasks)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`Datasets::save`]; the document subsets
    /// follow `config`, the pairs are taken as stored.
    pub fn load(dir: &Path, config: &RunConfig, vocab: &Vocabulary) -> Result<Self> {
        let tasks: Vec<TaskInstance> = read_jsonl(dir.join(TASKS))?;
        let by_id: BTreeMap<&str, &TaskInstance> = tasks.iter().map(|t| (t.id.as_str(), t)).collect();
        let entries = |file: &str| -> Result<Vec<CorpusEntry>> {
            read_jsonl::<TeacherTrace>(dir.join(file))?
                .into_iter()
                .map(|trace| {
                    let task = by_id
                        .get(trace.task_id.as_str())
                        .ok_or_else(|| Error::MissingInput(format!("trace for unknown task {}", trace.task_id)))?;
                    Ok(CorpusEntry { task: (*task).clone(), trace })
                })
                .collect()
        };
        let corpus = Corpus { retained: entries(RETAINED)?, rejected: entries(REJECTED)? };
        let rl_prompts = read_jsonl(dir.join(RL_PROMPTS))?;
        let validation = read_jsonl(dir.join(VALIDATION))?;
        let suites = load_suites(dir)?;
        let mut data = Self::assemble(config, vocab, tasks.clone(), corpus, rl_prompts, validation, suites)?;
        data.pairs = read_jsonl(dir.join(PAIRS))?;
        Ok(data)
    }
}

pub const TASKS: &str = "tasks.jsonl";
pub const RETAINED: &str = "retained.jsonl";
pub const REJECTED: &str = "rejected.jsonl";
pub const ANNOTATIONS: &str = "annotations.jsonl";
pub const PAIRS: &str = "pairs.jsonl";
pub const RL_PROMPTS: &str = "rl_prompts.jsonl";
pub const VALIDATION: &str = "validation.jsonl";
pub const SUITE_PREFIX: &str = "suite_";

/// Every `suite_<name>.jsonl` in `dir`, sorted by name.
pub fn load_suites(dir: &Path) -> Result<Vec<Suite>> {
    let mut suites = Vec::new();
    let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in listing {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(stem) = name.strip_prefix(SUITE_PREFIX).and_then(|n| n.strip_suffix(".jsonl")) {
            suites.push(Suite { name: stem.to_string(), tasks: read_jsonl(&path)? });
        }
    }
    suites.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(suites)
}

/// One annotation per task, over all of its traces.
pub fn annotations(corpus: &Corpus) -> Result<Vec<AnnotationRecord>> {
    let mut order = Vec::new();
    let mut traces: BTreeMap<&str, (&TaskInstance, Vec<TeacherTrace>)> = BTreeMap::new();
    for e in corpus.retained.iter().chain(&corpus.rejected) {
        traces
            .entry(e.task.id.as_str())
            .or_insert_with(|| {
                order.push(e.task.id.as_str());
                (&e.task, Vec::new())
            })
            .1
            .push(e.trace.clone());
    }
    order
        .into_iter()
        .map(|id| {
            let (task, t) = &traces[id];
            annotate(task, t)
        })
        .collect()
}

/// Per-checkpoint results of a full run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    /// `base`, then one per stage, in order.
    pub checkpoints: Vec<(String, Checkpoint)>,
    pub stages: Vec<StageOutput>,
    pub report: Vec<ReportRow>,
    /// Wall time of each stage, in seconds.
    pub seconds: Vec<(String, f64)>,
}

impl PipelineRun {
    pub fn params(&self, name: &str) -> Option<&PolicyParameters> {
        self.checkpoints.iter().find(|(n, _)| n == name).map(|(_, c)| &c.params)
    }

    /// Mean pass@1 of a checkpoint on the first suite.
    pub fn pass1(&self, name: &str) -> Option<f64> {
        self.report.iter().find(|r| r.checkpoint == name).map(|r| r.value)
    }
}

/// Runs every stage. With `out_dir`, checkpoints, metrics and the report
/// are written there as well.
pub fn run_pipeline(config: &RunConfig, out_dir: Option<&Path>, log: bool) -> Result<PipelineRun> {
    config.validate()?;
    let clock = Instant::now();
    let vocab = Vocabulary::standard();
    let data = build_datasets(config, &vocab)?;
    let base = Checkpoint::new(PolicyParameters::init(config.policy, vocab, config.seed)?);
    let mut run = PipelineRun { checkpoints: vec![], stages: vec![], report: vec![], seconds: vec![] };
    let path = |name: &str, ext: &str| -> Option<PathBuf> { out_dir.map(|d| d.join(format!("{name}.{ext}"))) };
    let evaluate = |run: &mut PipelineRun, name: &str, ck: Checkpoint| -> Result<()> {
        let rows = evaluate_suite(&ck.params, &data.suites, &config.eval, name)?;
        if log {
            eprintln!("[{:>7.1}s] {name:<8} pass@1 {:.3}", clock.elapsed().as_secs_f64(), rows[0].value);
        }
        if let Some(p) = path("report", "csv") {
            crate::eval::append_report(p, &rows)?;
        }
        if let Some(p) = path(name, "ckpt") {
            ck.save(p)?;
        }
        run.report.extend(rows);
        run.checkpoints.push((name.to_string(), ck));
        Ok(())
    };
    evaluate(&mut run, "base", base)?;
    for stage in Stage::ALL {
        let started = Instant::now();
        let input = run.checkpoints.last().expect("base is present").1.clone();
        let data_for = match stage {
            Stage::Midtrain => StageData::Documents(&data.midtrain),
            Stage::Sft => StageData::Documents(&data.sft),
            Stage::Dpo => StageData::Pairs(&data.pairs),
            Stage::Rl => StageData::Prompts(&data.rl_prompts),
        };
        let metrics = path(&format!("{stage}_metrics"), "csv");
        let opts = StageOptions {
            validation: Some(&data.validation),
            consensus: None,
            eval: config.eval,
            allow_out_of_order: false,
            output: None,
            metrics: metrics.as_deref(),
        };
        let out = run_stage(config.stage(stage), &input, data_for, &opts)?;
        run.seconds.push((stage.to_string(), started.elapsed().as_secs_f64()));
        if log {
            let last = out.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
            eprintln!(
                "[{:>7.1}s] {stage:<8} {} steps, last loss {last:.4}{}",
                clock.elapsed().as_secs_f64(),
                out.records.len(),
                out.prompts_kept.map(|k| format!(", {k} prompts kept")).unwrap_or_default()
            );
        }
        let ck = out.checkpoint.clone();
        run.stages.push(out);
        evaluate(&mut run, stage.as_str(), ck)?;
    }
    Ok(run)
}
