use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use tinyreason::checkpoint::Checkpoint;
use tinyreason::config::{RunConfig, Stage, StageConfig};
use tinyreason::eval::{append_report, evaluate_suite, pass_at_k_curve, sample_pool, write_curve, Suite};
use tinyreason::io::{read_jsonl, write_jsonl};
use tinyreason::optim::OptimizerKind;
use tinyreason::pipeline::{build_datasets, load_suites, run_pipeline, Datasets};
use tinyreason::policy::PolicyParameters;
use tinyreason::stages::{run_stage, StageData, StageOptions};
use tinyreason::task::TaskInstance;
use tinyreason::verifier;
use tinyreason::vocab::Vocabulary;
use tinyreason::Error;

/// Train and evaluate small reasoning policies on synthetic verifiable math.
#[derive(Debug, Parser)]
#[command(name = "tinyreason", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize tasks, teacher traces, preference pairs and held-out suites.
    GenData(GenData),
    /// Distillation with packed sequences.
    Midtrain(Train),
    /// Distillation without packing.
    Sft(Train),
    /// Preference learning on correct vs. rejected traces.
    Dpo(Train),
    /// Group-relative RL with verifiable rewards.
    Rl(RlTrain),
    /// pass@1 over several runs, plus optional pass@k curves.
    Eval(Eval),
    /// Score rollouts against their tasks' ground truth.
    Verify(Verify),
    /// Every step above in one process.
    Pipeline(Pipeline),
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML). Defaults to the desk profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::desk(self.seed),
        };
        c.seed = self.seed;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Overrides for [`StageConfig`] fields.
#[derive(Debug, Args)]
struct StageFlags {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    sequence_length: Option<usize>,
    /// `sgd` or `adam`.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    max_grad_norm: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    beta_kl: Option<f64>,
    #[arg(long)]
    dpo_beta: Option<f64>,
}

impl StageFlags {
    fn apply(&self, c: &mut StageConfig) -> Result<()> {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(batch_size, learning_rate, epochs, warmup_fraction, sequence_length, max_grad_norm, max_new_tokens);
        if let Some(v) = self.total_steps {
            c.total_steps = Some(v);
        }
        if let Some(o) = &self.optimizer {
            c.optimizer = match o.as_str() {
                "sgd" => OptimizerKind::Sgd,
                "adam" => OptimizerKind::Adam,
                other => bail!("unknown optimizer {other:?}"),
            };
        }
        if let Some(v) = self.epsilon {
            c.clip.epsilon = v;
        }
        if let Some(v) = self.beta_kl {
            c.clip.beta_kl = v;
        }
        if let Some(v) = self.dpo_beta {
            c.clip.dpo_beta = v;
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    /// Directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Input checkpoint; midtrain starts from a fresh policy when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Metrics table; defaults to `<out>.metrics.csv`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Accept an input checkpoint that skipped the preceding stage.
    #[arg(long)]
    allow_out_of_order: bool,
    #[command(flatten)]
    flags: StageFlags,
}

#[derive(Debug, Args)]
struct RlTrain {
    #[command(flatten)]
    train: Train,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    prompts_per_step: Option<usize>,
    /// Use the 0/1-accuracy filter instead of accuracy filtering plus rebalancing.
    #[arg(long)]
    baseline: bool,
    /// Evaluate consensus on the held-out suite every this many steps.
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long, default_value_t = 16)]
    consensus_k: usize,
    /// Consensus-vs-step curve file.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Eval {
    /// `name=path`, repeatable; evaluated in the given order.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<String>,
    /// Directory holding `suite_<name>.jsonl` files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Extra suite files (task records), named by file stem.
    #[arg(long = "suite")]
    suites: Vec<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[arg(long, default_value_t = 0.6)]
    temperature: f64,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 160)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated k values for pass@k curves, drawn from one pool.
    #[arg(long, value_delimiter = ',')]
    pass_k: Vec<usize>,
    /// Where the pass@k curves go.
    #[arg(long)]
    curve_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Verify {
    /// Rollout records with `task_id` and `tokens` (symbol strings).
    #[arg(long)]
    rollouts: PathBuf,
    /// Task records.
    #[arg(long)]
    tasks: PathBuf,
    /// Reward records; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Pipeline {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Midtrain(a) => train(Stage::Midtrain, a),
        Command::Sft(a) => train(Stage::Sft, a),
        Command::Dpo(a) => train(Stage::Dpo, a),
        Command::Rl(a) => rl(a),
        Command::Eval(a) => eval(a),
        Command::Verify(a) => verify(a),
        Command::Pipeline(a) => pipeline(a),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn gen_data(a: GenData) -> Result<()> {
    let config = a.common.load()?;
    let data = build_datasets(&config, &Vocabulary::standard())?;
    data.save(&a.out)?;
    std::fs::write(a.out.join("config.toml"), config.to_toml_string())
        .with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "{} tasks, {} retained / {} rejected traces, {} pairs, {} rl prompts -> {}",
        data.tasks.len(),
        data.corpus.retained.len(),
        data.corpus.rejected.len(),
        data.pairs.len(),
        data.rl_prompts.len(),
        a.out.display()
    );
    Ok(())
}

struct Prepared {
    config: RunConfig,
    stage: StageConfig,
    data: Datasets,
    input: Checkpoint,
}

fn prepare(stage: Stage, a: &Train) -> Result<Prepared> {
    let config = a.common.load()?;
    let vocab = Vocabulary::standard();
    let mut sc = config.stage(stage).clone();
    sc.seed = a.common.seed;
    a.flags.apply(&mut sc)?;
    let data = Datasets::load(&a.data, &config, &vocab)
        .with_context(|| format!("loading datasets from {}", a.data.display()))?;
    let input = match (&a.input, stage) {
        (Some(p), _) => Checkpoint::load_expecting(p, &vocab, &config.policy)
            .with_context(|| format!("loading {}", p.display()))?,
        (None, Stage::Midtrain) => Checkpoint::new(PolicyParameters::init(config.policy, vocab, a.common.seed)?),
        (None, s) => bail!("the {s} stage needs --input"),
    };
    Ok(Prepared { config, stage: sc, data, input })
}

fn train(stage: Stage, a: Train) -> Result<()> {
    let p = prepare(stage, &a)?;
    finish(stage, &a, p, None, None)
}

fn finish(
    stage: Stage,
    a: &Train,
    p: Prepared,
    consensus: Option<usize>,
    curve: Option<&Path>,
) -> Result<()> {
    let metrics = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.csv"));
    let data = match stage {
        Stage::Midtrain => StageData::Documents(&p.data.midtrain),
        Stage::Sft => StageData::Documents(&p.data.sft),
        Stage::Dpo => StageData::Pairs(&p.data.pairs),
        Stage::Rl => StageData::Prompts(&p.data.rl_prompts),
    };
    let suite = p.data.suites.first().map(|s| s.tasks.as_slice());
    let opts = StageOptions {
        validation: Some(&p.data.validation),
        consensus: consensus.zip(suite).map(|(k, s)| (s, k)),
        eval: p.config.eval,
        allow_out_of_order: a.allow_out_of_order,
        output: Some(&a.out),
        metrics: Some(&metrics),
    };
    let out = run_stage(&p.stage, &p.input, data, &opts)?;
    if let Some(path) = curve {
        let points: Vec<(f64, f64)> = out.curve.iter().map(|&(s, v)| (s as f64, v)).collect();
        write_curve(path, ["step", "consensus"], &points)?;
    }
    eprintln!(
        "{stage}: {} steps{}, checkpoint {}, metrics {}",
        out.records.len(),
        if out.stopped_early { " (early stop)" } else { "" },
        a.out.display(),
        metrics.display()
    );
    Ok(())
}

fn rl(a: RlTrain) -> Result<()> {
    let mut p = prepare(Stage::Rl, &a.train)?;
    let rl = p.stage.rl.as_mut().context("rl section missing")?;
    if let Some(v) = a.group_size {
        rl.group_size = v;
    }
    if let Some(v) = a.prompts_per_step {
        rl.prompts_per_step = v;
    }
    if let Some(v) = a.eval_every {
        rl.eval_every = v;
    }
    rl.recipe.baseline |= a.baseline;
    let curve = a.curve.clone().unwrap_or_else(|| with_suffix(&a.train.out, ".consensus.csv"));
    finish(Stage::Rl, &a.train, p, Some(a.consensus_k), Some(&curve))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn eval(a: Eval) -> Result<()> {
    let config = tinyreason::eval::EvalConfig {
        k: 1,
        runs: a.runs,
        temperature: a.temperature,
        top_p: a.top_p,
        max_len: a.max_len,
        seed: a.seed,
    };
    let mut suites: Vec<Suite> = match &a.data {
        Some(d) => load_suites(d)?,
        None => Vec::new(),
    };
    for path in &a.suites {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("suite").to_string();
        suites.push(Suite { name, tasks: read_jsonl(path)? });
    }
    for spec in &a.checkpoints {
        let (name, path) = spec.split_once('=').context("--checkpoint takes name=path")?;
        let ck = Checkpoint::load(path).with_context(|| format!("loading {path}"))?;
        let rows = evaluate_suite(&ck.params, &suites, &config, name)?;
        append_report(&a.report, &rows)?;
        for r in &rows {
            println!("{name}\t{}\t{}\t{:.4}", r.suite, r.metric, r.value);
        }
        if let (Some(dir), Some(&kmax)) = (&a.curve_dir, a.pass_k.iter().max()) {
            for s in &suites {
                let pool = sample_pool(&ck.params, &s.tasks, kmax, &config, config.seed)?;
                let curve = pass_at_k_curve(&pool, &a.pass_k)?;
                let points: Vec<(f64, f64)> = curve.iter().map(|&(k, v)| (k as f64, v)).collect();
                write_curve(dir.join(format!("{name}_{}_pass_at_k.csv", s.name)), ["k", "pass_at_k"], &points)?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct RolloutLine {
    #[serde(default)]
    id: Option<String>,
    task_id: String,
    tokens: Vec<String>,
}

fn verify(a: Verify) -> Result<()> {
    let tasks: Vec<TaskInstance> = read_jsonl(&a.tasks)?;
    let truth: BTreeMap<&str, &str> = tasks.iter().map(|t| (t.id.as_str(), t.ground_truth.as_str())).collect();
    let rollouts: Vec<RolloutLine> = read_jsonl(&a.rollouts)?;
    let mut records = Vec::with_capacity(rollouts.len());
    let mut malformed = 0;
    for (n, r) in rollouts.iter().enumerate() {
        let t = truth.get(r.task_id.as_str()).with_context(|| format!("rollout {} names unknown task {}", n + 1, r.task_id))?;
        let id = r.id.clone().unwrap_or_else(|| n.to_string());
        match verifier::reward(&id, &r.tokens, t) {
            Ok(rec) => records.push(rec),
            Err(Error::MalformedTruth(g)) => {
                eprintln!("task {}: malformed ground truth {g:?}", r.task_id);
                malformed += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    match &a.out {
        Some(p) => write_jsonl(p, &records)?,
        None => {
            let mut out = std::io::stdout().lock();
            for r in &records {
                writeln!(out, "{}", serde_json::to_string(r)?)?;
            }
        }
    }
    if malformed > 0 {
        bail!("{malformed} rollout(s) against malformed ground truth");
    }
    Ok(())
}

fn pipeline(a: Pipeline) -> Result<()> {
    let config = a.common.load()?;
    let run = run_pipeline(&config, Some(&a.out), true)?;
    for r in &run.report {
        println!("{}\t{}\t{}\t{:.4}", r.checkpoint, r.suite, r.metric, r.value);
    }
    Ok(())
}
