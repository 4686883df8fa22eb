#![allow(dead_code)]

use std::sync::OnceLock;

use tinyreason::checkpoint::Checkpoint;
use tinyreason::data::Document;
use tinyreason::config::{RunConfig, Stage, StageConfig};
use tinyreason::pipeline::{build_datasets, Datasets};
use tinyreason::policy::{PolicyConfig, PolicyParameters};
use tinyreason::stages::{run_stage, StageData, StageOptions};
use tinyreason::task::Difficulty;
use tinyreason::vocab::Vocabulary;

/// A run small enough for debug-speed tests: elementary and middle tasks only.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::desk(seed);
    c.policy = PolicyConfig { d_model: 16, heads: 2, layers: 1, mlp_hidden: 32, max_positions: 96 };
    c.data.train_tasks = 120;
    c.data.difficulty_weights = [0.5, 0.3, 0.2, 0.0, 0.0];
    c.data.validation_tasks = 6;
    c.data.rl_pool = 12;
    c.data.rl_difficulties = vec![Difficulty::Elementary];
    c.suite.tasks = 8;
    c.suite.difficulties = vec![Difficulty::Elementary];
    c.eval.runs = 1;
    c.eval.max_len = 40;
    for s in [&mut c.midtrain, &mut c.sft, &mut c.dpo, &mut c.rl] {
        s.max_new_tokens = 40;
        s.sequence_length = 128;
    }
    c.midtrain.epochs = 1;
    c.midtrain.early_stop = None;
    c.sft.epochs = 1;
    c.sft.batch_size = 16;
    c.rl.total_steps = Some(4);
    if let Some(rl) = c.rl.rl.as_mut() {
        rl.group_size = 4;
        rl.prompts_per_step = 2;
        rl.recipe.probe_rounds = 1;
        rl.recipe.oversample_cap = 8;
        rl.recipe.cv_threshold = 10.0;
    }
    c
}

pub struct Fixture {
    pub config: RunConfig,
    pub data: Datasets,
    pub base: Checkpoint,
    /// Trained on elementary problems until it answers some of them.
    pub trained: Checkpoint,
}

/// Shared per test binary.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let config = tiny_config(11);
        let vocab = Vocabulary::standard();
        let data = build_datasets(&config, &vocab).expect("datasets");
        let base = Checkpoint::new(PolicyParameters::init(config.policy, vocab.clone(), config.seed).expect("init"));
        let docs: Vec<Document> = data
            .corpus
            .retained
            .iter()
            .filter(|e| e.task.difficulty == Difficulty::Elementary)
            .map(|e| Document::from_entry(e, &vocab))
            .collect::<Result<_, _>>()
            .expect("documents");
        let sft = StageConfig { epochs: 40, learning_rate: 1e-2, ..config.sft.clone() };
        let opts = StageOptions { allow_out_of_order: true, ..StageOptions::default() };
        let mut trained = run_stage(&sft, &base, StageData::Documents(&docs), &opts).expect("sft").checkpoint;
        trained.stages = vec![Stage::Midtrain, Stage::Sft, Stage::Dpo];
        Fixture { config, data, base, trained }
    })
}

/// Worst `|g − fd| / (|g| + 1e-6)` over `n` parameters the loss depends on,
/// with centered differences at `h = 1e-4`.
pub fn worst_fd_error(
    params: &PolicyParameters,
    grad: &PolicyParameters,
    n: usize,
    seed: u64,
    loss: impl Fn(&PolicyParameters) -> f64,
) -> f64 {
    use rand::seq::IndexedRandom;
    let h = 1e-4;
    let live: Vec<usize> = (0..params.num_parameters()).filter(|&i| grad.flat(i) != 0.0).collect();
    assert!(!live.is_empty(), "gradient is identically zero");
    let mut rng = tinyreason::seed::rng(&[0xFD, seed]);
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let i = *live.choose(&mut rng).expect("non-empty");
        let x = params.flat(i);
        p.set_flat(i, x + h);
        let up = loss(&p);
        p.set_flat(i, x - h);
        let down = loss(&p);
        p.set_flat(i, x);
        let fd = (up - down) / (2.0 * h);
        let g = grad.flat(i);
        worst = worst.max((g - fd).abs() / (g.abs() + 1e-6));
    }
    worst
}

/// Small random policy for objective checks.
pub fn small_policy(seed: u64) -> PolicyParameters {
    let config = PolicyConfig { d_model: 8, heads: 2, layers: 2, mlp_hidden: 12, max_positions: 48 };
    PolicyParameters::init(config, Vocabulary::standard(), seed).expect("init")
}

/// `params` plus uniform noise in `[-scale, scale)`.
pub fn perturbed(params: &PolicyParameters, scale: f64, seed: u64) -> PolicyParameters {
    use rand::Rng;
    let mut rng = tinyreason::seed::rng(&[0x9E, seed]);
    let mut p = params.clone();
    for i in 0..p.num_parameters() {
        let x = p.flat(i);
        p.set_flat(i, x + scale * rng.random_range(-1.0..1.0));
    }
    p
}

/// A scored rollout with hand-picked tokens.
pub fn rollout(id: u64, symbols: &[&str], prompt_length: usize, reward: i8) -> tinyreason::rollout::Rollout {
    let vocab = Vocabulary::standard();
    let tokens = vocab.encode(symbols).expect("known symbols");
    tinyreason::rollout::Rollout {
        id,
        task_id: "t".into(),
        logprobs: vec![0.0; tokens.len() - prompt_length],
        tokens,
        prompt_length,
        answer: None,
        reward,
        verified_by: tinyreason::verifier::VerifiedBy::Primary,
    }
}

pub const PROMPT: [&str; 6] = ["<bos>", "2", "+", "5", "=", "?"];

/// `PROMPT` followed by `completion`.
pub fn answer(id: u64, completion: &[&str], reward: i8) -> tinyreason::rollout::Rollout {
    let symbols: Vec<&str> = PROMPT.iter().chain(completion).copied().collect();
    rollout(id, &symbols, PROMPT.len(), reward)
}
