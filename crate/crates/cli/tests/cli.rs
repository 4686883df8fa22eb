use std::path::Path;
use std::process::{Command, Output};

use tinyreason::config::RunConfig;
use tinyreason::policy::PolicyConfig;
use tinyreason::task::Difficulty;

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::desk(5);
    c.policy = PolicyConfig { d_model: 16, heads: 2, layers: 1, mlp_hidden: 32, max_positions: 96 };
    c.data.train_tasks = 120;
    c.data.difficulty_weights = [1.0, 0.0, 0.0, 0.0, 0.0];
    c.data.pair_min_difficulty = Difficulty::Elementary;
    c.data.validation_tasks = 4;
    c.data.rl_pool = 8;
    c.data.rl_difficulties = vec![Difficulty::Elementary];
    c.suite.tasks = 6;
    c.suite.difficulties = vec![Difficulty::Elementary];
    c.eval.runs = 1;
    c.eval.max_len = 40;
    for s in [&mut c.midtrain, &mut c.sft, &mut c.dpo, &mut c.rl] {
        s.max_new_tokens = 40;
        s.sequence_length = 128;
    }
    c.midtrain.epochs = 1;
    c.midtrain.early_stop = None;
    // Enough fine-tuning that RL probes see some correct answers.
    c.sft.epochs = 40;
    c.sft.learning_rate = 1e-2;
    c.rl.total_steps = Some(2);
    if let Some(rl) = c.rl.rl.as_mut() {
        rl.group_size = 4;
        rl.prompts_per_step = 2;
        rl.recipe.probe_rounds = 1;
        rl.recipe.oversample_cap = 8;
        rl.recipe.cv_threshold = 10.0;
    }
    c
}

fn tinyreason(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tinyreason")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stages_chain_through_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = d.join("run.toml");
    std::fs::write(&config, tiny_config().to_toml_string()).unwrap();
    let data = d.join("data");
    let common = ["--config", s(&config), "--seed", "5"];

    ok(&tinyreason(&[&["gen-data"][..], &common, &["--out", s(&data)]].concat()));
    assert!(data.join("tasks.jsonl").exists());

    let mut prev: Option<std::path::PathBuf> = None;
    for stage in ["midtrain", "sft", "dpo", "rl"] {
        let out = d.join(format!("{stage}.ckpt"));
        let mut args = vec![stage];
        args.extend(common);
        args.extend(["--data", s(&data), "--out", s(&out)]);
        if let Some(p) = &prev {
            args.extend(["--input", s(p)]);
        }
        ok(&tinyreason(&args));
        assert!(out.exists(), "{stage} checkpoint");
        let metrics = d.join(format!("{stage}.ckpt.metrics.csv"));
        assert!(std::fs::read_to_string(&metrics).unwrap().lines().count() > 1, "{stage} metrics");
        prev = Some(out);
    }
    assert!(d.join("rl.ckpt.consensus.csv").exists());

    // Skipping a stage is refused unless explicitly allowed.
    let (skip, mid) = (d.join("skip.ckpt"), d.join("midtrain.ckpt"));
    let args = [&["dpo"][..], &common, &["--data", s(&data), "--input", s(&mid), "--out", s(&skip)]].concat();
    assert_eq!(tinyreason(&args).status.code(), Some(2));
    ok(&tinyreason(&[&args[..], &["--allow-out-of-order"]].concat()));

    let report = d.join("report.csv");
    let curves = d.join("curves");
    std::fs::create_dir_all(&curves).unwrap();
    let base = format!("sft={}", s(&d.join("sft.ckpt")));
    let rl = format!("rl={}", s(&d.join("rl.ckpt")));
    let out = tinyreason(&[
        "eval", "--checkpoint", &base, "--checkpoint", &rl, "--data", s(&data), "--report", s(&report),
        "--runs", "2", "--max-len", "40", "--pass-k", "1,2,4", "--curve-dir", s(&curves),
    ]);
    ok(&out);
    let table = std::fs::read_to_string(&report).unwrap();
    assert!(table.starts_with("checkpoint,suite,metric,value,runs,seeds"));
    assert_eq!(table.lines().count(), 3);
    assert_eq!(std::fs::read_dir(&curves).unwrap().count(), 2);
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tasks = d.join("tasks.jsonl");
    let rollouts = d.join("rollouts.jsonl");
    let task = |id: &str, truth: &str| {
        serde_json::json!({
            "id": id, "prompt": ["<bos>", "1", "+", "1", "=", "?"], "ground_truth": truth,
            "difficulty": "elementary", "domain_tag": "arithmetic", "seed": 0
        })
        .to_string()
    };
    std::fs::write(&tasks, [task("a", "2"), task("b", "1/0")].join("\n") + "\n").unwrap();
    let rollout = |id: &str, task: &str, answer: &str| {
        serde_json::json!({ "id": id, "task_id": task, "tokens": ["<ans>", answer, "<eos>"] }).to_string()
    };

    std::fs::write(&rollouts, [rollout("r0", "a", "2"), rollout("r1", "a", "3")].join("\n") + "\n").unwrap();
    let out = tinyreason(&["verify", "--rollouts", s(&rollouts), "--tasks", s(&tasks)]);
    ok(&out);
    let rewards: Vec<i64> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["reward"].as_i64().unwrap())
        .collect();
    assert_eq!(rewards, [1, -1]);

    std::fs::write(&rollouts, rollout("r2", "b", "2") + "\n").unwrap();
    assert_eq!(tinyreason(&["verify", "--rollouts", s(&rollouts), "--tasks", s(&tasks)]).status.code(), Some(2));
}

#[test]
fn bad_input_exits_with_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = tinyreason(&["sft", "--seed", "1", "--data", s(&missing), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
