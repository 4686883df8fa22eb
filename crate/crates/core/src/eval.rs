//! pass@k and consensus@k on held-out task suites, with CSV reports and
//! two-column curve files.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::policy::{sample, PolicyParameters};
use crate::rollout::Rollout;
use crate::seed;
use crate::task::{generate_task, Difficulty, DomainTag, TaskInstance};
use crate::verifier;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub runs: usize,
    pub temperature: f64,
    pub top_p: f64,
    /// Completion budget per sample.
    pub max_len: usize,
    /// Seed of the first run; run `r` uses `seed + r`.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 1, runs: 3, temperature: 0.6, top_p: 0.95, max_len: 160, seed: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.runs == 0 || self.max_len == 0 {
            return Err(Error::Config("eval k, runs and max_len must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidTopP(self.top_p));
        }
        Ok(())
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|r| self.seed.wrapping_add(r)).collect()
    }
}

/// A named held-out task set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub name: String,
    pub tasks: Vec<TaskInstance>,
}

impl Suite {
    /// `n` tasks cycling through `difficulties` and the three domains.
    /// Seeds start at `seed` so suites stay disjoint from training pools
    /// drawn from a different range.
    pub fn generate(name: impl Into<String>, n: usize, difficulties: &[Difficulty], seed: u64) -> Self {
        let tasks = (0..n)
            .map(|i| {
                let d = difficulties[i % difficulties.len()];
                let dom = DomainTag::ALL[(i / difficulties.len()) % DomainTag::ALL.len()];
                generate_task(d, dom, seed + i as u64)
            })
            .collect();
        Self { name: name.into(), tasks }
    }
}

/// `n` scored samples per task, in task order. Sample `j` of task `i` is
/// drawn with a seed derived from `(seed, i, j)`, so the first `k` samples
/// of a pool of size `n ≥ k` are exactly the pool of size `k`.
pub fn sample_pool(
    params: &PolicyParameters,
    tasks: &[TaskInstance],
    n: usize,
    config: &EvalConfig,
    seed: u64,
) -> Result<Vec<Vec<Rollout>>> {
    if tasks.is_empty() {
        return Err(Error::EmptyTaskSet);
    }
    let vocab = params.vocab();
    let mut pool = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let prompt = vocab.encode(&task.prompt)?;
        let mut samples = Vec::with_capacity(n);
        for j in 0..n {
            let s = seed::derive(&[0xE7A1, seed, i as u64, j as u64]);
            let seq = sample(params, &prompt, config.temperature, config.top_p, config.max_len, s)?;
            samples.push(Rollout::score(j as u64, task, seq, vocab)?);
        }
        pool.push(samples);
    }
    Ok(pool)
}

fn check_pool(pool: &[Vec<Rollout>], k: usize) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::EmptyTaskSet);
    }
    if k == 0 || pool.iter().any(|s| s.len() < k) {
        return Err(Error::Config(format!("k = {k} needs 1 <= k <= samples per task")));
    }
    Ok(())
}

/// Fraction of tasks where at least one of the first `k` samples verifies.
pub fn pass_at_k_pool(pool: &[Vec<Rollout>], k: usize) -> Result<f64> {
    check_pool(pool, k)?;
    let solved = pool.iter().filter(|s| s[..k].iter().any(Rollout::is_positive)).count();
    Ok(solved as f64 / pool.len() as f64)
}

/// Index of the representative of the largest verify-equivalence class
/// among `samples`; ties go to the class whose first member came first.
/// Samples without an answer share one class.
pub fn majority_representative(samples: &[Rollout]) -> Option<usize> {
    // (representative index, size)
    let mut classes: Vec<(usize, usize)> = Vec::new();
    let mut no_answer: Option<usize> = None;
    for (i, r) in samples.iter().enumerate() {
        let Some(a) = &r.answer else {
            match no_answer {
                Some(c) => classes[c].1 += 1,
                None => {
                    no_answer = Some(classes.len());
                    classes.push((i, 1));
                }
            }
            continue;
        };
        let found = classes.iter_mut().find(|(rep, _)| {
            samples[*rep].answer.as_ref().is_some_and(|b| verifier::verify(a, b).unwrap_or(false))
        });
        match found {
            Some(c) => c.1 += 1,
            None => classes.push((i, 1)),
        }
    }
    // max_by_key keeps the last maximum; scan in reverse so the earliest wins.
    classes.iter().rev().max_by_key(|c| c.1).map(|c| c.0)
}

/// Fraction of tasks whose majority answer among the first `k` samples
/// verifies against the ground truth.
pub fn consensus_at_k_pool(pool: &[Vec<Rollout>], k: usize) -> Result<f64> {
    check_pool(pool, k)?;
    let solved = pool
        .iter()
        .filter(|s| majority_representative(&s[..k]).is_some_and(|i| s[i].answer.is_some() && s[i].is_positive()))
        .count();
    Ok(solved as f64 / pool.len() as f64)
}

pub fn pass_at_k(params: &PolicyParameters, tasks: &[TaskInstance], config: &EvalConfig) -> Result<f64> {
    config.validate()?;
    pass_at_k_pool(&sample_pool(params, tasks, config.k, config, config.seed)?, config.k)
}

pub fn consensus_at_k(params: &PolicyParameters, tasks: &[TaskInstance], config: &EvalConfig) -> Result<f64> {
    config.validate()?;
    consensus_at_k_pool(&sample_pool(params, tasks, config.k, config, config.seed)?, config.k)
}

/// `(k, pass@k)` for every requested `k`, all on one pool.
pub fn pass_at_k_curve(pool: &[Vec<Rollout>], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    ks.iter().map(|&k| Ok((k, pass_at_k_pool(pool, k)?))).collect()
}

/// One row of the benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub checkpoint: String,
    pub suite: String,
    pub metric: String,
    /// Mean over runs.
    pub value: f64,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub run_values: Vec<f64>,
}

/// pass@1 on every suite, `config.runs` times with seeds `seed, seed+1, …`.
pub fn evaluate_suite(
    params: &PolicyParameters,
    suites: &[Suite],
    config: &EvalConfig,
    checkpoint: &str,
) -> Result<Vec<ReportRow>> {
    config.validate()?;
    if suites.is_empty() || suites.iter().any(|s| s.tasks.is_empty()) {
        return Err(Error::EmptySuite);
    }
    let seeds = config.run_seeds();
    let one = EvalConfig { k: 1, ..*config };
    suites
        .iter()
        .map(|suite| {
            let run_values = seeds
                .iter()
                .map(|&s| pass_at_k_pool(&sample_pool(params, &suite.tasks, 1, &one, s)?, 1))
                .collect::<Result<Vec<f64>>>()?;
            Ok(ReportRow {
                checkpoint: checkpoint.to_string(),
                suite: suite.name.clone(),
                metric: "pass@1".into(),
                value: run_values.iter().sum::<f64>() / run_values.len() as f64,
                runs: run_values.len(),
                seeds: seeds.clone(),
                run_values,
            })
        })
        .collect()
}

pub const REPORT_HEADER: [&str; 6] = ["checkpoint", "suite", "metric", "value", "runs", "seeds"];

/// Appends rows to a report table, writing the header if the file is new.
pub fn append_report(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    if fresh {
        w.write_record(REPORT_HEADER).map_err(csv_err)?;
    }
    for r in rows {
        let seeds = r.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
        w.write_record([
            r.checkpoint.as_str(),
            &r.suite,
            &r.metric,
            &format!("{:.6}", r.value),
            &r.runs.to_string(),
            &seeds,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a two-column numeric table.
pub fn write_curve(path: impl AsRef<Path>, columns: [&str; 2], points: &[(f64, f64)]) -> Result<()> {
    let mut text = format!("{},{}\n", columns[0], columns[1]);
    for (x, y) in points {
        text.push_str(&format!("{x},{y:.6}\n"));
    }
    write_atomic(path, text.as_bytes())
}

/// Per-difficulty pass@1 over the first sample of each task, for quick
/// diagnostics.
pub fn pass_at_1_by_difficulty(tasks: &[TaskInstance], pool: &[Vec<Rollout>]) -> BTreeMap<Difficulty, f64> {
    let mut acc: BTreeMap<Difficulty, (usize, usize)> = BTreeMap::new();
    for (t, s) in tasks.iter().zip(pool) {
        let e = acc.entry(t.difficulty).or_default();
        e.0 += usize::from(s.first().is_some_and(Rollout::is_positive));
        e.1 += 1;
    }
    acc.into_iter().map(|(d, (c, n))| (d, c as f64 / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verifier::VerifiedBy;

    fn r(answer: Option<&str>, reward: i8) -> Rollout {
        Rollout {
            id: 0,
            task_id: "t".into(),
            tokens: vec![1, 2],
            prompt_length: 1,
            logprobs: vec![-1.0],
            answer: answer.map(str::to_string),
            reward,
            verified_by: VerifiedBy::Primary,
        }
    }

    #[test]
    fn pass_examples() {
        let pool = vec![vec![r(None, -1), r(Some("3"), 1), r(Some("4"), -1)]];
        assert_eq!(pass_at_k_pool(&pool, 3).unwrap(), 1.0);
        assert_eq!(pass_at_k_pool(&pool, 1).unwrap(), 0.0);
        let pool: Vec<_> = [1, -1, 1, 1].iter().map(|&x| vec![r(Some("1"), x)]).collect();
        assert_eq!(pass_at_k_pool(&pool, 1).unwrap(), 0.75);
        assert!(matches!(pass_at_k_pool(&[], 1), Err(Error::EmptyTaskSet)));
    }

    #[test]
    fn consensus_examples() {
        let mut s: Vec<_> = (0..9).map(|_| r(Some("7"), 1)).collect();
        s.extend((0..7).map(|_| r(Some("5"), -1)));
        assert_eq!(consensus_at_k_pool(&[s.clone()], 16).unwrap(), 1.0);
        s.reverse();
        s.truncate(14); // 7 × "5" then 7 × "7": tie → earliest class, "5"
        assert_eq!(consensus_at_k_pool(&[s], 14).unwrap(), 0.0);
        let s = vec![r(None, -1), r(None, -1), r(Some("14/2"), 1)];
        assert_eq!(consensus_at_k_pool(&[s], 3).unwrap(), 0.0);
        let s = vec![r(Some("1/2"), 1), r(Some("0.5"), 1), r(Some("3"), -1)];
        assert_eq!(majority_representative(&s), Some(0));
    }

    #[test]
    fn suite_cycles_difficulties() {
        let s = Suite::generate("x", 6, &[Difficulty::Elementary, Difficulty::Middle], 100);
        assert_eq!(s.tasks.len(), 6);
        assert_eq!(s.tasks[3].difficulty, Difficulty::Middle);
        assert_eq!(s.tasks[2].domain_tag, DomainTag::Modular);
    }
}
