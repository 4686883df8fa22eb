//! Synthetic verifiable math tasks and a scripted chain-of-thought teacher.
//!
//! Every task is a templated expression over single-digit operands:
//!
//! ```text
//! arithmetic   <bos> 3 + 4 - 5 = ?            ground truth 2
//! modular      <bos> 3 + 4 % 5 = ?            ground truth 2
//! algebraic    <bos> 4 x = 3 + 3 ; x = ?      ground truth 3/2
//! ```
//!
//! The teacher solves left to right, one `a op b = c ;` clause per step, and
//! closes with `<ans> answer <eos>`. A wrong trace contains one arithmetic
//! slip that is carried through the remaining steps.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::verifier;
use crate::vocab::{number_symbols, ANS, BOS, EOS};

/// Difficulty levels, in increasing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Elementary,
    Middle,
    HighSchool,
    College,
    Graduate,
}

impl Difficulty {
    pub const ALL: [Difficulty; 5] = [
        Difficulty::Elementary,
        Difficulty::Middle,
        Difficulty::HighSchool,
        Difficulty::College,
        Difficulty::Graduate,
    ];

    /// Inclusive range of operand counts.
    pub fn operand_band(self) -> (usize, usize) {
        match self {
            Difficulty::Elementary => (2, 2),
            Difficulty::Middle => (3, 3),
            Difficulty::HighSchool => (4, 5),
            Difficulty::College => (6, 8),
            Difficulty::Graduate => (9, 12),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Elementary => "elementary",
            Difficulty::Middle => "middle",
            Difficulty::HighSchool => "high_school",
            Difficulty::College => "college",
            Difficulty::Graduate => "graduate",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown difficulty {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Arithmetic,
    Modular,
    Algebraic,
}

impl DomainTag {
    pub const ALL: [DomainTag; 3] = [DomainTag::Arithmetic, DomainTag::Modular, DomainTag::Algebraic];

    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Arithmetic => "arithmetic",
            DomainTag::Modular => "modular",
            DomainTag::Algebraic => "algebraic",
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DomainTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DomainTag::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown domain {s:?}")))
    }
}

/// One verifiable question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub prompt: Vec<String>,
    pub ground_truth: String,
    pub difficulty: Difficulty,
    pub domain_tag: DomainTag,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
}

impl Op {
    fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
        }
    }

    fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
        }
    }
}

/// Structured form of a templated prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expression {
    pub first: i64,
    pub terms: Vec<(Op, i64)>,
    pub modulus: Option<i64>,
    pub coefficient: Option<i64>,
}

impl Expression {
    pub fn chain_value(&self) -> i64 {
        self.terms.iter().fold(self.first, |acc, &(op, v)| op.apply(acc, v))
    }

    /// Exact answer text.
    pub fn answer(&self) -> String {
        let total = self.chain_value();
        match (self.modulus, self.coefficient) {
            (Some(m), _) => total.rem_euclid(m).to_string(),
            (None, Some(k)) => verifier::rational_text(total, k),
            (None, None) => total.to_string(),
        }
    }

    /// Number of operators in the chain.
    pub fn operator_count(&self) -> usize {
        self.terms.len()
    }

    /// Steps the teacher writes: one per chain operator plus the final
    /// reduction for modular and algebraic tasks.
    pub fn step_count(&self) -> usize {
        self.terms.len() + usize::from(self.modulus.is_some() || self.coefficient.is_some())
    }

    fn chain_symbols(&self) -> Vec<String> {
        let mut out = vec![self.first.to_string()];
        for &(op, v) in &self.terms {
            out.push(op.symbol().to_string());
            out.push(v.to_string());
        }
        out
    }

    pub fn to_prompt(&self) -> Vec<String> {
        let mut p = vec![BOS.to_string()];
        if let Some(k) = self.coefficient {
            p.extend([k.to_string(), "x".into(), "=".into()]);
            p.extend(self.chain_symbols());
            p.extend([";".into(), "x".into(), "=".into(), "?".into()]);
        } else {
            p.extend(self.chain_symbols());
            if let Some(m) = self.modulus {
                p.extend(["%".into(), m.to_string()]);
            }
            p.extend(["=".into(), "?".into()]);
        }
        p
    }

    /// Parses a prompt produced by [`Expression::to_prompt`].
    pub fn parse<S: AsRef<str>>(prompt: &[S]) -> Option<Expression> {
        let p: Vec<&str> = prompt.iter().map(AsRef::as_ref).collect();
        let p = p.strip_prefix(&[BOS])?;
        let p = p.strip_suffix(&["=", "?"])?;
        let digit = |s: &str| -> Option<i64> {
            (s.len() == 1).then(|| s.parse().ok()).flatten()
        };
        let (chain, modulus, coefficient) = if p.get(1) == Some(&"x") {
            let k = digit(p[0]).filter(|&k| k > 0)?;
            let chain = p.get(3..)?.strip_suffix(&[";", "x"])?;
            if p.get(2) != Some(&"=") {
                return None;
            }
            (chain, None, Some(k))
        } else if p.len() >= 3 && p[p.len() - 2] == "%" {
            let m = digit(p[p.len() - 1]).filter(|&m| m > 1)?;
            (&p[..p.len() - 2], Some(m), None)
        } else {
            (p, None, None)
        };
        if chain.is_empty() || chain.len() % 2 == 0 {
            return None;
        }
        let first = digit(chain[0])?;
        let mut terms = Vec::with_capacity(chain.len() / 2);
        for pair in chain[1..].chunks(2) {
            let op = match pair[0] {
                "+" => Op::Add,
                "-" => Op::Sub,
                _ => return None,
            };
            terms.push((op, digit(pair[1])?));
        }
        Some(Expression { first, terms, modulus, coefficient })
    }
}

fn task_rng(difficulty: Difficulty, domain: DomainTag, seed: u64) -> rand_chacha::ChaCha8Rng {
    seed::rng(&[0x7A5C, difficulty.index(), domain as u64, seed])
}

/// Deterministic task for `(difficulty, domain, seed)`.
///
/// Operands are single digits. Running totals never go negative; a
/// subtraction that would is turned into an addition. Elementary arithmetic
/// is pure addition of two operands.
pub fn generate_task(difficulty: Difficulty, domain: DomainTag, seed: u64) -> TaskInstance {
    let mut rng = task_rng(difficulty, domain, seed);
    let (lo, hi) = difficulty.operand_band();
    let operands = rng.random_range(lo..=hi);
    let (chain_len, coefficient) = match domain {
        DomainTag::Algebraic => (operands - 1, Some(rng.random_range(1..=9))),
        _ => (operands, None),
    };
    let first = rng.random_range(0..=9);
    let mut total = first;
    let mut terms = Vec::with_capacity(chain_len.saturating_sub(1));
    for _ in 1..chain_len {
        let mut op = if difficulty == Difficulty::Elementary || rng.random_bool(0.5) {
            Op::Add
        } else {
            Op::Sub
        };
        let v = rng.random_range(0..=9);
        if op == Op::Sub && v > total {
            op = Op::Add;
        }
        total = op.apply(total, v);
        terms.push((op, v));
    }
    let modulus = (domain == DomainTag::Modular).then(|| rng.random_range(2..=9));
    let expr = Expression { first, terms, modulus, coefficient };
    TaskInstance {
        id: format!("{difficulty}-{domain}-{seed}"),
        prompt: expr.to_prompt(),
        ground_truth: expr.answer(),
        difficulty,
        domain_tag: domain,
        seed,
    }
}

/// One teacher sample for a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherTrace {
    pub task_id: String,
    /// Completion tokens, ending with the end-of-sequence marker.
    pub tokens: Vec<String>,
    pub stated_answer: String,
    pub is_correct: bool,
    pub length: usize,
}

fn push_clause(out: &mut Vec<String>, lhs: i64, op: &str, rhs: i64, result: &[String]) {
    out.extend(number_symbols(lhs));
    out.push(op.to_string());
    out.extend(number_symbols(rhs));
    out.push("=".to_string());
    out.extend(result.iter().cloned());
    out.push(";".to_string());
}

fn fraction_symbols(numerator: i64, denominator: i64) -> Vec<String> {
    let text = verifier::rational_text(numerator, denominator);
    let mut out = Vec::new();
    for part in text.split_inclusive('/') {
        let (num, slash) = match part.strip_suffix('/') {
            Some(n) => (n, true),
            None => (part, false),
        };
        out.extend(number_symbols(num.parse().expect("rational_text emits integers")));
        if slash {
            out.push("/".to_string());
        }
    }
    out
}

/// Samples one chain-of-thought trace from the scripted teacher.
///
/// With probability `error_rate` one step carries a slip that makes the
/// final answer wrong; otherwise every step is exact. `error_rate` is
/// clamped to `[0, 1]`.
pub fn teacher_rollout(task: &TaskInstance, error_rate: f64, seed: u64) -> Result<TeacherTrace> {
    let expr = Expression::parse(&task.prompt)
        .ok_or_else(|| Error::Config(format!("task {} is not a templated expression", task.id)))?;
    let error_rate = error_rate.clamp(0.0, 1.0);
    let mut rng = seed::rng(&[
        0x7EAC,
        task.seed,
        task.difficulty.index(),
        task.domain_tag as u64,
        seed,
    ]);
    let slip = (rng.random::<f64>() < error_rate).then(|| rng.random_range(0..expr.step_count()));

    let mut tokens = Vec::new();
    let mut acc = expr.first;
    for (step, &(op, v)) in expr.terms.iter().enumerate() {
        let mut r = op.apply(acc, v);
        if slip == Some(step) {
            let candidates: Vec<i64> = [-2i64, -1, 1, 2]
                .into_iter()
                .filter(|d| r + d >= 0 && expr.modulus.is_none_or(|m| d.rem_euclid(m) != 0))
                .collect();
            r += candidates[rng.random_range(0..candidates.len())];
        }
        push_clause(&mut tokens, acc, op.symbol(), v, &number_symbols(r));
        acc = r;
    }
    let last = expr.terms.len();
    let answer = match (expr.modulus, expr.coefficient) {
        (Some(m), _) => {
            let mut r = acc.rem_euclid(m);
            if slip == Some(last) {
                r = (r + rng.random_range(1..m)) % m;
            }
            let sym = number_symbols(r);
            push_clause(&mut tokens, acc, "%", m, &sym);
            sym
        }
        (None, Some(k)) => {
            let shift = if slip == Some(last) { rng.random_range(1..=2) } else { 0 };
            let sym = fraction_symbols(acc + shift, k);
            push_clause(&mut tokens, acc, "/", k, &sym);
            sym
        }
        (None, None) => number_symbols(acc),
    };
    tokens.push(ANS.to_string());
    tokens.extend(answer);
    tokens.push(EOS.to_string());

    let stated_answer = verifier::extract_final_answer(&tokens).unwrap_or_default();
    let is_correct = verifier::verify(&stated_answer, &task.ground_truth)?;
    let length = tokens.len();
    Ok(TeacherTrace { task_id: task.id.clone(), tokens, stated_answer, is_correct, length })
}

/// Length of the n-gram checked for loops.
pub const REPEAT_NGRAM: usize = 8;
/// Consecutive copies of the n-gram that count as a loop.
pub const REPEAT_COUNT: usize = 4;

/// True iff some `REPEAT_NGRAM`-token block occurs `REPEAT_COUNT` times back to back.
pub fn has_repetitive_pattern<S: AsRef<str> + PartialEq>(tokens: &[S]) -> bool {
    let span = REPEAT_NGRAM * REPEAT_COUNT;
    if tokens.len() < span {
        return false;
    }
    (0..=tokens.len() - span).any(|start| {
        let block = &tokens[start..start + REPEAT_NGRAM];
        (1..REPEAT_COUNT).all(|k| {
            let at = start + k * REPEAT_NGRAM;
            &tokens[at..at + REPEAT_NGRAM] == block
        })
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub task_id: String,
    pub difficulty: Difficulty,
    pub domain_tag: DomainTag,
    pub repetitive_pattern: bool,
}

pub fn annotate(task: &TaskInstance, traces: &[TeacherTrace]) -> Result<AnnotationRecord> {
    if traces.is_empty() {
        return Err(Error::EmptyTraceList);
    }
    Ok(AnnotationRecord {
        task_id: task.id.clone(),
        difficulty: task.difficulty,
        domain_tag: task.domain_tag,
        repetitive_pattern: traces.iter().any(|t| has_repetitive_pattern(&t.tokens)),
    })
}
