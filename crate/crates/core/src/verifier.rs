//! Final-answer extraction and the verifiable reward.
//!
//! Answers are signed integers, fractions `a/b` and finite decimals. Two
//! answers are equal when they denote the same rational number, so `"0.5"`
//! and `"1/2"` verify against each other while `"0.33"` and `"1/3"` do not.
//!
//! Verification runs as a two-stage chain. The primary stage parses the
//! candidate with the strict grammar. Anything the primary stage does not
//! accept is handed to a lenient fallback that normalizes whitespace, stray
//! signs and wrapping punctuation before the final decision. The fallback
//! sits behind [`AnswerChecker`] so another checker can replace it.

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::ANS;

/// How an answer was written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Integer,
    Rational,
    Decimal,
}

/// A parsed answer. The value is held as an exact rational in lowest terms
/// with a positive denominator; decimals also keep their digits as written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerValue {
    kind: AnswerKind,
    value: BigRational,
    written: Option<String>,
}

impl AnswerValue {
    pub fn kind(&self) -> AnswerKind {
        self.kind
    }

    pub fn value(&self) -> &BigRational {
        &self.value
    }

    pub fn is_negative(&self) -> bool {
        self.value.is_negative()
    }

    pub fn numerator(&self) -> &BigInt {
        self.value.numer()
    }

    pub fn denominator(&self) -> &BigInt {
        self.value.denom()
    }

    /// Decimal digits exactly as written, for decimal answers.
    pub fn written_decimal(&self) -> Option<&str> {
        self.written.as_deref()
    }

    /// Canonical text: `p` for integral values, `p/q` otherwise.
    pub fn canonical(&self) -> String {
        if self.value.is_integer() {
            self.value.numer().to_string()
        } else {
            format!("{}/{}", self.value.numer(), self.value.denom())
        }
    }

    pub fn equivalent(&self, other: &AnswerValue) -> bool {
        self.value == other.value
    }
}

impl fmt::Display for AnswerValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

fn digits(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

fn big(s: &str) -> BigInt {
    s.parse().expect("caller checked digits")
}

/// Parses the strict answer grammar: `[+-]?D`, `[+-]?D/D` (nonzero
/// denominator) or `[+-]?D?.D`, where `D` is one or more ASCII digits.
pub fn parse_answer(text: &str) -> Option<AnswerValue> {
    let (negative, body) = match text.as_bytes().first()? {
        b'-' => (true, &text[1..]),
        b'+' => (false, &text[1..]),
        _ => (false, text),
    };
    let (kind, mut value, written) = if let Some((num, den)) = body.split_once('/') {
        if !digits(num) || !digits(den) {
            return None;
        }
        let den = big(den);
        if den.is_zero() {
            return None;
        }
        (AnswerKind::Rational, BigRational::new(big(num), den), None)
    } else if let Some((int, frac)) = body.split_once('.') {
        if !(int.is_empty() || digits(int)) || !digits(frac) {
            return None;
        }
        let scale = num_traits::pow(BigInt::from(10), frac.len());
        let whole = if int.is_empty() { BigInt::zero() } else { big(int) };
        let value = BigRational::new(whole * &scale + big(frac), scale);
        (AnswerKind::Decimal, value, Some(text.to_string()))
    } else {
        if !digits(body) {
            return None;
        }
        (AnswerKind::Integer, BigRational::from_integer(big(body)), None)
    };
    if negative {
        value = -value;
    }
    Some(AnswerValue { kind, value, written })
}

/// Canonical text of a parseable answer.
pub fn canonical(text: &str) -> Option<String> {
    parse_answer(text).map(|a| a.canonical())
}

/// Lenient normalization used by the fallback stage.
pub fn normalize_lenient(text: &str) -> String {
    let mut s: String = text
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| match c {
            '\u{2212}' | '\u{2013}' => '-',
            other => other,
        })
        .collect();
    loop {
        let before = s.len();
        if let Some(inner) = s.strip_prefix('(').and_then(|t| t.strip_suffix(')')) {
            s = inner.to_string();
        }
        if let Some(inner) = s.strip_suffix('.') {
            s = inner.to_string();
        }
        if s.len() == before {
            break;
        }
    }
    let sign_len = s.find(|c| c != '+' && c != '-').unwrap_or(s.len());
    let negative = s[..sign_len].matches('-').count() % 2 == 1;
    let rest = &s[sign_len..];
    if negative {
        format!("-{rest}")
    } else {
        rest.to_string()
    }
}

/// Which stage of the verification chain produced the decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifiedBy {
    Primary,
    Fallback,
}

/// A verification decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Verdict {
    pub correct: bool,
    pub stage: VerifiedBy,
}

/// Re-verification stage invoked on answers the primary stage rejected.
pub trait AnswerChecker: Send + Sync {
    fn recheck(&self, candidate: &str, truth: &AnswerValue) -> bool;
}

/// Deterministic lenient re-parse.
#[derive(Debug, Default, Clone, Copy)]
pub struct LenientChecker;

impl AnswerChecker for LenientChecker {
    fn recheck(&self, candidate: &str, truth: &AnswerValue) -> bool {
        parse_answer(&normalize_lenient(candidate)).is_some_and(|c| c.equivalent(truth))
    }
}

/// Parses a ground-truth answer; ground truth must satisfy the grammar,
/// possibly after lenient normalization.
pub fn parse_truth(truth: &str) -> Result<AnswerValue> {
    parse_answer(truth)
        .or_else(|| parse_answer(&normalize_lenient(truth)))
        .ok_or_else(|| Error::MalformedTruth(truth.to_string()))
}

/// Runs the primary stage and, on rejection, the given fallback.
pub fn verify_with(candidate: &str, truth: &str, fallback: &dyn AnswerChecker) -> Result<Verdict> {
    let truth = parse_truth(truth)?;
    if parse_answer(candidate).is_some_and(|c| c.equivalent(&truth)) {
        return Ok(Verdict { correct: true, stage: VerifiedBy::Primary });
    }
    Ok(Verdict { correct: fallback.recheck(candidate, &truth), stage: VerifiedBy::Fallback })
}

/// True iff `candidate` denotes the same rational as `truth`.
pub fn verify(candidate: &str, truth: &str) -> Result<bool> {
    Ok(verify_with(candidate, truth, &LenientChecker)?.correct)
}

fn in_answer_alphabet(symbol: &str) -> bool {
    matches!(symbol, "+" | "-" | "/" | ".") || (symbol.len() == 1 && symbol.as_bytes()[0].is_ascii_digit())
}

/// The maximal run of answer-grammar symbols after the last answer marker,
/// or `None` when there is no marker or the run is empty.
pub fn extract_final_answer<S: AsRef<str>>(tokens: &[S]) -> Option<String> {
    let start = tokens.iter().rposition(|t| t.as_ref() == ANS)? + 1;
    let span: String = tokens[start..]
        .iter()
        .map(AsRef::as_ref)
        .take_while(|t| in_answer_alphabet(t))
        .collect();
    (!span.is_empty()).then_some(span)
}

/// Reward of one rollout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub rollout_id: String,
    /// Exactly `+1` or `-1`.
    pub reward: i8,
    pub verified_by: VerifiedBy,
}

impl RewardRecord {
    pub fn is_positive(&self) -> bool {
        self.reward > 0
    }

    pub fn value(&self) -> f64 {
        f64::from(self.reward)
    }
}

/// `+1` iff the extracted answer verifies against `truth`, `-1` otherwise.
/// Missing answers are decided by the primary stage.
pub fn reward<S: AsRef<str>>(rollout_id: &str, tokens: &[S], truth: &str) -> Result<RewardRecord> {
    reward_with(rollout_id, tokens, truth, &LenientChecker)
}

pub fn reward_with<S: AsRef<str>>(
    rollout_id: &str,
    tokens: &[S],
    truth: &str,
    fallback: &dyn AnswerChecker,
) -> Result<RewardRecord> {
    let verdict = match extract_final_answer(tokens) {
        Some(answer) => verify_with(&answer, truth, fallback)?,
        None => {
            parse_truth(truth)?;
            Verdict { correct: false, stage: VerifiedBy::Primary }
        }
    };
    Ok(RewardRecord {
        rollout_id: rollout_id.to_string(),
        reward: if verdict.correct { 1 } else { -1 },
        verified_by: verdict.stage,
    })
}

/// Exact rational from a reduced numerator/denominator pair.
pub fn rational_text(numerator: i64, denominator: i64) -> String {
    let r = BigRational::new(BigInt::from(numerator), BigInt::from(denominator));
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}
