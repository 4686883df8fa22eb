use num_rational::BigRational;
use num_bigint::BigInt;
use proptest::prelude::*;
use tinyreason::task::{
    annotate, generate_task, teacher_rollout, Difficulty, DomainTag, Expression, TaskInstance, TeacherTrace,
};
use tinyreason::verifier::{extract_final_answer, parse_answer, verify};
use tinyreason::vocab::{ANS, BOS, EOS};
use tinyreason::Error;

/// Independent evaluator for templated prompts.
fn oracle(prompt: &[String]) -> BigRational {
    let p: Vec<&str> = prompt.iter().map(String::as_str).collect();
    assert_eq!(p[0], BOS);
    let body = &p[1..p.len() - 2];
    let chain = |tokens: &[&str]| -> i64 {
        let mut total: i64 = tokens[0].parse().unwrap();
        for w in tokens[1..].chunks(2) {
            let v: i64 = w[1].parse().unwrap();
            total = if w[0] == "+" { total + v } else { total - v };
        }
        total
    };
    if body.get(1) == Some(&"x") {
        let k: i64 = body[0].parse().unwrap();
        let c = chain(&body[3..body.len() - 2]);
        BigRational::new(BigInt::from(c), BigInt::from(k))
    } else if body.len() >= 3 && body[body.len() - 2] == "%" {
        let m: i64 = body[body.len() - 1].parse().unwrap();
        BigRational::from_integer(BigInt::from(chain(&body[..body.len() - 2]).rem_euclid(m)))
    } else {
        BigRational::from_integer(BigInt::from(chain(body)))
    }
}

fn difficulty() -> impl Strategy<Value = Difficulty> {
    prop::sample::select(Difficulty::ALL.to_vec())
}

fn domain() -> impl Strategy<Value = DomainTag> {
    prop::sample::select(DomainTag::ALL.to_vec())
}

fn operand_count(task: &TaskInstance) -> usize {
    let e = Expression::parse(&task.prompt).unwrap();
    e.operator_count() + 1 + usize::from(e.coefficient.is_some())
}

#[test]
fn elementary_arithmetic_is_a_two_operand_sum() {
    let t = generate_task(Difficulty::Elementary, DomainTag::Arithmetic, 7);
    let e = Expression::parse(&t.prompt).unwrap();
    assert_eq!(e.terms.len(), 1);
    let sum = e.first + e.terms[0].1;
    assert_eq!(t.ground_truth, sum.to_string());
}

#[test]
fn three_plus_four() {
    let prompt: Vec<String> = [BOS, "3", "+", "4", "=", "?"].map(String::from).to_vec();
    let e = Expression::parse(&prompt).unwrap();
    assert_eq!(e.answer(), "7");
    assert_eq!(oracle(&prompt), BigRational::from_integer(7.into()));
}

#[test]
fn college_has_at_least_as_many_operators_as_elementary() {
    for s in 0..200 {
        let lo = generate_task(Difficulty::Elementary, DomainTag::Arithmetic, s);
        let hi = generate_task(Difficulty::College, DomainTag::Arithmetic, s);
        assert!(operand_count(&hi) >= operand_count(&lo));
    }
}

#[test]
fn degenerate_error_rates() {
    for s in 0..50 {
        let t = generate_task(Difficulty::ALL[s as usize % 5], DomainTag::ALL[s as usize % 3], s);
        assert!(teacher_rollout(&t, 0.0, s).unwrap().is_correct);
        assert!(!teacher_rollout(&t, 1.0, s).unwrap().is_correct);
    }
}

#[test]
fn error_rate_half_is_calibrated() {
    let n = 10_000;
    let mut correct = 0;
    for i in 0..n {
        let t = generate_task(Difficulty::ALL[i % 5], DomainTag::ALL[i % 3], i as u64);
        correct += usize::from(teacher_rollout(&t, 0.5, 99).unwrap().is_correct);
    }
    let frac = correct as f64 / n as f64;
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
}

#[test]
fn calibration_within_three_standard_errors() {
    let n = 4000;
    for rate in [0.1, 0.3, 0.7] {
        let mut correct = 0;
        for i in 0..n {
            let t = generate_task(Difficulty::ALL[i % 5], DomainTag::ALL[(i / 5) % 3], i as u64);
            correct += usize::from(teacher_rollout(&t, rate, 3).unwrap().is_correct);
        }
        let frac = correct as f64 / n as f64;
        let bound = 3.0 * (rate * (1.0 - rate) / n as f64).sqrt();
        assert!((frac - (1.0 - rate)).abs() <= bound, "rate {rate}: {frac}");
    }
}

fn trace(tokens: &[&str]) -> TeacherTrace {
    TeacherTrace {
        task_id: "t".into(),
        tokens: tokens.iter().map(|s| s.to_string()).collect(),
        stated_answer: String::new(),
        is_correct: false,
        length: tokens.len(),
    }
}

#[test]
fn annotation_examples() {
    let task = generate_task(Difficulty::Middle, DomainTag::Modular, 1);
    let short = annotate(&task, &[trace(&["1", "+", "1", "+", EOS])]).unwrap();
    assert!(!short.repetitive_pattern);
    assert_eq!((short.difficulty, short.domain_tag), (task.difficulty, task.domain_tag));

    let block = ["1", "+", "2", "=", "3", ";", "4", "-"];
    let mut looped: Vec<&str> = vec!["7", "+"];
    for _ in 0..5 {
        looped.extend(block);
    }
    looped.push(EOS);
    assert!(annotate(&task, &[trace(&["5", EOS]), trace(&looped)]).unwrap().repetitive_pattern);

    // Three copies stay below the threshold.
    let three: Vec<&str> = block.iter().cycle().take(24).copied().collect();
    assert!(!annotate(&task, &[trace(&three)]).unwrap().repetitive_pattern);

    assert!(matches!(annotate(&task, &[]), Err(Error::EmptyTraceList)));
}

#[test]
fn records_round_trip_as_json_lines() {
    let t = generate_task(Difficulty::HighSchool, DomainTag::Algebraic, 5);
    let line = serde_json::to_string(&t).unwrap();
    for field in ["\"id\"", "\"prompt\"", "\"ground_truth\"", "\"difficulty\"", "\"domain_tag\"", "\"seed\""] {
        assert!(line.contains(field), "{line}");
    }
    assert_eq!(serde_json::from_str::<TaskInstance>(&line).unwrap(), t);
    let tr = teacher_rollout(&t, 0.3, 1).unwrap();
    let back: TeacherTrace = serde_json::from_str(&serde_json::to_string(&tr).unwrap()).unwrap();
    assert_eq!(back, tr);
}

proptest! {
    #[test]
    fn generation_is_deterministic(d in difficulty(), dom in domain(), s in any::<u64>()) {
        prop_assert_eq!(generate_task(d, dom, s), generate_task(d, dom, s));
    }

    #[test]
    fn ground_truth_matches_exact_oracle(d in difficulty(), dom in domain(), s in any::<u64>()) {
        let t = generate_task(d, dom, s);
        prop_assert!(!t.prompt.is_empty());
        let truth = parse_answer(&t.ground_truth).expect("truth parses");
        prop_assert_eq!(truth.value(), &oracle(&t.prompt));
        prop_assert!(verify(&t.ground_truth, &t.ground_truth).unwrap());
    }

    #[test]
    fn operand_count_follows_band(d in difficulty(), dom in domain(), s in any::<u64>()) {
        let (lo, hi) = d.operand_band();
        let n = operand_count(&generate_task(d, dom, s));
        prop_assert!(lo <= n && n <= hi, "{} operands for {}", n, d);
    }

    #[test]
    fn traces_are_well_formed(d in difficulty(), dom in domain(), s in 0u64..1_000_000, rate in 0.0f64..=1.0, ts in any::<u64>()) {
        let t = generate_task(d, dom, s);
        let tr = teacher_rollout(&t, rate, ts).unwrap();
        prop_assert_eq!(tr.tokens.last().map(String::as_str), Some(EOS));
        prop_assert!(tr.tokens.iter().any(|x| x == ANS));
        prop_assert_eq!(Some(tr.stated_answer.clone()), extract_final_answer(&tr.tokens));
        prop_assert_eq!(tr.is_correct, verify(&tr.stated_answer, &t.ground_truth).unwrap());
        prop_assert_eq!(tr.length, tr.tokens.len());
        prop_assert_eq!(&tr, &teacher_rollout(&t, rate, ts).unwrap());
    }
}
