mod common;

use proptest::prelude::*;
use tinyreason::autodiff::{Tape, Tensor};
use tinyreason::objectives::{
    clipped_surrogate, dpo_gradient, dpo_loss, dpo_loss_from_margins, gae_advantages, grpo_advantages,
    grpo_gradient, grpo_objective, kl_k3, ppo_objective, reference_logprobs, sequence_logprob, sft_loss,
    surrogate_tape, GroupBatch, PpoSequence, SftRow,
};
use tinyreason::policy::{PolicyConfig, PolicyParameters};
use tinyreason::rollout::{PreferencePair, RolloutGroup};
use tinyreason::vocab::Vocabulary;
use tinyreason::Error;

use common::{answer, perturbed, small_policy, worst_fd_error};

fn pair(w: &[&str], l: &[&str]) -> PreferencePair {
    let preferred = answer(0, w, 1);
    PreferencePair {
        prompt: preferred.prompt().to_vec(),
        preferred,
        dispreferred: answer(1, l, -1),
        difficulty: tinyreason::task::Difficulty::HighSchool,
    }
}

fn pairs() -> Vec<PreferencePair> {
    vec![
        pair(&["2", "+", "5", "=", "7", ";", "<ans>", "7", "<eos>"], &["2", "+", "5", "=", "8", ";", "<ans>", "8", "<eos>"]),
        pair(&["<ans>", "7", "<eos>"], &["<ans>", "6", "<eos>"]),
    ]
}

fn group() -> RolloutGroup {
    RolloutGroup::new(
        "t",
        vec![
            answer(0, &["2", "+", "5", "=", "7", ";", "<ans>", "7", "<eos>"], 1),
            answer(1, &["<ans>", "9", "<eos>"], -1),
            answer(2, &["2", "+", "5", "=", "6", ";", "<ans>", "6", "<eos>"], -1),
            answer(3, &["<ans>", "7", "<eos>"], 1),
        ],
    )
}

#[test]
fn sft_analytic_values() {
    let v = Vocabulary::standard();
    let zeros = PolicyParameters::zeros(PolicyConfig::default(), v.clone()).unwrap();
    let toks = v.encode(&["<bos>", "1", "+", "2", "<eos>"]).unwrap();
    let row = SftRow { tokens: toks, segments: vec![0; 5], supervised: vec![false, true, true, true, true] };
    let (loss, _) = sft_loss(&zeros, std::slice::from_ref(&row)).unwrap();
    assert!((loss - (v.size() as f64).ln()).abs() < 1e-9);

    let masked = SftRow { supervised: vec![false; 5], ..row };
    assert!(matches!(sft_loss(&zeros, &[masked]), Err(Error::EmptyBatch)));

    // Output bias giving p("1") = 0.5 and p("2") = 0.25 everywhere.
    let mut p = zeros.clone();
    let (one, two) = (v.id("1").unwrap() as usize, v.id("2").unwrap() as usize);
    let rest = -((v.size() - 2) as f64).ln();
    for (j, b) in p.get_mut("head.b").unwrap().data.iter_mut().enumerate() {
        *b = if j == one { 2f64.ln() } else if j == two { 0.0 } else { rest };
    }
    let row = SftRow { tokens: vec![v.bos(), one as u32, two as u32], segments: vec![0; 3], supervised: vec![false, true, true] };
    let (loss, _) = sft_loss(&p, &[row]).unwrap();
    assert!((loss - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
    assert!((loss - 1.0397).abs() < 1e-4);
}

#[test]
fn dpo_analytic_values() {
    let p = small_policy(1);
    let loss = dpo_loss(&p, &p, &pairs(), 0.7).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((dpo_loss_from_margins(1.0, 0.0, 1.0) - 0.313262).abs() < 1e-6);

    let mut bad = pairs();
    bad[0].dispreferred = common::rollout(9, &["<bos>", "1", "+", "1", "=", "?", "<ans>", "2", "<eos>"], 6, -1);
    assert!(matches!(dpo_loss(&p, &p, &bad, 1.0), Err(Error::PromptMismatch)));
}

#[test]
fn dpo_step_increases_margin() {
    let reference = small_policy(2);
    let ps = pairs();
    let refs = reference_logprobs(&reference, &ps).unwrap();
    let margin = |p: &PolicyParameters| -> f64 {
        ps.iter()
            .zip(&refs)
            .map(|(x, r)| {
                (sequence_logprob(p, &x.preferred).unwrap() - r.0)
                    - (sequence_logprob(p, &x.dispreferred).unwrap() - r.1)
            })
            .sum()
    };
    let mut p = reference.clone();
    let before = margin(&p);
    let (_, g) = dpo_gradient(&p, &ps, &refs, 1.0).unwrap();
    p.add_scaled(&g, -1e-3);
    assert!(margin(&p) > before);
}

#[test]
fn gae_examples() {
    assert_eq!(gae_advantages(&[0.0, 1.0], &[0.0, 0.0, 0.0], 1.0, 1.0).unwrap(), vec![1.0, 1.0]);
    assert_eq!(gae_advantages(&[0.0; 4], &[0.0; 5], 0.9, 0.8).unwrap(), vec![0.0; 4]);
    let (r, v) = ([1.0, -2.0, 0.5], [0.3, -0.1, 0.7, 0.2]);
    let a = gae_advantages(&r, &v, 0.9, 0.0).unwrap();
    for t in 0..3 {
        assert_eq!(a[t], r[t] + 0.9 * v[t + 1] - v[t]);
    }
    assert!(matches!(gae_advantages(&r, &v[..3], 1.0, 1.0), Err(Error::LengthMismatch(_))));
}

#[test]
fn ppo_examples() {
    assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
    assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
    let p = small_policy(3);
    let seqs: Vec<PpoSequence> = group()
        .rollouts
        .iter()
        .enumerate()
        .map(|(i, r)| PpoSequence {
            tokens: r.tokens.clone(),
            prompt_length: r.prompt_length,
            advantages: (0..r.length()).map(|t| (i as f64 - 1.5) * (t as f64 + 1.0)).collect(),
        })
        .collect();
    let all: Vec<f64> = seqs.iter().flat_map(|s| s.advantages.clone()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    assert!((ppo_objective(&p, &p, &seqs, 0.2).unwrap() - mean).abs() < 1e-12);
}

#[test]
fn grpo_advantage_examples() {
    assert_eq!(grpo_advantages(&[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
    let a = grpo_advantages(&[1.0, 1.0, 1.0, -1.0]).unwrap();
    for (x, y) in a.iter().zip([0.5774, 0.5774, 0.5774, -1.7321]) {
        assert!((x - y).abs() < 1e-4);
    }
    assert!(matches!(grpo_advantages(&[1.0; 4]), Err(Error::DegenerateGroup)));
}

#[test]
fn grpo_objective_identities() {
    let p = small_policy(4);
    let g = group();
    assert!(grpo_objective(&p, &p, &p, &g, 0.2, 0.04).unwrap().abs() < 1e-12);
    let uniform = RolloutGroup::new("t", g.rollouts.iter().map(|r| common::answer(r.id, &["<eos>"], 1)).collect());
    assert!(matches!(grpo_objective(&p, &p, &p, &uniform, 0.2, 0.0), Err(Error::DegenerateGroup)));

    // With no KL term the objective is the group mean of sequence-mean clipped surrogates.
    let old = perturbed(&p, 0.05, 1);
    let reference = perturbed(&p, 0.05, 2);
    let b = GroupBatch::prepare(&g, &old, &reference).unwrap();
    let mut expected = 0.0;
    for (i, r) in g.rollouts.iter().enumerate() {
        let new = tinyreason::policy::forward_logprobs(&p, &r.tokens, r.prompt_length, 1.0).unwrap();
        let terms: Vec<f64> = new
            .iter()
            .zip(&b.old_logprobs[i])
            .map(|(n, o)| clipped_surrogate((n - o).exp(), b.advantages[i], 0.2))
            .collect();
        expected += terms.iter().sum::<f64>() / terms.len() as f64;
    }
    expected /= g.size() as f64;
    let got = grpo_objective(&p, &old, &reference, &g, 0.2, 0.0).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    assert!(grpo_objective(&p, &old, &reference, &g, 0.2, 0.5).unwrap() <= got);
}

#[test]
fn dpo_gradient_matches_finite_differences() {
    let reference = small_policy(5);
    let p = perturbed(&reference, 0.05, 5);
    let ps = pairs();
    let refs = reference_logprobs(&reference, &ps).unwrap();
    let (_, g) = dpo_gradient(&p, &ps, &refs, 0.5).unwrap();
    let worst = worst_fd_error(&p, &g, 60, 2, |q| dpo_gradient(q, &ps, &refs, 0.5).unwrap().0);
    assert!(worst <= 1e-3, "{worst}");
}

#[test]
fn grpo_gradient_matches_finite_differences() {
    let p = perturbed(&small_policy(6), 0.05, 6);
    let old = perturbed(&p, 0.01, 7);
    let reference = perturbed(&p, 0.1, 8);
    let b = vec![GroupBatch::prepare(&group(), &old, &reference).unwrap()];
    let (_, g) = grpo_gradient(&p, &b, 0.2, 0.04).unwrap();
    let worst = worst_fd_error(&p, &g, 60, 3, |q| grpo_gradient(q, &b, 0.2, 0.04).unwrap().0);
    assert!(worst <= 1e-3, "{worst}");
}

proptest! {
    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(prop::bool::ANY, 2..64)) {
        let r: Vec<f64> = rewards.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        match grpo_advantages(&r) {
            Err(Error::DegenerateGroup) => prop_assert!(rewards.iter().all(|&b| b == rewards[0])),
            Err(e) => prop_assert!(false, "{e}"),
            Ok(a) => {
                let n = a.len() as f64;
                let mean = a.iter().sum::<f64>() / n;
                let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!(mean.abs() <= 1e-9 && (std - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn dpo_loss_decreases_in_margin(m in -20.0f64..20.0, d in 1e-3f64..5.0, beta in 0.01f64..5.0) {
        prop_assert!(dpo_loss_from_margins(m + d, 0.0, beta) < dpo_loss_from_margins(m, 0.0, beta));
        prop_assert_eq!(dpo_loss_from_margins(m, m, beta), std::f64::consts::LN_2);
    }

    #[test]
    fn gae_reduces_to_reward_to_go(r in prop::collection::vec(-5.0f64..5.0, 1..30)) {
        let a = gae_advantages(&r, &vec![0.0; r.len() + 1], 1.0, 1.0).unwrap();
        for t in 0..r.len() {
            let suffix: f64 = r[t..].iter().sum();
            prop_assert!((a[t] - suffix).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_estimator_is_nonnegative(p in -30.0f64..0.0, q in -30.0f64..0.0) {
        let k = kl_k3(p, q);
        prop_assert!(k >= 0.0);
        if (q - p).abs() > 1e-6 {
            prop_assert!(k > 0.0);
        }
        prop_assert_eq!(kl_k3(p, p), 0.0);
    }

    #[test]
    fn clipping_bounds(r in 0.0f64..4.0, a in -3.0f64..3.0, eps in 0.01f64..0.5) {
        let c = clipped_surrogate(r, a, eps);
        prop_assert!(c <= r * a);
        if a >= 0.0 && r > 1.0 + eps {
            prop_assert_eq!(c, (1.0 + eps) * a);
        }
        // The bound holds except where a negative advantage meets a large ratio,
        // which the pessimistic minimum leaves unclipped.
        if a >= 0.0 || r <= 1.0 + eps {
            prop_assert!(c.abs() <= (1.0 + eps) * a.abs() + 1e-12);
        } else {
            prop_assert_eq!(c, r * a);
        }
    }

    #[test]
    fn tape_surrogate_is_bitwise_scalar(rs in prop::collection::vec((0.0f64..3.0, -2.0f64..2.0), 1..20), eps in 0.01f64..0.5) {
        let mut t = Tape::new();
        let ratio = t.constant(Tensor::column(rs.iter().map(|x| x.0).collect()));
        let adv: Vec<f64> = rs.iter().map(|x| x.1).collect();
        let out = surrogate_tape(&mut t, ratio, &adv, eps);
        for (i, &(r, a)) in rs.iter().enumerate() {
            prop_assert_eq!(t.value(out).data[i], clipped_surrogate(r, a, eps));
        }
    }
}
