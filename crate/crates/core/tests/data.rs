mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use tinyreason::config::RunConfig;
use tinyreason::data::{
    build_preference_pairs, group_corpus, pack_batches, rejection_sample_dataset, Document, TaskRollouts,
    TeacherParams, PAD_SEGMENT,
};
use tinyreason::pipeline::{build_datasets, Datasets};
use tinyreason::task::{generate_task, Difficulty, DomainTag, TaskInstance};
use tinyreason::vocab::Vocabulary;
use tinyreason::Error;

fn tasks(n: u64, d: Difficulty) -> Vec<TaskInstance> {
    (0..n).map(|s| generate_task(d, DomainTag::ALL[s as usize % 3], s)).collect()
}

#[test]
fn rejection_sampling_keeps_correct_traces_and_persists_the_rest() {
    let ts = tasks(40, Difficulty::Middle);
    let c = rejection_sample_dataset(&ts, TeacherParams { error_rate: 0.5, seed: 3 }, 8).unwrap();
    for t in &ts {
        let kept = c.retained.iter().filter(|e| e.task.id == t.id).count();
        let lost = c.rejected.iter().filter(|e| e.task.id == t.id).count();
        assert_eq!(kept + lost, 8);
    }
    assert!(c.retained.iter().all(|e| e.trace.is_correct));
    assert!(c.rejected.iter().all(|e| !e.trace.is_correct));
    // Some task shows the 3-correct / 5-rejected split.
    assert!(ts.iter().any(|t| c.retained.iter().filter(|e| e.task.id == t.id).count() == 3));

    let all = rejection_sample_dataset(&ts, TeacherParams { error_rate: 0.0, seed: 3 }, 8).unwrap();
    assert_eq!((all.retained.len(), all.rejected.len()), (320, 0));
    let none = rejection_sample_dataset(&ts, TeacherParams { error_rate: 1.0, seed: 3 }, 8).unwrap();
    assert_eq!((none.retained.len(), none.rejected.len()), (0, 320));
}

fn scored(d: Difficulty, correct: usize, wrong: usize, lengths: &[usize]) -> TaskRollouts {
    let task = generate_task(d, DomainTag::Arithmetic, 1);
    let rollouts = (0..correct + wrong)
        .map(|i| {
            let completion = vec!["1"; lengths[i]];
            common::answer(i as u64, &completion, if i < correct { 1 } else { -1 })
        })
        .collect();
    TaskRollouts { task, rollouts }
}

#[test]
fn preference_pair_examples() {
    let two_three = scored(Difficulty::HighSchool, 2, 3, &[10, 20, 19, 11, 40]);
    let pairs = build_preference_pairs(&[two_three], Difficulty::HighSchool, 4);
    assert_eq!(pairs.len(), 2);
    // Closest completion lengths: 10 ↔ 11, then 20 ↔ 19.
    assert_eq!((pairs[0].preferred.id, pairs[0].dispreferred.id), (0, 3));
    assert_eq!((pairs[1].preferred.id, pairs[1].dispreferred.id), (1, 2));
    let easy = scored(Difficulty::Elementary, 2, 3, &[5; 5]);
    assert!(build_preference_pairs(&[easy], Difficulty::HighSchool, 4).is_empty());
    let perfect = scored(Difficulty::College, 4, 0, &[5; 4]);
    assert!(build_preference_pairs(&[perfect], Difficulty::HighSchool, 4).is_empty());
}

#[test]
fn corpus_pairs_are_valid() {
    let ts: Vec<TaskInstance> =
        (0..60).map(|s| generate_task(Difficulty::ALL[s as usize % 5], DomainTag::ALL[s as usize % 3], s)).collect();
    let v = Vocabulary::standard();
    let c = rejection_sample_dataset(&ts, TeacherParams { error_rate: 0.3, seed: 5 }, 8).unwrap();
    let pairs = build_preference_pairs(&group_corpus(&c, &v).unwrap(), Difficulty::HighSchool, 2);
    assert!(!pairs.is_empty());
    let mut preferred = BTreeSet::new();
    let mut dispreferred = BTreeSet::new();
    for p in &pairs {
        p.check().unwrap();
        assert_eq!((p.preferred.reward, p.dispreferred.reward), (1, -1));
        assert!(p.difficulty >= Difficulty::HighSchool);
        preferred.insert(p.preferred.id);
        assert!(dispreferred.insert(p.dispreferred.id), "dispreferred rollout reused");
    }
    assert!(preferred.is_disjoint(&dispreferred));
}

fn doc(len: usize, prompt: usize) -> Document {
    let v = Vocabulary::standard();
    let mut tokens = vec![v.id("1").unwrap(); len];
    tokens[0] = v.bos();
    tokens[len - 1] = v.eos();
    Document { tokens, prompt_length: prompt }
}

#[test]
fn packing_examples() {
    let v = Vocabulary::standard();
    let p = pack_batches(&[doc(5, 2), doc(7, 3), doc(4, 2)], 16, true, &v).unwrap();
    assert_eq!(p.rows.len(), 1);
    assert_eq!(p.utilization, 1.0);
    assert_eq!(p.rows[0].segments, [vec![0; 5], vec![1; 7], vec![2; 4]].concat());
    assert!(matches!(pack_batches(&[doc(17, 2)], 16, true, &v), Err(Error::ExampleTooLong { length: 17, capacity: 16 })));

    let s = pack_batches(&[doc(5, 2), doc(7, 3)], 16, false, &v).unwrap();
    assert_eq!(s.rows.len(), 2);
    for (row, len) in s.rows.iter().zip([5, 7]) {
        assert_eq!(row.tokens[len - 1], v.eos());
        assert!(row.supervised[len - 1], "end marker is supervised without packing");
    }
    assert!(!p.rows[0].supervised[4], "end marker is a boundary when packed");
}

proptest! {
    #[test]
    fn packing_preserves_tokens(
        docs in prop::collection::vec((2usize..30, 1usize..10), 1..40),
        cap in 30usize..80,
        packing in prop::bool::ANY,
    ) {
        let v = Vocabulary::standard();
        let docs: Vec<Document> = docs.into_iter().map(|(len, p)| doc(len, p.min(len - 1))).collect();
        let out = pack_batches(&docs, cap, packing, &v).unwrap();
        let total: usize = docs.iter().map(|d| d.tokens.len()).sum();
        let non_pad: usize = out.rows.iter().map(|r| r.segments.iter().filter(|&&s| s != PAD_SEGMENT).count()).sum();
        prop_assert_eq!(total, non_pad);
        prop_assert!(out.rows.iter().all(|r| r.tokens.len() == cap));
        prop_assert!((out.utilization - total as f64 / (cap * out.rows.len()) as f64).abs() < 1e-12);
        if !packing {
            prop_assert_eq!(out.rows.len(), docs.len());
        }
        for r in &out.rows {
            for (i, &s) in r.segments.iter().enumerate() {
                if s == PAD_SEGMENT {
                    prop_assert!(!r.supervised[i] && r.tokens[i] == v.pad());
                }
            }
        }
    }
}

#[test]
fn datasets_round_trip_through_files() {
    let config = common::tiny_config(4);
    let v = Vocabulary::standard();
    let data = build_datasets(&config, &v).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let back = Datasets::load(dir.path(), &config, &v).unwrap();
    assert_eq!(back.tasks, data.tasks);
    assert_eq!(back.corpus.retained.len(), data.corpus.retained.len());
    assert_eq!(back.midtrain, data.midtrain);
    assert_eq!(back.sft, data.sft);
    assert_eq!(back.pairs, data.pairs);
    assert_eq!(back.rl_prompts, data.rl_prompts);
    assert_eq!(back.validation, data.validation);
    assert_eq!(back.suites, data.suites);
    assert!(data.corpus.retained.len() <= config.data.max_examples);
}

#[test]
fn task_pools_are_disjoint() {
    let mut config = RunConfig::desk(1);
    config.data.train_tasks = 500;
    let data = build_datasets(&config, &Vocabulary::standard()).unwrap();
    assert_eq!(data.suites[0].tasks.len(), 200);
    let train: BTreeSet<&String> = data.tasks.iter().map(|t| &t.id).collect();
    for t in data.suites[0].tasks.iter().chain(&data.validation).chain(&data.rl_prompts) {
        assert!(!train.contains(&t.id));
    }
}
