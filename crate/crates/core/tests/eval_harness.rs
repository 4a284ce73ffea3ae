mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use common::rng;
use medst::eval_harness::{
    auroc, emit_report, linear_probe, threshold_eval, trend_class_names, zeroshot_predict, ProbeResult, Task,
};
use medst::temporal_consistency::{BetaRow, Direction};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn brute_force_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

proptest! {
    #[test]
    fn auroc_equals_pair_count(seed in 0u64..100_000, n in 1usize..200, levels in 1u32..12) {
        let mut r = rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..levels)) * 0.25).collect();
        let positive: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        prop_assert_eq!(auroc(&scores, &positive), brute_force_auroc(&scores, &positive));
    }

    #[test]
    fn zeroshot_is_scale_invariant(seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let img: Vec<Vec<f64>> = (0..8).map(|_| (0..5).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let pos: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
        let neg: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
        let scaled: Vec<Vec<f64>> = img.iter().map(|v| v.iter().map(|x| x * scale).collect()).collect();
        let a: Vec<bool> = zeroshot_predict(&img, &pos, &neg).iter().map(|p| p.0).collect();
        let b: Vec<bool> = zeroshot_predict(&scaled, &pos, &neg).iter().map(|p| p.0).collect();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn image_equal_to_class_embedding_gets_that_class() {
    let pos = vec![1.0, 0.2, -0.3];
    let neg = vec![-0.5, 1.0, 0.4];
    let out = zeroshot_predict(&[pos.clone(), neg.clone()], &pos, &neg);
    assert!(out[0].0);
    assert!(!out[1].0);
}

#[test]
fn permuted_labels_give_chance() {
    let mut r = rng(3);
    let mut y: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let x: Vec<Vec<f64>> = y.iter().map(|&c| (0..3).map(|k| if k == c { 1.0 } else { 0.0 } + r.gen_range(-0.1..0.1)).collect()).collect();
    assert_eq!(linear_probe(&x, &y, &trend_class_names(), 5, &[0]).unwrap().accuracy, 1.0);
    y.shuffle(&mut r);
    let acc = linear_probe(&x, &y, &trend_class_names(), 5, &[0, 1, 2]).unwrap().accuracy;
    assert!((acc - 1.0 / 3.0).abs() < 0.1, "{acc}");
}

#[test]
fn separable_scores_are_perfect_and_ties_are_half() {
    let scores: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { 0.9 } else { 0.1 }).collect();
    let positive: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
    let r = threshold_eval(&scores, &positive, 10, 0).unwrap();
    assert_eq!((r.accuracy, r.auroc), (1.0, Some(1.0)));
    let r = threshold_eval(&[0.4; 20], &positive, 10, 0).unwrap();
    assert_eq!(r.auroc, Some(0.5));
    assert!(threshold_eval(&scores[..5], &positive[..5], 10, 0).is_err());
}

fn fixture_results() -> (Vec<ProbeResult>, Vec<BetaRow>) {
    let probe = |task, accuracy, accuracy_std, auroc, f1, seed| ProbeResult {
        task,
        accuracy,
        accuracy_std,
        auroc,
        f1,
        per_class: BTreeMap::from([("a".to_string(), accuracy), ("b".to_string(), 1.0 - accuracy)]),
        folds: if task == Task::Zeroshot { 0 } else { 5 },
        seed,
    };
    let results = vec![
        probe(Task::Zeroshot, 0.8125, 0.0, Some(0.875), Some(0.8), 0),
        probe(Task::TemporalCls, 0.6, 0.05, None, None, 1),
        probe(Task::TemporalCls, 0.55, 0.025, None, None, 0),
        probe(Task::SentenceSim, 0.75, 0.0, Some(0.8333333333), None, 0),
    ];
    let beta = vec![
        BetaRow { direction: Direction::Image, gt_index: 0, beta: vec![0.7, 0.2, 0.1] },
        BetaRow { direction: Direction::Text, gt_index: 0, beta: vec![0.2, 0.5, 0.3] },
        BetaRow { direction: Direction::Image, gt_index: 2, beta: vec![0.1, 0.1, 0.8] },
    ];
    (results, beta)
}

const GOLDEN_FILES: [&str; 6] = ["temporal_cls.csv", "sentence_sim.csv", "zeroshot.csv", "per_class.csv", "summary.txt", "beta_histogram.csv"];

#[test]
fn report_matches_golden_files() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/report");
    let dir = tempfile::tempdir().unwrap();
    let (results, beta) = fixture_results();
    emit_report(&results, &beta, dir.path()).unwrap();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(&golden).unwrap();
        for f in GOLDEN_FILES {
            fs::copy(dir.path().join(f), golden.join(f)).unwrap();
        }
    }
    for f in GOLDEN_FILES {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(golden.join(f)).unwrap(), "{f}");
    }
    let again = tempfile::tempdir().unwrap();
    emit_report(&results, &beta, again.path()).unwrap();
    for f in GOLDEN_FILES {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap());
    }
}

#[test]
fn empty_report_is_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    emit_report(&[], &[], dir.path()).unwrap();
    for task in Task::ALL {
        let text = fs::read_to_string(dir.path().join(format!("{}.csv", task.name()))).unwrap();
        assert_eq!(text, "seed,folds,accuracy,accuracy_std,auroc,f1\n");
    }
    assert_eq!(fs::read_to_string(dir.path().join("beta_histogram.csv")).unwrap(), "gt_index,bin,count\n");
}
