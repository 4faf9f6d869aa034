mod common;

use common::fixtures::{auc_instance, mann_whitney};
use htxc::metrics::{macro_roc, roc_curve, ConfusionMatrix, Evaluation};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn trapezoid_matches_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..1000 {
        let (scores, labels) = auc_instance(&mut rng);
        let auc = roc_curve(&scores, &labels).unwrap().auc;
        let mw = mann_whitney(&scores, &labels);
        assert!((auc - mw).abs() < 1e-9, "{auc} vs {mw}");
    }
}

#[test]
fn macro_auc_matches_brute_force_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, k) = (60, 4);
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let row: Vec<f32> = (0..k).map(|_| rng.random::<f32>()).collect();
        let s: f32 = row.iter().sum();
        probs.extend(row.iter().map(|v| v / s));
        labels.push(i % k);
    }
    let eval = Evaluation::from_probs(k, probs.clone(), labels.clone()).unwrap();
    let curves: Vec<_> = eval.roc_curves().into_iter().map(|(_, c)| c).collect();
    let brute: f64 = (0..k)
        .map(|c| {
            let s: Vec<f64> = probs.chunks(k).map(|r| f64::from(r[c])).collect();
            let l: Vec<bool> = labels.iter().map(|&x| x == c).collect();
            mann_whitney(&s, &l)
        })
        .sum::<f64>()
        / k as f64;
    assert!((macro_roc(&curves).unwrap().auc - brute).abs() < 1e-9);
}

#[test]
fn all_correct_gives_diagonal_confusion() {
    let probs = vec![0.9, 0.1, 0.2, 0.8, 0.7, 0.3];
    let eval = Evaluation::from_probs(2, probs, vec![0, 1, 0]).unwrap();
    assert_eq!(eval.confusion.get(0, 1) + eval.confusion.get(1, 0), 0);
    assert_eq!(eval.accuracy(), 1.0);
}

#[test]
fn confusion_rows_match_class_counts() {
    let mut cm = ConfusionMatrix::new(3);
    let truth = [0, 0, 1, 2, 2, 2];
    for (i, &t) in truth.iter().enumerate() {
        cm.record(t, i % 3);
    }
    assert_eq!([cm.row_sum(0), cm.row_sum(1), cm.row_sum(2)], [2, 1, 3]);
    assert_eq!(cm.total(), 6);
}

proptest! {
    #[test]
    fn curve_is_monotone_and_bounded(seed in any::<u64>()) {
        let (scores, labels) = auc_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let r = roc_curve(&scores, &labels).unwrap();
        let first = &r.points[0];
        let last = r.points.last().unwrap();
        prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in r.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
        prop_assert!((0.0..=1.0).contains(&r.auc));
    }

    #[test]
    fn invariant_under_monotone_transform(seed in any::<u64>()) {
        let (scores, labels) = auc_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let moved: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 2.0).collect();
        let a = roc_curve(&scores, &labels).unwrap();
        let b = roc_curve(&moved, &labels).unwrap();
        prop_assert_eq!(a.auc, b.auc);
        let pa: Vec<_> = a.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        let pb: Vec<_> = b.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        prop_assert_eq!(pa, pb);
    }

    #[test]
    fn accuracy_ignores_sample_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let probs: Vec<f32> = (0..n * 3).map(|_| rng.random()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let a = Evaluation::from_probs(3, probs.clone(), labels.clone()).unwrap();
        let mut rp = Vec::new();
        let mut rl = Vec::new();
        for i in (0..n).rev() {
            rp.extend_from_slice(&probs[i * 3..i * 3 + 3]);
            rl.push(labels[i]);
        }
        let b = Evaluation::from_probs(3, rp, rl).unwrap();
        prop_assert_eq!(a.accuracy(), b.accuracy());
        prop_assert_eq!(a.confusion, b.confusion);
    }
}
