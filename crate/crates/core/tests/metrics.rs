//! Metric correctness: pinned worked examples, a brute-force oracle over
//! random batches, and the ordering invariants that justify per-sample
//! averaging.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use procdiff::metrics::{
    evaluate_plans, mean_accuracy, mean_siou, set_accuracy, success_rate,
};

#[test]
fn worked_example_right_set_wrong_order() {
    let preds = vec![vec![1, 3, 2]];
    let gts = vec![vec![1, 2, 3]];
    assert_eq!(success_rate(&preds, &gts).unwrap(), 0.0);
    assert_eq!(mean_accuracy(&preds, &gts).unwrap(), 1.0 / 3.0);
    assert_eq!(mean_siou(&preds, &gts).unwrap(), 1.0);
}

#[test]
fn worked_example_duplicate_prediction() {
    // prediction collapses to the set {1, 2}; ground truth is {1, 2, 3}
    let preds = vec![vec![1, 1, 2]];
    let gts = vec![vec![1, 2, 3]];
    assert_eq!(mean_siou(&preds, &gts).unwrap(), 2.0 / 3.0);
}

#[test]
fn worked_example_half_matching_batch() {
    let preds = vec![vec![4, 5], vec![4, 5]];
    let gts = vec![vec![4, 5], vec![5, 4]];
    assert_eq!(success_rate(&preds, &gts).unwrap(), 0.5);
}

#[test]
fn set_accuracy_gives_order_free_credit() {
    // every predicted label occurs somewhere in the ground truth, but only
    // the last position matches in place
    let preds = vec![vec![2, 1, 3]];
    let gts = vec![vec![1, 2, 3]];
    assert_eq!(set_accuracy(&preds, &gts).unwrap(), 1.0);
    assert_eq!(mean_accuracy(&preds, &gts).unwrap(), 1.0 / 3.0);
}

#[test]
fn perfect_and_disjoint_extremes() {
    let gts = vec![vec![7, 8, 9]];
    assert_eq!(success_rate(&gts, &gts).unwrap(), 1.0);
    assert_eq!(mean_accuracy(&gts, &gts).unwrap(), 1.0);
    assert_eq!(mean_siou(&gts, &gts).unwrap(), 1.0);
    let disjoint = vec![vec![1, 2, 3]];
    assert_eq!(success_rate(&disjoint, &gts).unwrap(), 0.0);
    assert_eq!(mean_accuracy(&disjoint, &gts).unwrap(), 0.0);
    assert_eq!(mean_siou(&disjoint, &gts).unwrap(), 0.0);
}

/// Plain scalar recomputation with sorted-vec set machinery, kept separate
/// from the library's implementation on purpose.
fn brute_force(preds: &[Vec<usize>], gts: &[Vec<usize>]) -> (f64, f64, f64) {
    let mut sr_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut siou_sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        if p == g {
            sr_sum += 1.0;
        }
        let mut hits = 0usize;
        for i in 0..p.len() {
            if p[i] == g[i] {
                hits += 1;
            }
        }
        acc_sum += hits as f64 / p.len() as f64;
        let mut ps = p.clone();
        ps.sort_unstable();
        ps.dedup();
        let mut gs = g.clone();
        gs.sort_unstable();
        gs.dedup();
        let inter = ps.iter().filter(|v| gs.binary_search(v).is_ok()).count();
        let union = ps.len() + gs.len() - inter;
        siou_sum += inter as f64 / union as f64;
    }
    let n = preds.len() as f64;
    (sr_sum / n, acc_sum / n, siou_sum / n)
}

#[test]
fn agrees_with_brute_force_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let horizon = rng.gen_range(2..=6);
        let n_actions = rng.gen_range(3..=50);
        let batch = rng.gen_range(1..=20);
        let mut preds = Vec::with_capacity(batch);
        let mut gts = Vec::with_capacity(batch);
        for _ in 0..batch {
            preds.push((0..horizon).map(|_| rng.gen_range(0..n_actions)).collect::<Vec<_>>());
            gts.push((0..horizon).map(|_| rng.gen_range(0..n_actions)).collect::<Vec<_>>());
        }
        let (sr, macc, msiou) = brute_force(&preds, &gts);
        assert_eq!(success_rate(&preds, &gts).unwrap(), sr);
        assert_eq!(mean_accuracy(&preds, &gts).unwrap(), macc);
        assert_eq!(mean_siou(&preds, &gts).unwrap(), msiou);
    }
}

#[test]
fn report_aggregates_match_scalar_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let preds: Vec<Vec<usize>> =
        (0..40).map(|_| (0..4).map(|_| rng.gen_range(0..6)).collect()).collect();
    let gts: Vec<Vec<usize>> =
        (0..40).map(|_| (0..4).map(|_| rng.gen_range(0..6)).collect()).collect();
    let report = evaluate_plans(&preds, &gts).unwrap();
    assert_eq!(report.n_samples, 40);
    assert_eq!(report.per_sample.len(), 40);
    assert_eq!(report.sr, success_rate(&preds, &gts).unwrap());
    assert_eq!(report.macc, mean_accuracy(&preds, &gts).unwrap());
    assert_eq!(report.msiou, mean_siou(&preds, &gts).unwrap());
    // per-sample scores support the aggregate
    let macc_back: f64 =
        report.per_sample.iter().map(|s| s.accuracy).sum::<f64>() / 40.0;
    assert!((macc_back - report.macc).abs() <= 1e-12);
}

#[test]
fn shuffling_the_batch_leaves_metrics_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    let mut preds: Vec<Vec<usize>> =
        (0..60).map(|_| (0..5).map(|_| rng.gen_range(0..9)).collect()).collect();
    let mut gts: Vec<Vec<usize>> =
        (0..60).map(|_| (0..5).map(|_| rng.gen_range(0..9)).collect()).collect();
    let before = (
        success_rate(&preds, &gts).unwrap(),
        mean_accuracy(&preds, &gts).unwrap(),
        mean_siou(&preds, &gts).unwrap(),
    );
    // shuffle pairs jointly
    for i in (1..preds.len()).rev() {
        let j = rng.gen_range(0..=i);
        preds.swap(i, j);
        gts.swap(i, j);
    }
    let after = (
        success_rate(&preds, &gts).unwrap(),
        mean_accuracy(&preds, &gts).unwrap(),
        mean_siou(&preds, &gts).unwrap(),
    );
    assert!((before.0 - after.0).abs() <= 1e-12);
    assert!((before.1 - after.1).abs() <= 1e-12);
    assert!((before.2 - after.2).abs() <= 1e-12);
}

#[test]
fn rejects_malformed_batches() {
    let good = vec![vec![1, 2]];
    assert!(success_rate(&[], &[]).is_err());
    assert!(success_rate(&good, &[]).is_err());
    assert!(mean_accuracy(&good, &[vec![1, 2, 3]]).is_err());
    assert!(mean_siou(&[vec![]], &[vec![]]).is_err());
    let err = mean_accuracy(&[vec![1], vec![2, 3]], &[vec![1], vec![2]])
        .unwrap_err()
        .to_string();
    assert!(err.contains("sample 1"), "error should name the bad sample: {}", err);
}

proptest! {
    #[test]
    fn success_rate_bounds_the_other_metrics(
        batch in prop::collection::vec(
            (prop::collection::vec(0usize..12, 1..6), 0usize..20),
            1..16,
        )
    ) {
        // derive same-length prediction/gt pairs from the generated seed rows
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for (row, salt) in batch {
            let gt: Vec<usize> = row.iter().map(|v| (v + salt) % 12).collect();
            preds.push(row);
            gts.push(gt);
        }
        let sr = success_rate(&preds, &gts).unwrap();
        let macc = mean_accuracy(&preds, &gts).unwrap();
        let msiou = mean_siou(&preds, &gts).unwrap();
        let sacc = set_accuracy(&preds, &gts).unwrap();
        prop_assert!((0.0..=1.0).contains(&sr));
        prop_assert!((0.0..=1.0).contains(&macc));
        prop_assert!((0.0..=1.0).contains(&msiou));
        prop_assert!(sr <= macc + 1e-12);
        prop_assert!(sr <= msiou + 1e-12);
        // in-place credit can never exceed set credit
        prop_assert!(macc <= sacc + 1e-12);
    }
}
