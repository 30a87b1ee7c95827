mod common;

use proptest::prelude::*;
use tap_core::evalkit::*;
use tap_core::harness::{generate_dataset, GenConfig, Predictions};
use tap_core::temporal::TimeSpan;

fn arb_span() -> impl Strategy<Value = TimeSpan> {
    (0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(a, b)| TimeSpan::new(a.min(b), a.max(b)).unwrap())
}

fn arb_events(max: usize) -> impl Strategy<Value = Vec<CaptionedSpan>> {
    prop::collection::vec((arb_span(), prop::collection::vec(5usize..12, 1..5)), 0..=max).prop_map(|mut v| {
        v.sort_by(|a, b| a.0.start().total_cmp(&b.0.start()));
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn soda_like_equals_enumeration(p in arb_events(6), g in arb_events(6)) {
        let opt = common::brute_force_soda_optimum(&p, &g);
        prop_assert!((soda_optimum(&p, &g) - opt).abs() < 1e-12);
        let expected = common::soda_from_optimum(opt, p.len(), g.len());
        prop_assert!((soda_like(&p, &g) - expected).abs() < 1e-12);
    }

    #[test]
    fn soda_like_of_self_is_one(x in arb_events(6)) {
        // Zero-length spans have IoU 0 with themselves, so they are excluded.
        let x: Vec<_> = x.into_iter().filter(|e| e.0.length() > 0.0).collect();
        prop_assume!(!x.is_empty());
        prop_assert!((soda_like(&x, &x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn localization_prf_is_permutation_invariant(
        p in prop::collection::vec(arb_span(), 0..6),
        g in prop::collection::vec(arb_span(), 1..6),
        rot in 0usize..6,
    ) {
        let base = localization_prf(&[(p.clone(), g.clone())], &DENSE_THRESHOLDS);
        let mut p2 = p.clone();
        p2.reverse();
        let mut g2 = g.clone();
        let r = rot % g2.len();
        g2.rotate_left(r);
        let other = localization_prf(&[(p2, g2)], &DENSE_THRESHOLDS);
        prop_assert!((base.recall - other.recall).abs() < 1e-9);
        prop_assert!((base.precision - other.precision).abs() < 1e-9);
    }

    #[test]
    fn duplicating_a_matched_prediction_lowers_precision_only(
        g in prop::collection::vec(arb_span(), 1..5),
        extra in prop::collection::vec(arb_span(), 0..3),
    ) {
        let g: Vec<_> = g.into_iter().filter(|s| s.length() > 0.0).collect();
        prop_assume!(!g.is_empty());
        let mut p = g.clone();
        p.extend(extra);
        let base = localization_prf(&[(p.clone(), g.clone())], &DENSE_THRESHOLDS);
        p.push(g[0]);
        let dup = localization_prf(&[(p, g)], &DENSE_THRESHOLDS);
        prop_assert!(dup.precision < base.precision);
        prop_assert!((dup.recall - base.recall).abs() < 1e-9);
    }

    #[test]
    fn report_values_stay_in_range(videos in prop::collection::vec((arb_events(4), arb_events(4)), 1..4)) {
        let r = report_from_pairs(&videos);
        for v in [r.localization.recall, r.localization.precision, r.localization.f1, r.dense_caption.score] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
        prop_assert!((0.0..=1.0).contains(&r.moment_retrieval.miou));
        prop_assert!((0.0..=1.0).contains(&r.soda_like));
    }
}

#[test]
fn crossed_pairs_score_below_uncrossed() {
    let s = |a: f64, b: f64| TimeSpan::new(a, b).unwrap();
    let gts = vec![(s(0.0, 0.4), vec![5, 6]), (s(0.5, 0.9), vec![7, 8])];
    let uncrossed = vec![(s(0.0, 0.4), vec![5, 6]), (s(0.5, 0.9), vec![7, 8])];
    let crossed = vec![(s(0.0, 0.4), vec![7, 8]), (s(0.5, 0.9), vec![5, 6])];
    assert!(soda_like(&crossed, &gts) < soda_like(&uncrossed, &gts));
}

#[test]
fn ground_truth_as_predictions_scores_perfectly() {
    let ds = generate_dataset(&GenConfig { num_videos: 40, ..GenConfig::default() }).unwrap();
    let r = evaluate(&ds, &Predictions::from_ground_truth(&ds)).unwrap();
    assert_eq!(r.kernel, KERNEL_LABEL);
    assert!((r.localization.recall - 100.0).abs() < 1e-9);
    assert!((r.localization.precision - 100.0).abs() < 1e-9);
    assert!((r.dense_caption.score - 100.0).abs() < 1e-9);
    assert!((r.soda_like - 1.0).abs() < 1e-12);
    assert!((r.moment_retrieval.miou - 1.0).abs() < 1e-12);
    assert!(r.moment_retrieval.recall_at.iter().all(|&(_, v)| (v - 100.0).abs() < 1e-9));
}

#[test]
fn missing_videos_count_as_empty_predictions() {
    let ds = generate_dataset(&GenConfig { num_videos: 10, ..GenConfig::default() }).unwrap();
    let mut preds = Predictions::from_ground_truth(&ds);
    preds.videos.truncate(5);
    let r = evaluate(&ds, &preds).unwrap();
    assert!(r.localization.recall < 100.0);
    assert!((r.localization.precision - 100.0).abs() < 1e-9);
}

#[test]
fn table_lists_every_metric() {
    let ds = generate_dataset(&GenConfig { num_videos: 5, ..GenConfig::default() }).unwrap();
    let table = evaluate(&ds, &Predictions::from_ground_truth(&ds)).unwrap().to_table();
    assert!(table.starts_with("# simplified-kernel"));
    for key in ["loc.recall", "loc.precision", "loc.f1", "dense.score", "soda_like", "mr.mIoU"] {
        assert!(table.contains(key), "{key} missing from\n{table}");
    }
}
