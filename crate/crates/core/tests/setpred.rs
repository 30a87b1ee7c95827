mod common;

use tap_core::setpred::{anchor_loss, pairwise_cost, LossWeights};
use tap_core::temporal::TemporalAnchor;

#[test]
fn hungarian_matches_enumeration_on_1000_matrices() {
    assert_eq!(common::matching_mismatches(1000, 11), 0);
}

#[test]
fn anchor_loss_gradient_matches_central_differences() {
    let worst = common::setpred_fd_worst(100, 5, 1e-6);
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}

#[test]
fn doubling_lambda_seg_doubles_only_the_segment_term() {
    let p = [TemporalAnchor::new(0.5, 0.2).unwrap()];
    let g = [TemporalAnchor::new(0.5, 0.4).unwrap()];
    let seg_only = |ls: f64| anchor_loss(&p, &g, LossWeights::new(ls, 0.0).unwrap()).unwrap().0;
    let span_only = anchor_loss(&p, &g, LossWeights::new(0.0, 1.0).unwrap()).unwrap().0;
    let both = |ls: f64| anchor_loss(&p, &g, LossWeights::new(ls, 1.0).unwrap()).unwrap().0;
    assert!((seg_only(20.0) - 2.0 * seg_only(10.0)).abs() < 1e-12);
    assert!((both(20.0) - (2.0 * seg_only(10.0) + span_only)).abs() < 1e-12);
}

#[test]
fn zero_weights_give_zero_cost() {
    let preds: Vec<_> = [(0.2, 0.1), (0.7, 0.3)].iter().map(|&(c, d)| TemporalAnchor::new(c, d).unwrap()).collect();
    let gts = [TemporalAnchor::new(0.4, 0.2).unwrap()];
    let cost = pairwise_cost(&preds, &gts, LossWeights::new(0.0, 0.0).unwrap()).unwrap();
    assert!((0..2).all(|p| cost.get(p, 0) == 0.0));
}

#[test]
fn loss_is_zero_iff_every_gt_has_an_exact_copy() {
    let w = LossWeights::default();
    let gts: Vec<_> = [(0.2, 0.1), (0.6, 0.2)].iter().map(|&(c, d)| TemporalAnchor::new(c, d).unwrap()).collect();
    let mut preds = vec![TemporalAnchor::new(0.9, 0.05).unwrap()];
    preds.extend(gts.iter().rev());
    assert_eq!(anchor_loss(&preds, &gts, w).unwrap().0, 0.0);
    preds[1] = TemporalAnchor::new(0.6, 0.2001).unwrap();
    assert!(anchor_loss(&preds, &gts, w).unwrap().0 > 0.0);
}
