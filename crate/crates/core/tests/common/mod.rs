//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tap_core::evalkit::caption_similarity;
use tap_core::harness::TokenId;
use tap_core::temporal::{temporal_iou, TemporalAnchor, TimeSpan};

/// Every injective map from `n` ground truths into `m` predictions, as the
/// prediction index chosen for each ground truth.
pub fn injective_maps(m: usize, n: usize) -> Vec<Vec<usize>> {
    fn rec(m: usize, n: usize, cur: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for p in 0..m {
            if !used[p] {
                used[p] = true;
                cur.push(p);
                rec(m, n, cur, used, out);
                cur.pop();
                used[p] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(m, n, &mut Vec::new(), &mut vec![false; m], &mut out);
    out
}

/// Minimum total of `cost(pred, gt)` over injective maps, with the
/// lexicographically smallest optimal map (maps are enumerated in
/// lexicographic order) and the runner-up total.
pub fn brute_force_match(m: usize, n: usize, cost: impl Fn(usize, usize) -> f64) -> (f64, Vec<usize>, f64) {
    let mut best = f64::INFINITY;
    let mut second = f64::INFINITY;
    let mut arg = Vec::new();
    for map in injective_maps(m, n) {
        let t: f64 = map.iter().enumerate().map(|(g, &p)| cost(p, g)).sum();
        if t < best - 1e-12 {
            second = best;
            best = t;
            arg = map;
        } else if t < second {
            second = t;
        }
    }
    (best, arg, second)
}

/// Central-difference derivative.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Norm-wise relative error with a small floor.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let d = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    d / inf(a).max(inf(b)).max(1e-8)
}

/// Maximum over strictly increasing index pairs `(p_k, g_k)` of
/// `Σ IoU · similarity`, by enumeration of every monotone matching.
pub fn brute_force_soda_optimum(preds: &[(TimeSpan, Vec<TokenId>)], gts: &[(TimeSpan, Vec<TokenId>)]) -> f64 {
    fn rec(
        preds: &[(TimeSpan, Vec<TokenId>)],
        gts: &[(TimeSpan, Vec<TokenId>)],
        pi: usize,
        gi: usize,
    ) -> f64 {
        let mut best = 0.0f64;
        for p in pi..preds.len() {
            for g in gi..gts.len() {
                let gain = temporal_iou(preds[p].0, gts[g].0) * caption_similarity(&preds[p].1, &gts[g].1);
                best = best.max(gain + rec(preds, gts, p + 1, g + 1));
            }
        }
        best
    }
    rec(preds, gts, 0, 0)
}

/// F-measure of `opt / |preds|` and `opt / |gts|`.
pub fn soda_from_optimum(opt: f64, num_preds: usize, num_gts: usize) -> f64 {
    if num_preds == 0 || num_gts == 0 || opt <= 0.0 {
        return 0.0;
    }
    let p = opt / num_preds as f64;
    let r = opt / num_gts as f64;
    2.0 * p * r / (p + r)
}

pub fn random_span(rng: &mut ChaCha8Rng) -> TimeSpan {
    let a: f64 = rng.gen();
    let b: f64 = rng.gen();
    TimeSpan::new(a.min(b), a.max(b)).unwrap()
}

pub fn random_anchor(rng: &mut ChaCha8Rng) -> TemporalAnchor {
    TemporalAnchor::new(rng.gen_range(0.05..0.95), rng.gen_range(0.02..0.5)).unwrap()
}

/// Number of random cost matrices (sizes up to 7×7) on which
/// `hungarian_match` disagrees with enumeration, either in the optimal total or
/// in the tie-broken assignment.
pub fn matching_mismatches(trials: usize, seed: u64) -> usize {
    use rand::SeedableRng;
    use tap_core::setpred::{hungarian_match, CostMatrix};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for t in 0..trials {
        let n = rng.gen_range(1..=7);
        let m = rng.gen_range(n..=7);
        // Every fourth matrix uses small integers so exact ties are common.
        let data: Vec<f64> = (0..m * n)
            .map(|_| if t % 4 == 0 { rng.gen_range(0..4) as f64 } else { rng.gen_range(0.0..10.0) })
            .collect();
        let cost = CostMatrix::new(m, n, data).unwrap();
        let asg = hungarian_match(&cost).unwrap();
        let (best, arg, _) = brute_force_match(m, n, |p, g| cost.get(p, g));
        let got: Vec<usize> = asg.pairs().iter().map(|&(p, _)| p).collect();
        if (asg.total(&cost) - best).abs() > 1e-9 || got != arg {
            bad += 1;
        }
    }
    bad
}

/// Distance of a matched pair from the loss's non-differentiable set: equal
/// centers or durations, coinciding endpoints, or a clamped endpoint.
fn kink_distance(p: TemporalAnchor, g: TemporalAnchor) -> f64 {
    let (ps, pe) = (p.center() - p.duration() / 2.0, p.center() + p.duration() / 2.0);
    let (gs, ge) = (g.span().start(), g.span().end());
    [
        (p.center() - g.center()).abs(),
        (p.duration() - g.duration()).abs(),
        (ps - gs).abs(),
        (pe - ge).abs(),
        (ps - ge).abs(),
        (pe - gs).abs(),
        ps.abs(),
        (1.0 - pe).abs(),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min)
}

/// Worst relative error between `anchor_loss_grad` and central differences of
/// `anchor_loss` over `instances` random instances whose assignment is unique
/// by a margin and whose matched pairs sit away from kinks.
pub fn setpred_fd_worst(instances: usize, seed: u64, h: f64) -> f64 {
    use rand::SeedableRng;
    use tap_core::setpred::{anchor_loss, anchor_loss_grad, pair_loss, LossWeights};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LossWeights::default();
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < instances {
        let n = rng.gen_range(1..=3);
        let m = rng.gen_range(n..=5);
        let preds: Vec<_> = (0..m).map(|_| random_anchor(&mut rng)).collect();
        let gts: Vec<_> = (0..n).map(|_| random_anchor(&mut rng)).collect();
        let (best, _, second) = brute_force_match(m, n, |p, g| pair_loss(preds[p], gts[g], w));
        if second - best < 1e-3 {
            continue;
        }
        let (_, asg) = anchor_loss(&preds, &gts, w).unwrap();
        if asg.pairs().iter().any(|&(p, g)| kink_distance(preds[p], gts[g]) < 1e-3) {
            continue;
        }
        let grads = anchor_loss_grad(&preds, &gts, w, &asg);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for k in 0..m {
            for coord in 0..2 {
                let f = |x: f64| {
                    let mut q = preds.clone();
                    q[k] = if coord == 0 {
                        TemporalAnchor::new(x, preds[k].duration()).unwrap()
                    } else {
                        TemporalAnchor::new(preds[k].center(), x).unwrap()
                    };
                    anchor_loss(&q, &gts, w).unwrap().0
                };
                let x = if coord == 0 { preds[k].center() } else { preds[k].duration() };
                analytic.push(grads[k][coord]);
                numeric.push(central_diff(f, x, h));
            }
        }
        worst = worst.max(rel_err(&analytic, &numeric));
        done += 1;
    }
    worst
}

pub mod tiny {
    //! A tiny localizer + captioner pair for gradient checks.

    use ndiff::{ParamGrads, ParamStore, Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tap_core::captioner::{build_items, dual_grads, training_items, Captioner, CaptionerConfig, StageBConfig};
    use tap_core::harness::{Event, VideoSample};
    use tap_core::localizer::{anchors_from_tensor, gt_anchors, sample_loss_and_grads, Localizer, LocalizerConfig};
    use tap_core::setpred::{aligned_loss, anchor_loss, pair_loss, LossWeights};
    use tap_core::temporal::TimeSpan;

    pub const VOCAB: usize = 9;

    pub struct Tiny {
        pub store: ParamStore,
        pub loc: Localizer,
        pub cap: Captioner,
        pub sample: VideoSample,
    }

    pub fn localizer_config() -> LocalizerConfig {
        LocalizerConfig {
            num_queries: 3,
            num_layers: 1,
            model_dim: 8,
            feature_dim: 5,
            ffn_dim: 8,
            positional_encoding: true,
        }
    }

    pub fn captioner_config() -> CaptionerConfig {
        CaptionerConfig {
            model_dim: 8,
            num_layers: 1,
            ffn_dim: 8,
            time_hidden: 4,
            max_caption_len: 4,
        }
    }

    /// Random weights everywhere, including the zero-initialized heads, so no
    /// gradient is trivially zero.
    pub fn build(seed: u64) -> Tiny {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let loc = Localizer::new(localizer_config(), &mut store, seed).unwrap();
        let cap = Captioner::new(captioner_config(), VOCAB, 5, &mut store, seed).unwrap();
        for name in ["loc.head.out.w", "time.reg.w"] {
            let id = store.id(name).unwrap();
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(shape[0], shape[1], 0.5, &mut rng);
        }
        let a = rng.gen_range(0.05..0.3);
        let b = rng.gen_range(0.5..0.7);
        let sample = VideoSample {
            id: "tiny".into(),
            features: Tensor::randn(4, 5, 1.0, &mut rng),
            events: vec![
                Event { span: TimeSpan::new(a, a + 0.2).unwrap(), caption: vec![5, 6] },
                Event { span: TimeSpan::new(b, b + 0.25).unwrap(), caption: vec![7] },
            ],
        };
        Tiny { store, loc, cap, sample }
    }

    /// Central differences of `f` w.r.t. every scalar of the selected
    /// parameters, compared with `analytic`. Returns the worst per-tensor
    /// relative error.
    pub fn fd_against(
        store: &ParamStore,
        select: impl Fn(&str) -> bool,
        analytic: &ParamGrads,
        h: f64,
        f: impl Fn(&ParamStore) -> f64,
    ) -> f64 {
        let mut s = store.clone();
        let mut worst = 0.0f64;
        for id in store.ids() {
            if !select(store.name(id)) {
                continue;
            }
            let n = store.get(id).len();
            let mut numeric = vec![0.0; n];
            for k in 0..n {
                let orig = s.get(id).data()[k];
                s.get_mut(id).data_mut()[k] = orig + h;
                let fp = f(&s);
                s.get_mut(id).data_mut()[k] = orig - h;
                let fm = f(&s);
                s.get_mut(id).data_mut()[k] = orig;
                numeric[k] = (fp - fm) / (2.0 * h);
            }
            let zeros = vec![0.0; n];
            let a = analytic.get(id).unwrap_or(&zeros);
            worst = worst.max(super::rel_err(a, &numeric));
        }
        worst
    }

    /// Localizer anchor-loss gradient for every localizer parameter, with the
    /// matching held fixed.
    pub fn localizer_fd(seed: u64) -> f64 {
        let t = build(seed);
        let w = LossWeights::default();
        let (_, grads) = sample_loss_and_grads(&t.loc, &t.store, &t.sample, w).unwrap();
        let gts = gt_anchors(&t.sample);
        let preds = t.loc.localize(&t.store, &t.sample.features).unwrap();
        let (_, asg) = anchor_loss(&preds, &gts, w).unwrap();
        fd_against(&t.store, Localizer::is_param, &grads, 1e-6, |s| {
            let p = t.loc.localize(s, &t.sample.features).unwrap();
            asg.pairs().iter().map(|&(i, j)| pair_loss(p[i], gts[j], w)).sum()
        })
    }

    /// Both stage-B passes: caption CE w.r.t. every parameter and the
    /// denoising loss w.r.t. localizer and time-embedding parameters, with the
    /// matching and the item list held fixed. Returns `(caption, denoise)`
    /// worst relative errors.
    pub fn dual_fd(seed: u64) -> (f64, f64) {
        let t = build(seed);
        let cfg = StageBConfig::default();
        let g = dual_grads(&t.loc, &t.cap, &t.store, &t.sample, &cfg).unwrap();
        let base = t.loc.localize(&t.store, &t.sample.features).unwrap();
        let (items, num_gt) = training_items(&base, &t.sample, &cfg).unwrap();
        let seq = build_items(t.sample.num_frames(), &items).unwrap();
        let gts = gt_anchors(&t.sample);
        let losses = |s: &ParamStore| {
            let mut tape = Tape::new();
            let anchors = t.loc.forward(&mut tape, s, &t.sample.features).unwrap();
            let fv = t.cap.forward(&mut tape, s, &t.sample.features, anchors, &items, &seq).unwrap();
            let ce = t.cap.caption_ce(&mut tape, &seq, fv).unwrap();
            let reg = anchors_from_tensor(tape.value(fv.regressed)).unwrap();
            (tape.value(ce).item(), aligned_loss(&reg[..num_gt], &gts, cfg.weights).unwrap())
        };
        let ce = fd_against(&t.store, |_| true, &g.caption, 1e-6, |s| losses(s).0);
        let dn = fd_against(
            &t.store,
            |n| Localizer::is_param(n) || Captioner::is_time_param(n),
            &g.denoise,
            1e-6,
            |s| losses(s).1,
        );
        (ce, dn)
    }
}

pub struct OverfitOutcome {
    pub final_ce: f64,
    pub ce_trace: Vec<f64>,
    pub exact_captions: bool,
    /// Largest `|Δc| + |Δd|` between Ỹ and the annotation over the events.
    pub denoise_err: f64,
    pub seconds: f64,
}

/// Stage A then stage B on a single generated video.
pub fn stage_b_overfit(stage_b_epochs: usize, lr: f64) -> OverfitOutcome {
    use tap_core::captioner::{train_stage_b, CaptionerConfig, StageBConfig};
    use tap_core::harness::{generate_dataset, GenConfig};
    use tap_core::localizer::{gt_anchors, train_localizer, LocalizerConfig};
    use tap_core::optim::OptimConfig;
    use tap_core::setpred::LossWeights;
    let start = std::time::Instant::now();
    let mut ds = generate_dataset(&GenConfig { num_videos: 4, min_events: 2, max_events: 3, ..GenConfig::default() }).unwrap();
    ds.videos.truncate(1);
    let opt = OptimConfig { lr: 1e-2, batch_size: 1, ..OptimConfig::default() };
    let a = train_localizer(&ds, LocalizerConfig::default(), LossWeights::default(), &opt, 200, 0).unwrap();
    let mut sb = StageBConfig { epochs: stage_b_epochs, ..StageBConfig::default() };
    sb.optim.lr = lr;
    sb.optim.batch_size = 1;
    let b = train_stage_b(&ds, &a.net, &a.params, CaptionerConfig::default(), &sb, 0).unwrap();
    let v = &ds.videos[0];
    // Decode each ground-truth event on its annotated anchor after the true
    // history, and read Ỹ at its slot.
    let mut state = b.captioner.encode_video(&b.params, &v.features).unwrap();
    let mut exact = true;
    let mut worst = 0.0f64;
    for (e, gt) in v.events.iter().zip(gt_anchors(v)) {
        let g = b.captioner.generate_caption(&b.params, &state, gt);
        exact &= g.tokens == e.caption;
        worst = worst.max((g.regressed.center() - gt.center()).abs() + (g.regressed.duration() - gt.duration()).abs());
        b.captioner.push_event(&b.params, &mut state, gt, &e.caption).unwrap();
    }
    let ce_trace: Vec<f64> = b.trace.iter().map(|e| e.caption_loss).collect();
    OverfitOutcome {
        final_ce: *ce_trace.last().unwrap(),
        ce_trace,
        exact_captions: exact,
        denoise_err: worst,
        seconds: start.elapsed().as_secs_f64(),
    }
}
