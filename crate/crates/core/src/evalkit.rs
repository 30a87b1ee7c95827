//! Localization, moment-retrieval and dense-captioning metrics.
//!
//! Captions are compared with a token-multiset F1 instead of METEOR/CIDEr, so
//! every report carries the label [`KERNEL_LABEL`].

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::harness::{Dataset, Predictions, TokenId};
use crate::temporal::{temporal_iou, TimeSpan};

pub const KERNEL_LABEL: &str = "simplified-kernel";
pub const REPORT_VERSION: u32 = 1;
pub const DENSE_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];
pub const RETRIEVAL_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];
pub const DENSE_NORMALIZATION: &str =
    "per IoU threshold: sum of caption similarity over greedily IoU-matched pairs divided by the number of predictions, pooled over videos, x100; averaged over thresholds";

/// Token-multiset F1 with clipped counts; 0 when either side is empty.
pub fn caption_similarity(a: &[TokenId], b: &[TokenId]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    for &t in a {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for &t in b {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / b.len() as f64;
    let r = common as f64 / a.len() as f64;
    2.0 * p * r / (p + r)
}

/// One-to-one matching by descending IoU among pairs with IoU ≥ `threshold`.
/// Ties go to the earlier prediction, then the earlier ground truth. Returns
/// `(pred, gt)` pairs.
pub fn greedy_match(preds: &[TimeSpan], gts: &[TimeSpan], threshold: f64) -> Vec<(usize, usize)> {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let iou = temporal_iou(*p, *g);
            if iou >= threshold && iou > 0.0 {
                cands.push((iou, i, j));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; preds.len()];
    let mut used_g = vec![false; gts.len()];
    let mut out = Vec::new();
    for (_, i, j) in cands {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            out.push((i, j));
        }
    }
    out
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPr {
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Scores in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub per_threshold: Vec<ThresholdPr>,
    /// Videos skipped because they have no ground truth.
    pub excluded: usize,
}

/// Localization recall/precision pooled over videos at each threshold, then
/// averaged over thresholds. Each item is `(predictions, ground truths)`.
pub fn localization_prf(videos: &[(Vec<TimeSpan>, Vec<TimeSpan>)], thresholds: &[f64]) -> Prf {
    let mut excluded = 0;
    let kept: Vec<_> = videos
        .iter()
        .filter(|(_, g)| {
            let empty = g.is_empty();
            excluded += empty as usize;
            !empty
        })
        .collect();
    let n_gt: usize = kept.iter().map(|(_, g)| g.len()).sum();
    let n_pred: usize = kept.iter().map(|(p, _)| p.len()).sum();
    let per_threshold: Vec<ThresholdPr> = thresholds
        .iter()
        .map(|&t| {
            let matched: usize = kept.iter().map(|(p, g)| greedy_match(p, g, t).len()).sum();
            ThresholdPr {
                iou: t,
                recall: if n_gt > 0 { 100.0 * matched as f64 / n_gt as f64 } else { 0.0 },
                precision: if n_pred > 0 { 100.0 * matched as f64 / n_pred as f64 } else { 0.0 },
            }
        })
        .collect();
    let k = per_threshold.len().max(1) as f64;
    let recall = per_threshold.iter().map(|x| x.recall).sum::<f64>() / k;
    let precision = per_threshold.iter().map(|x| x.precision).sum::<f64>() / k;
    Prf {
        recall,
        precision,
        f1: harmonic(recall, precision),
        per_threshold,
        excluded,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    /// `(threshold, recall %)`
    pub recall_at: Vec<(f64, f64)>,
    pub miou: f64,
    pub queries: usize,
}

/// One `(prediction, ground truth)` span per query.
pub fn moment_retrieval(pairs: &[(TimeSpan, TimeSpan)]) -> Retrieval {
    let ious: Vec<f64> = pairs.iter().map(|(p, g)| temporal_iou(*p, *g)).collect();
    let n = ious.len();
    let frac = |t: f64| {
        if n == 0 {
            0.0
        } else {
            100.0 * ious.iter().filter(|&&x| x >= t).count() as f64 / n as f64
        }
    };
    Retrieval {
        recall_at: RETRIEVAL_THRESHOLDS.iter().map(|&t| (t, frac(t))).collect(),
        miou: if n == 0 { 0.0 } else { ious.iter().sum::<f64>() / n as f64 },
        queries: n,
    }
}

/// A span with its caption tokens.
pub type CaptionedSpan = (TimeSpan, Vec<TokenId>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseScore {
    pub score: f64,
    /// `(threshold, score)`
    pub per_threshold: Vec<(f64, f64)>,
}

/// Dense-captioning score; see [`DENSE_NORMALIZATION`].
pub fn dense_caption_score(videos: &[(Vec<CaptionedSpan>, Vec<CaptionedSpan>)], thresholds: &[f64]) -> DenseScore {
    let n_pred: usize = videos.iter().map(|(p, _)| p.len()).sum();
    let per_threshold: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            if n_pred == 0 {
                return (t, 0.0);
            }
            let total: f64 = videos
                .iter()
                .map(|(p, g)| {
                    let ps: Vec<TimeSpan> = p.iter().map(|x| x.0).collect();
                    let gs: Vec<TimeSpan> = g.iter().map(|x| x.0).collect();
                    greedy_match(&ps, &gs, t)
                        .into_iter()
                        .map(|(i, j)| caption_similarity(&p[i].1, &g[j].1))
                        .sum::<f64>()
                })
                .sum();
            (t, 100.0 * total / n_pred as f64)
        })
        .collect();
    let score = per_threshold.iter().map(|x| x.1).sum::<f64>() / per_threshold.len().max(1) as f64;
    DenseScore { score, per_threshold }
}

fn soda_gain(p: &CaptionedSpan, g: &CaptionedSpan) -> f64 {
    temporal_iou(p.0, g.0) * caption_similarity(&p.1, &g.1)
}

/// Best total gain of an order-preserving one-to-one matching.
pub fn soda_optimum(preds: &[CaptionedSpan], gts: &[CaptionedSpan]) -> f64 {
    let (n, m) = (preds.len(), gts.len());
    let mut dp = vec![vec![0.0f64; m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            let take = dp[i - 1][j - 1] + soda_gain(&preds[i - 1], &gts[j - 1]);
            dp[i][j] = take.max(dp[i - 1][j]).max(dp[i][j - 1]);
        }
    }
    dp[n][m]
}

/// F-measure of `optimum / |preds|` and `optimum / |gts|`, in `[0, 1]`.
/// Both lists must be in chronological order.
pub fn soda_like(preds: &[CaptionedSpan], gts: &[CaptionedSpan]) -> f64 {
    if preds.is_empty() || gts.is_empty() {
        return 0.0;
    }
    let opt = soda_optimum(preds, gts);
    harmonic(opt / preds.len() as f64, opt / gts.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub kernel: String,
    pub num_videos: usize,
    pub localization: Prf,
    pub dense_caption: DenseScore,
    pub dense_normalization: String,
    /// Mean over videos, in `[0, 1]`.
    pub soda_like: f64,
    /// Each ground-truth caption, in chronological order, retrieves the most
    /// similar prediction not yet retrieved in its video (ties: earlier
    /// prediction); once every prediction has been retrieved all are eligible
    /// again.
    pub moment_retrieval: Retrieval,
}

fn sorted_events(mut ev: Vec<CaptionedSpan>) -> Vec<CaptionedSpan> {
    ev.sort_by(|a, b| a.0.start().total_cmp(&b.0.start()).then(a.0.end().total_cmp(&b.0.end())));
    ev
}

/// Evaluates predictions against a dataset. Videos without a prediction entry
/// count as empty predictions; predictions for unknown videos are ignored.
pub fn evaluate(dataset: &Dataset, predictions: &Predictions) -> crate::Result<EvalReport> {
    let by_id: HashMap<&str, _> = predictions.videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
    let mut videos = dataset.videos.iter().collect::<Vec<_>>();
    videos.sort_by(|a, b| a.id.cmp(&b.id));
    let mut pairs: Vec<(Vec<CaptionedSpan>, Vec<CaptionedSpan>)> = Vec::with_capacity(videos.len());
    for v in videos {
        let gts: Vec<CaptionedSpan> = v.events.iter().map(|e| (e.span, e.caption.clone())).collect();
        let preds = match by_id.get(v.id.as_str()) {
            Some(p) => p
                .events
                .iter()
                .map(|e| Ok((TimeSpan::new(e.start, e.end)?, dataset.vocab.encode(&e.caption)?)))
                .collect::<crate::Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        pairs.push((sorted_events(preds), sorted_events(gts)));
    }
    Ok(report_from_pairs(&pairs))
}

pub fn report_from_pairs(pairs: &[(Vec<CaptionedSpan>, Vec<CaptionedSpan>)]) -> EvalReport {
    let spans: Vec<(Vec<TimeSpan>, Vec<TimeSpan>)> = pairs
        .iter()
        .map(|(p, g)| (p.iter().map(|x| x.0).collect(), g.iter().map(|x| x.0).collect()))
        .collect();
    let localization = localization_prf(&spans, &DENSE_THRESHOLDS);
    let dense_caption = dense_caption_score(pairs, &DENSE_THRESHOLDS);
    let scored: Vec<_> = pairs.iter().filter(|(_, g)| !g.is_empty()).collect();
    let soda = if scored.is_empty() {
        0.0
    } else {
        scored.iter().map(|(p, g)| soda_like(p, g)).sum::<f64>() / scored.len() as f64
    };
    let mut queries = Vec::new();
    for (p, g) in pairs {
        let mut used = vec![false; p.len()];
        for (gspan, gcap) in g {
            if used.iter().all(|&u| u) {
                used.iter_mut().for_each(|u| *u = false);
            }
            let mut best: Option<(f64, usize)> = None;
            for (k, (_, pcap)) in p.iter().enumerate() {
                if used[k] {
                    continue;
                }
                let s = caption_similarity(gcap, pcap);
                if best.map_or(true, |(b, _)| s > b) {
                    best = Some((s, k));
                }
            }
            // No prediction at all retrieves an empty span at 0.
            let pred = match best {
                Some((_, k)) => {
                    used[k] = true;
                    p[k].0
                }
                None => TimeSpan::new(0.0, 0.0).unwrap(),
            };
            queries.push((pred, *gspan));
        }
    }
    EvalReport {
        version: REPORT_VERSION,
        kernel: KERNEL_LABEL.to_string(),
        num_videos: pairs.len(),
        localization,
        dense_caption,
        dense_normalization: DENSE_NORMALIZATION.to_string(),
        soda_like: soda,
        moment_retrieval: moment_retrieval(&queries),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("videos".into(), self.num_videos.to_string()),
            ("loc.recall".into(), format!("{:.2}", self.localization.recall)),
            ("loc.precision".into(), format!("{:.2}", self.localization.precision)),
            ("loc.f1".into(), format!("{:.2}", self.localization.f1)),
        ];
        for t in &self.localization.per_threshold {
            rows.push((format!("loc.recall@{}", t.iou), format!("{:.2}", t.recall)));
            rows.push((format!("loc.precision@{}", t.iou), format!("{:.2}", t.precision)));
        }
        rows.push(("dense.score".into(), format!("{:.2}", self.dense_caption.score)));
        for (t, s) in &self.dense_caption.per_threshold {
            rows.push((format!("dense.score@{t}"), format!("{s:.2}")));
        }
        rows.push(("soda_like".into(), format!("{:.4}", self.soda_like)));
        for (t, r) in &self.moment_retrieval.recall_at {
            rows.push((format!("mr.R@{t}"), format!("{r:.2}")));
        }
        rows.push(("mr.mIoU".into(), format!("{:.4}", self.moment_retrieval.miou)));
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = format!("# {} (caption similarity: token F1)\n", self.kernel);
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>10}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(a: f64, b: f64) -> TimeSpan {
        TimeSpan::new(a, b).unwrap()
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(caption_similarity(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(caption_similarity(&[1, 2], &[3, 4]), 0.0);
        assert!((caption_similarity(&[1, 2, 3], &[1, 2, 4]) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(caption_similarity(&[], &[1]), 0.0);
        // Clipping: repeated tokens count at most as often as on the other side.
        assert!((caption_similarity(&[1], &[1, 1]) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn prf_examples() {
        let exact = localization_prf(&[(vec![s(0.1, 0.3), s(0.5, 0.9)], vec![s(0.1, 0.3), s(0.5, 0.9)])], &DENSE_THRESHOLDS);
        assert_eq!((exact.recall, exact.precision, exact.f1), (100.0, 100.0, 100.0));
        let disjoint = localization_prf(&[(vec![s(0.0, 0.1)], vec![s(0.5, 0.9)])], &DENSE_THRESHOLDS);
        assert_eq!((disjoint.recall, disjoint.precision, disjoint.f1), (0.0, 0.0, 0.0));
        let half = localization_prf(&[(vec![s(0.2, 0.6), s(0.7, 0.9)], vec![s(0.2, 0.6)])], &DENSE_THRESHOLDS);
        assert_eq!((half.recall, half.precision), (100.0, 50.0));
        assert!((half.f1 - 200.0 / 3.0).abs() < 1e-9);
        let skip = localization_prf(&[(vec![s(0.0, 1.0)], vec![])], &DENSE_THRESHOLDS);
        assert_eq!(skip.excluded, 1);
    }

    #[test]
    fn retrieval_examples() {
        let r = moment_retrieval(&[(s(0.0, 0.4), s(0.0, 1.0))]);
        assert_eq!(r.recall_at.iter().map(|x| x.1).collect::<Vec<_>>(), vec![100.0, 0.0, 0.0]);
        assert!((r.miou - 0.4).abs() < 1e-12);
        let r = moment_retrieval(&[(s(0.0, 0.6), s(0.0, 1.0)), (s(0.0, 0.2), s(0.0, 1.0))]);
        assert_eq!(r.recall_at.iter().map(|x| x.1).collect::<Vec<_>>(), vec![50.0, 50.0, 0.0]);
        assert!((r.miou - 0.4).abs() < 1e-12);
    }

    #[test]
    fn dense_examples() {
        let g = vec![(s(0.0, 0.4), vec![5, 6]), (s(0.5, 0.9), vec![7, 8])];
        let perfect = dense_caption_score(&[(g.clone(), g.clone())], &DENSE_THRESHOLDS);
        assert_eq!(perfect.score, 100.0);
        let wrong_words: Vec<CaptionedSpan> = g.iter().map(|(sp, _)| (*sp, vec![9])).collect();
        assert_eq!(dense_caption_score(&[(wrong_words, g.clone())], &DENSE_THRESHOLDS).score, 0.0);
        // One prediction, matching one of the two events with similarity 0.5.
        let one = vec![(s(0.0, 0.4), vec![5, 9])];
        let sc = dense_caption_score(&[(one, g)], &DENSE_THRESHOLDS).score;
        assert!((sc - 50.0).abs() < 1e-12);
    }

    #[test]
    fn soda_examples() {
        let g = vec![(s(0.0, 0.4), vec![5, 6]), (s(0.5, 0.9), vec![7, 8])];
        assert!((soda_like(&g, &g) - 1.0).abs() < 1e-12);
        let crossed = vec![(s(0.0, 0.4), vec![7, 8]), (s(0.5, 0.9), vec![5, 6])];
        assert!(soda_like(&crossed, &g) < soda_like(&g, &g));
    }
}
