//! Event Coherent Sampling and the baseline decoders it is compared with.
//!
//! Anchors are sorted by start and grouped into clusters. Clusters are visited
//! in order; every anchor of a cluster gets a caption conditioned on the events
//! committed so far, candidates are scored with `S = S_cs + α·S_as`, and the
//! best one is committed.

use ndiff::{ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::{Captioner, DecodeState};
use crate::error::{Error, Result};
use crate::harness::{Dataset, TokenId};
use crate::temporal::{temporal_iou, TemporalAnchor, TimeSpan};

/// What a committed empty caption (immediate `</s>`) means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyCaption {
    /// The cluster yields no event; decoding continues with the next cluster.
    Skip,
    /// Decoding ends.
    Stop,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EcsConfig {
    pub alpha: f64,
    pub cluster_iou_threshold: f64,
    /// Most candidates kept alive per cluster.
    pub batch_threshold: usize,
    /// Upper bound on committed events; `None` means the number of anchors.
    pub max_events: Option<usize>,
    pub empty_caption: EmptyCaption,
}

impl Default for EcsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            cluster_iou_threshold: 0.75,
            batch_threshold: 8,
            max_events: None,
            empty_caption: EmptyCaption::Skip,
        }
    }
}

impl EcsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        if !(self.cluster_iou_threshold > 0.0 && self.cluster_iou_threshold <= 1.0) {
            return Err(Error::Config("cluster_iou_threshold must be in (0, 1]".into()));
        }
        if self.batch_threshold == 0 || self.max_events == Some(0) {
            return Err(Error::Config("batch_threshold and max_events must be positive".into()));
        }
        Ok(())
    }
}

/// `exp` of the mean token log-probability.
pub fn score_cs(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::Empty("caption log-probabilities"));
    }
    Ok((logprobs.iter().sum::<f64>() / logprobs.len() as f64).exp())
}

/// Per-frame caption/frame agreement.
pub trait AlignmentScorer {
    fn frame_score(&self, frame: &[f64], caption: &[TokenId]) -> f64;
}

/// Mean [`AlignmentScorer::frame_score`] over the frames whose centers fall
/// inside `span`.
pub fn score_as(scorer: &dyn AlignmentScorer, features: &Tensor, span: TimeSpan, caption: &[TokenId]) -> Result<f64> {
    let frames = span.frame_indices(features.rows());
    if frames.is_empty() {
        return Err(Error::EmptySpan {
            start: span.start(),
            end: span.end(),
            frames: features.rows(),
        });
    }
    let total: f64 = frames.clone().map(|f| scorer.frame_score(features.row(f), caption)).sum();
    Ok(total / frames.len() as f64)
}

/// Cosine between a centered frame and the mean of the caption's token
/// vectors. A token's vector is the mean centered feature of the training
/// events whose caption contains it.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceScorer {
    pub frame_mean: Vec<f64>,
    /// One row per vocabulary entry; zero for tokens never seen.
    pub token_vectors: Vec<Vec<f64>>,
}

pub const SCORER_PREFIX: &str = "scorer.";

impl ReferenceScorer {
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        let f = dataset.feature_dim;
        let mut frame_mean = vec![0.0; f];
        let mut n = 0usize;
        for v in &dataset.videos {
            for r in 0..v.num_frames() {
                frame_mean.iter_mut().zip(v.features.row(r)).for_each(|(m, x)| *m += x);
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Empty("dataset frames"));
        }
        frame_mean.iter_mut().for_each(|m| *m /= n as f64);
        let vsize = dataset.vocab.len();
        let mut sums = vec![vec![0.0; f]; vsize];
        let mut counts = vec![0usize; vsize];
        for v in &dataset.videos {
            for e in &v.events {
                let frames = e.span.frame_indices(v.num_frames());
                if frames.is_empty() {
                    continue;
                }
                let mut mean = vec![0.0; f];
                for r in frames.clone() {
                    mean.iter_mut()
                        .zip(v.features.row(r).iter().zip(&frame_mean))
                        .for_each(|(m, (x, mu))| *m += x - mu);
                }
                mean.iter_mut().for_each(|m| *m /= frames.len() as f64);
                let mut seen = e.caption.clone();
                seen.sort_unstable();
                seen.dedup();
                for t in seen {
                    sums[t].iter_mut().zip(&mean).for_each(|(s, m)| *s += m);
                    counts[t] += 1;
                }
            }
        }
        let token_vectors = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| if c == 0 { s } else { s.into_iter().map(|x| x / c as f64).collect() })
            .collect();
        Ok(Self {
            frame_mean,
            token_vectors,
        })
    }

    pub fn save_into(&self, store: &mut ParamStore) {
        let f = self.frame_mean.len();
        store.add("scorer.frame_mean", Tensor::from_vec(self.frame_mean.clone(), 1, f));
        let data = self.token_vectors.iter().flatten().copied().collect();
        store.add("scorer.token_vectors", Tensor::from_vec(data, self.token_vectors.len(), f));
    }

    pub fn load_from(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| {
            store
                .by_name(n)
                .map_err(|_| Error::MissingCheckpoint(format!("scorer parameter `{n}`")))
        };
        let mean = get("scorer.frame_mean")?;
        let tv = get("scorer.token_vectors")?;
        Ok(Self {
            frame_mean: mean.data().to_vec(),
            token_vectors: (0..tv.rows()).map(|r| tv.row(r).to_vec()).collect(),
        })
    }

    fn bag(&self, caption: &[TokenId]) -> Vec<f64> {
        let mut b = vec![0.0; self.frame_mean.len()];
        for &t in caption {
            if let Some(v) = self.token_vectors.get(t) {
                b.iter_mut().zip(v).for_each(|(x, y)| *x += y);
            }
        }
        b
    }
}

impl AlignmentScorer for ReferenceScorer {
    fn frame_score(&self, frame: &[f64], caption: &[TokenId]) -> f64 {
        let bag = self.bag(caption);
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for ((x, mu), b) in frame.iter().zip(&self.frame_mean).zip(&bag) {
            let c = x - mu;
            dot += c * b;
            na += c * c;
            nb += b * b;
        }
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na.sqrt() * nb.sqrt())
        }
    }
}

/// Pseudo-random per-frame scores in `[-1, 1)`, fixed by `seed`; used as the
/// uninformative reference point and to probe scorer independence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomScorer {
    pub seed: u64,
}

impl AlignmentScorer for RandomScorer {
    fn frame_score(&self, frame: &[f64], caption: &[TokenId]) -> f64 {
        // FNV-1a over the frame bits and caption ids, then a splitmix finish.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
        let mut eat = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        frame.iter().for_each(|v| eat(v.to_bits()));
        caption.iter().for_each(|&t| eat(t as u64));
        let mut z = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }
}

/// Sorts anchors by span start (then end, then index) and groups them: an
/// anchor joins the current cluster iff its IoU with the cluster's first
/// member is at least `threshold`. Returns anchor indices per cluster.
pub fn cluster_anchors(anchors: &[TemporalAnchor], threshold: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (anchors[a].span(), anchors[b].span());
        sa.start().total_cmp(&sb.start()).then(sa.end().total_cmp(&sb.end())).then(a.cmp(&b))
    });
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match clusters.last_mut() {
            Some(c) if temporal_iou(anchors[c[0]].span(), anchors[i].span()) >= threshold => c.push(i),
            _ => clusters.push(vec![i]),
        }
    }
    clusters
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCandidate {
    pub anchor_index: usize,
    pub anchor: TemporalAnchor,
    pub caption: Vec<TokenId>,
    pub s_cs: f64,
    pub s_as: f64,
    pub s: f64,
    /// Indices (into the output) of the events committed before this one.
    pub history: Vec<usize>,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedEvent {
    pub span: TimeSpan,
    pub anchor_index: usize,
    pub caption: Vec<TokenId>,
    pub score: f64,
    pub s_cs: f64,
    pub s_as: f64,
}

impl From<&ScoredCandidate> for DecodedEvent {
    fn from(c: &ScoredCandidate) -> Self {
        Self {
            span: c.anchor.span(),
            anchor_index: c.anchor_index,
            caption: c.caption.clone(),
            score: c.s,
            s_cs: c.s_cs,
            s_as: c.s_as,
        }
    }
}

/// A frozen captioner with its weights.
#[derive(Clone, Copy)]
pub struct Model<'a> {
    pub captioner: &'a Captioner,
    pub params: &'a ParamStore,
}

fn score_candidate(
    scorer: &dyn AlignmentScorer,
    features: &Tensor,
    anchor: TemporalAnchor,
    caption: &[TokenId],
    logprobs: &[f64],
    alpha: f64,
) -> Result<(f64, f64, f64)> {
    let s_cs = score_cs(logprobs)?;
    let s_as = if caption.is_empty() {
        0.0
    } else {
        score_as(scorer, features, anchor.span(), caption)?
    };
    Ok((s_cs, s_as, s_cs + alpha * s_as))
}

/// Runs Event Coherent Sampling over the localizer's `anchors`. Output spans
/// are the anchors themselves.
pub fn ecs_decode(
    model: Model,
    features: &Tensor,
    anchors: &[TemporalAnchor],
    scorer: &dyn AlignmentScorer,
    cfg: &EcsConfig,
) -> Result<Vec<DecodedEvent>> {
    cfg.validate()?;
    if anchors.is_empty() {
        return Err(Error::Empty("anchor list"));
    }
    let max_events = cfg.max_events.unwrap_or(anchors.len());
    let Model { captioner, params } = model;
    let mut state = captioner.encode_video(params, features)?;
    let mut out: Vec<DecodedEvent> = Vec::new();
    for cluster in cluster_anchors(anchors, cfg.cluster_iou_threshold) {
        if out.len() >= max_events {
            break;
        }
        let mut live: Vec<(ScoredCandidate, DecodeState)> = Vec::with_capacity(cluster.len());
        for &i in &cluster {
            let a = anchors[i];
            if a.span().frame_indices(features.rows()).is_empty() {
                continue;
            }
            let (g, branch) = captioner.generate_branch(params, &state, a, None);
            let (s_cs, s_as, s) = score_candidate(scorer, features, a, &g.tokens, &g.logprobs, cfg.alpha)?;
            live.push((
                ScoredCandidate {
                    anchor_index: i,
                    anchor: a,
                    caption: g.tokens,
                    s_cs,
                    s_as,
                    s,
                    history: (0..out.len()).collect(),
                    truncated: g.truncated,
                },
                branch,
            ));
            if live.len() > cfg.batch_threshold {
                drop_lowest(&mut live);
            }
        }
        // Highest S wins; equal scores go to the lowest anchor index.
        let best = live.into_iter().reduce(|a, b| {
            let better = b.0.s > a.0.s || (b.0.s == a.0.s && b.0.anchor_index < a.0.anchor_index);
            if better {
                b
            } else {
                a
            }
        });
        let Some((cand, branch)) = best else { continue };
        if cand.caption.is_empty() {
            match cfg.empty_caption {
                EmptyCaption::Skip => continue,
                EmptyCaption::Stop => break,
            }
        }
        state = branch;
        out.push(DecodedEvent::from(&cand));
    }
    Ok(out)
}

fn drop_lowest(live: &mut Vec<(ScoredCandidate, DecodeState)>) {
    let worst = live
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            a.0.s
                .total_cmp(&b.0.s)
                .then(b.0.anchor_index.cmp(&a.0.anchor_index))
        })
        .map(|(k, _)| k)
        .expect("non-empty");
    live.remove(worst);
}

/// Captions the given anchors one after another in chronological order, each
/// conditioned on the previous ones. Empty captions are dropped as in ECS.
pub fn sequential_decode(
    model: Model,
    features: &Tensor,
    anchors: &[TemporalAnchor],
    chosen: &[usize],
    scorer: &dyn AlignmentScorer,
    alpha: f64,
) -> Result<Vec<DecodedEvent>> {
    let Model { captioner, params } = model;
    let mut order = chosen.to_vec();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (anchors[a].span(), anchors[b].span());
        sa.start().total_cmp(&sb.start()).then(sa.end().total_cmp(&sb.end())).then(a.cmp(&b))
    });
    let mut state = captioner.encode_video(params, features)?;
    let mut out = Vec::new();
    for i in order {
        let a = anchors[i];
        let (g, branch) = captioner.generate_branch(params, &state, a, None);
        if g.tokens.is_empty() {
            continue;
        }
        let s_cs = score_cs(&g.logprobs)?;
        let s_as = score_as(scorer, features, a.span(), &g.tokens).unwrap_or(0.0);
        state = branch;
        out.push(DecodedEvent {
            span: a.span(),
            anchor_index: i,
            caption: g.tokens,
            score: s_cs + alpha * s_as,
            s_cs,
            s_as,
        });
    }
    Ok(out)
}

/// The `k` earliest-starting anchors.
pub fn first_k_decode(
    model: Model,
    features: &Tensor,
    anchors: &[TemporalAnchor],
    k: usize,
    scorer: &dyn AlignmentScorer,
    alpha: f64,
) -> Result<Vec<DecodedEvent>> {
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| anchors[a].span().start().total_cmp(&anchors[b].span().start()).then(a.cmp(&b)));
    order.truncate(k);
    sequential_decode(model, features, anchors, &order, scorer, alpha)
}

/// `k` anchors drawn uniformly without replacement.
pub fn random_decode<R: Rng>(
    model: Model,
    features: &Tensor,
    anchors: &[TemporalAnchor],
    k: usize,
    scorer: &dyn AlignmentScorer,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<DecodedEvent>> {
    let idx: Vec<usize> = (0..anchors.len()).collect();
    let chosen: Vec<usize> = idx.choose_multiple(rng, k.min(anchors.len())).copied().collect();
    sequential_decode(model, features, anchors, &chosen, scorer, alpha)
}
