//! Query-based event localizer.
//!
//! `M` learnable queries attend to the projected video features through `L`
//! cross-attention blocks; a two-layer head maps every query to a sigmoid
//! `(center, duration)` anchor. Parameter names start with `loc.`.

use ndiff::nn::{Attention, FeedForward, LayerNorm, Linear};
use ndiff::{AdamW, ParamGrads, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Dataset, VideoSample};
use crate::optim::OptimConfig;
use crate::posenc::TimeEncoding;
use crate::setpred::{anchor_loss, anchor_loss_grad, LossWeights};
use crate::temporal::TemporalAnchor;

pub const PARAM_PREFIX: &str = "loc.";
const META_PE: &str = "loc.meta.positional_encoding";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizerConfig {
    pub num_queries: usize,
    pub num_layers: usize,
    pub model_dim: usize,
    pub feature_dim: usize,
    pub ffn_dim: usize,
    /// Add sinusoidal frame-time encodings to the key/value features.
    pub positional_encoding: bool,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            num_queries: 8,
            num_layers: 2,
            model_dim: 32,
            feature_dim: 16,
            ffn_dim: 64,
            positional_encoding: true,
        }
    }
}

impl LocalizerConfig {
    /// 10 queries, 3 layers, width 512.
    pub fn activitynet(feature_dim: usize) -> Self {
        Self {
            num_queries: 10,
            num_layers: 3,
            model_dim: 512,
            feature_dim,
            ffn_dim: 2048,
            positional_encoding: true,
        }
    }

    /// 50 queries, 2 layers, width 512.
    pub fn youcook2(feature_dim: usize) -> Self {
        Self {
            num_queries: 50,
            num_layers: 2,
            ..Self::activitynet(feature_dim)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_queries == 0 || self.num_layers == 0 || self.model_dim == 0 || self.feature_dim == 0 {
            return Err(Error::Config("localizer sizes must be positive".into()));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config("localizer model_dim must be even".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn: Attention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

/// Structure of θ_E; the weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Localizer {
    pub config: LocalizerConfig,
    input: Linear,
    queries: ParamId,
    blocks: Vec<Block>,
    head_hidden: Linear,
    head_out: Linear,
    frame_enc: TimeEncoding,
}

impl Localizer {
    /// Registers freshly initialized parameters in `store`. The output layer of
    /// the head starts at zero, so every initial anchor is `(0.5, 0.5)`.
    pub fn new(config: LocalizerConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let p = |s: &str| format!("{PARAM_PREFIX}{s}");
        let input = Linear::new(store, &p("input"), config.feature_dim, d, true, &mut rng);
        let queries = store.add(p("queries"), Tensor::randn(config.num_queries, d, 1.0, &mut rng));
        let blocks = (0..config.num_layers)
            .map(|l| Block {
                attn: Attention::new(store, &p(&format!("block{l}.attn")), d, &mut rng),
                ln1: LayerNorm::new(store, &p(&format!("block{l}.ln1")), d),
                ffn: FeedForward::new(store, &p(&format!("block{l}.ffn")), d, config.ffn_dim, &mut rng),
                ln2: LayerNorm::new(store, &p(&format!("block{l}.ln2")), d),
            })
            .collect();
        let head_hidden = Linear::new(store, &p("head.hidden"), d, d, true, &mut rng);
        let head_out = Linear::zeros(store, &p("head.out"), d, 2);
        store.add(META_PE, Tensor::scalar(config.positional_encoding as u8 as f64));
        Ok(Self {
            config,
            input,
            queries,
            blocks,
            head_hidden,
            head_out,
            frame_enc: TimeEncoding::new(d),
        })
    }

    /// Infers the configuration from parameter shapes in a loaded checkpoint
    /// and copies the `loc.` weights into `store`.
    pub fn from_checkpoint(loaded: &ParamStore, store: &mut ParamStore) -> Result<Self> {
        let get = |n: &str| {
            loaded
                .by_name(n)
                .map_err(|_| Error::MissingCheckpoint(format!("localizer parameter `{n}`")))
        };
        let queries = get("loc.queries")?;
        let config = LocalizerConfig {
            num_queries: queries.rows(),
            model_dim: queries.cols(),
            num_layers: (0..).take_while(|l| loaded.id(&format!("loc.block{l}.ln1.gain")).is_ok()).count(),
            feature_dim: get("loc.input.w")?.rows(),
            ffn_dim: get("loc.block0.ffn.1.w")?.cols(),
            positional_encoding: get(META_PE)?.item() != 0.0,
        };
        let net = Self::new(config, store, 0)?;
        store.fill_from(loaded, Self::is_param)?;
        Ok(net)
    }

    pub fn is_param(name: &str) -> bool {
        name.starts_with(PARAM_PREFIX)
    }

    pub fn queries(&self) -> ParamId {
        self.queries
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        if features.cols() != self.config.feature_dim {
            return Err(Error::FeatureDim {
                expected: self.config.feature_dim,
                got: features.cols(),
            });
        }
        if features.rows() == 0 {
            return Err(Error::Empty("feature sequence"));
        }
        Ok(())
    }

    /// Records the forward pass; returns the `[M×2]` sigmoid anchor matrix.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: &Tensor) -> Result<Var> {
        self.check_features(features)?;
        let x = tape.constant(features.clone());
        let mut kv = self.input.forward(tape, store, x)?;
        if self.config.positional_encoding {
            let pe = tape.constant(self.frame_enc.frames(features.rows()));
            kv = tape.add(kv, pe)?;
        }
        let mut q = tape.param(store, self.queries);
        for b in &self.blocks {
            q = b.attn.cross_attention(tape, store, q, kv, None)?;
            q = b.ln1.forward(tape, store, q)?;
            q = b.ffn.forward(tape, store, q)?;
            q = b.ln2.forward(tape, store, q)?;
        }
        let h = self.head_hidden.forward(tape, store, q)?;
        let h = tape.relu(h);
        let out = self.head_out.forward(tape, store, h)?;
        Ok(tape.sigmoid(out))
    }

    /// The `M` anchors for one video.
    pub fn localize(&self, store: &ParamStore, features: &Tensor) -> Result<Vec<TemporalAnchor>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, features)?;
        anchors_from_tensor(tape.value(out))
    }
}

pub fn anchors_from_tensor(t: &Tensor) -> Result<Vec<TemporalAnchor>> {
    (0..t.rows())
        .map(|r| TemporalAnchor::new(t.get(r, 0), t.get(r, 1)))
        .collect()
}

pub fn gt_anchors(sample: &VideoSample) -> Vec<TemporalAnchor> {
    sample.events.iter().map(|e| e.span.anchor()).collect()
}

/// Checks every sample has `1 ≤ N < M` events.
pub fn check_event_counts(dataset: &Dataset, num_queries: usize) -> Result<()> {
    for v in &dataset.videos {
        if v.events.is_empty() {
            return Err(Error::Config(format!("sample `{}` has no events", v.id)));
        }
        if v.events.len() >= num_queries {
            return Err(Error::TooManyEvents {
                id: v.id.clone(),
                events: v.events.len(),
                queries: num_queries,
            });
        }
    }
    Ok(())
}

/// Anchor loss for one sample and its parameter gradients.
pub fn sample_loss_and_grads(
    net: &Localizer,
    store: &ParamStore,
    sample: &VideoSample,
    w: LossWeights,
) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, store, &sample.features)?;
    let preds = anchors_from_tensor(tape.value(out))?;
    let gts = gt_anchors(sample);
    let (loss, assignment) = anchor_loss(&preds, &gts, w)?;
    let g = anchor_loss_grad(&preds, &gts, w, &assignment);
    let seed = Tensor::from_vec(g.into_iter().flatten().collect(), preds.len(), 2);
    let grads = tape.backward_seeded(out, &seed)?;
    Ok((loss, grads.into_params()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedLocalizer {
    pub net: Localizer,
    pub params: ParamStore,
    pub trace: Vec<EpochLoss>,
}

/// Mean anchor loss over a dataset.
pub fn mean_anchor_loss(net: &Localizer, store: &ParamStore, dataset: &Dataset, w: LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for v in &dataset.videos {
        let preds = net.localize(store, &v.features)?;
        total += anchor_loss(&preds, &gt_anchors(v), w)?.0;
    }
    Ok(total / dataset.videos.len().max(1) as f64)
}

pub(crate) fn clip(grads: &mut ParamGrads, max_norm: f64) {
    if max_norm > 0.0 {
        let n = grads.global_norm();
        if n > max_norm {
            grads.scale(max_norm / n);
        }
    }
}

/// Trains θ_E on the anchor loss with mini-batch AdamW.
pub fn train_localizer(
    dataset: &Dataset,
    config: LocalizerConfig,
    w: LossWeights,
    opt: &OptimConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainedLocalizer> {
    if dataset.videos.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    check_event_counts(dataset, config.num_queries)?;
    let mut params = ParamStore::new();
    let net = Localizer::new(config, &mut params, seed)?;
    let mut optimizer = AdamW::new(opt.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..dataset.videos.len()).collect();
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let lr = opt.lr_at(epoch, epochs);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opt.batch_size.max(1)) {
            let mut acc = ParamGrads::new();
            for &i in batch {
                let (loss, g) = sample_loss_and_grads(&net, &params, &dataset.videos[i], w)?;
                epoch_loss += loss;
                acc.merge(&g);
            }
            acc.scale(1.0 / batch.len() as f64);
            clip(&mut acc, opt.clip_norm);
            // A batch with an identically zero gradient carries no signal; skipping
            // it keeps weight decay from drifting parameters when the loss is flat.
            if acc.global_norm() > 0.0 {
                optimizer.step_with_lr(&mut params, &acc, lr)?;
            }
        }
        trace.push(EpochLoss {
            epoch,
            mean_loss: epoch_loss / dataset.videos.len() as f64,
        });
    }
    Ok(TrainedLocalizer { net, params, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndiff::gradcheck::{central_difference, rel_error};

    fn tiny_config() -> LocalizerConfig {
        LocalizerConfig {
            num_queries: 3,
            num_layers: 1,
            model_dim: 8,
            feature_dim: 5,
            ffn_dim: 8,
            positional_encoding: true,
        }
    }

    #[test]
    fn fresh_head_gives_centered_anchors() {
        let mut store = ParamStore::new();
        let net = Localizer::new(LocalizerConfig::default(), &mut store, 1).unwrap();
        for t in [1, 7, 64] {
            let feats = Tensor::randn(t, 16, 1.0, &mut ChaCha8Rng::seed_from_u64(t as u64));
            let anchors = net.localize(&store, &feats).unwrap();
            assert_eq!(anchors.len(), 8);
            assert!(anchors.iter().all(|a| a.center() == 0.5 && a.duration() == 0.5));
        }
    }

    #[test]
    fn feature_dim_mismatch_errors() {
        let mut store = ParamStore::new();
        let net = Localizer::new(LocalizerConfig::default(), &mut store, 1).unwrap();
        let feats = Tensor::zeros(4, 3);
        assert!(matches!(net.localize(&store, &feats), Err(Error::FeatureDim { .. })));
    }

    /// End-to-end anchor-loss gradient w.r.t. the query embeddings, matching
    /// held fixed (T=4, d=8, M=3).
    #[test]
    fn query_gradient_matches_finite_differences() {
        use crate::harness::Event;
        use crate::temporal::TimeSpan;
        for seed in 0..5u64 {
            let mut store = ParamStore::new();
            let cfg = tiny_config();
            let net = Localizer::new(cfg, &mut store, seed).unwrap();
            // Give the head non-zero output weights so anchors move off 0.5.
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            *store.get_mut(net.head_out.w) = Tensor::randn(8, 2, 0.5, &mut rng);
            let sample = VideoSample {
                id: "s".into(),
                features: Tensor::randn(4, 5, 1.0, &mut rng),
                events: vec![
                    Event { span: TimeSpan::new(0.1, 0.35).unwrap(), caption: vec![] },
                    Event { span: TimeSpan::new(0.55, 0.9).unwrap(), caption: vec![] },
                ],
            };
            let w = LossWeights::default();
            let (_, grads) = sample_loss_and_grads(&net, &store, &sample, w).unwrap();
            let analytic = grads.get(net.queries).unwrap().to_vec();

            let mut tape = Tape::new();
            let out = net.forward(&mut tape, &store, &sample.features).unwrap();
            let preds = anchors_from_tensor(tape.value(out)).unwrap();
            let (_, assignment) = anchor_loss(&preds, &gt_anchors(&sample), w).unwrap();
            let fixed_loss = |s: &ParamStore| {
                let preds = net.localize(s, &sample.features).unwrap();
                let gts = gt_anchors(&sample);
                assignment
                    .pairs()
                    .iter()
                    .map(|&(p, g)| crate::setpred::pair_loss(preds[p], gts[g], w))
                    .sum::<f64>()
            };
            let base = store.get(net.queries).clone();
            let numeric = central_difference(
                |x| {
                    let mut s = store.clone();
                    *s.get_mut(net.queries) = Tensor::new(base.shape().to_vec(), x.to_vec()).unwrap();
                    fixed_loss(&s)
                },
                base.data(),
                1e-6,
            );
            let err = rel_error(&analytic, &numeric);
            assert!(err <= 1e-3, "seed {seed}: {err:e}");
        }
    }
}
