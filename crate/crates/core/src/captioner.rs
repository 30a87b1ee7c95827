//! Anchor-conditioned toy caption decoder.
//!
//! A sequence is the projected video frames followed by one block per event:
//! `<sep> <slot> <s> w₁ … wₖ`. The `<slot>` row carries the time embedding of
//! the event's anchor and attends only to video rows; every other row is
//! causal. Its final hidden state feeds the regression head that produces the
//! denoised anchor Ỹ.
//!
//! Parameter prefixes: `time.` (time embedding and regression head), `cap.`
//! (decoder). Training updates `loc.` weights too; see [`train_stage_b`].

use std::ops::Range;

use ndiff::nn::{Attention, FeedForward, LayerNorm, Linear};
use ndiff::tape::{log_softmax_at, softmax_into};
use ndiff::{AdamW, AttnMask, ParamGrads, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{Dataset, TokenId, VideoSample, Vocab};
use crate::localizer::{anchors_from_tensor, clip, gt_anchors, Localizer};
use crate::optim::OptimConfig;
use crate::posenc::{position_encoding, AnchorEncoding, TimeEncoding};
use crate::setpred::{aligned_loss, anchor_loss, pair_loss_grad, LossWeights};
use crate::temporal::{temporal_iou, TemporalAnchor};

pub const TIME_PREFIX: &str = "time.";
pub const DECODER_PREFIX: &str = "cap.";
const META_MAX_LEN: &str = "cap.meta.max_caption_len";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionerConfig {
    pub model_dim: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    /// Width of the time-embedding MLP bottleneck.
    pub time_hidden: usize,
    pub max_caption_len: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            model_dim: 32,
            num_layers: 2,
            ffn_dim: 64,
            time_hidden: 16,
            max_caption_len: 12,
        }
    }
}

impl CaptionerConfig {
    fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.model_dim % 4 != 0 {
            return Err(Error::Config("captioner model_dim must be a positive multiple of 4".into()));
        }
        if self.num_layers == 0 || self.time_hidden == 0 || self.ffn_dim == 0 || self.max_caption_len == 0 {
            return Err(Error::Config("captioner sizes must be positive".into()));
        }
        Ok(())
    }
}

/// θ_T: sinusoidal anchor encoding, a down/up MLP, and the regression head
/// that reuses the MLP followed by a 2-output linear layer.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    enc: AnchorEncoding,
    down: Linear,
    up: Linear,
    reg: Linear,
}

impl TimeEmbedding {
    fn new<R: Rng>(store: &mut ParamStore, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            enc: AnchorEncoding::new(dim),
            down: Linear::new(store, "time.down", dim, hidden, true, rng),
            up: Linear::new(store, "time.up", hidden, dim, true, rng),
            reg: Linear::zeros(store, "time.reg", dim, 2),
        }
    }

    fn mlp(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.down.forward(tape, store, x)?;
        let h = tape.relu(h);
        Ok(self.up.forward(tape, store, h)?)
    }

    fn mlp_raw(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut h = self.down.apply(store, x, 1);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        self.up.apply(store, &h, 1)
    }

    /// `[n×2]` anchors → `[n×d]` embeddings.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, anchors: Var) -> Result<Var> {
        let e = self.enc.forward(tape, anchors)?;
        self.mlp(tape, store, e)
    }

    pub fn embed_anchor(&self, store: &ParamStore, a: TemporalAnchor) -> Vec<f64> {
        self.mlp_raw(store, &self.enc.encode(a.center(), a.duration()))
    }

    /// `[n×d]` hidden states → `[n×2]` sigmoid anchors.
    pub fn regress(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
        let h = self.mlp(tape, store, hidden)?;
        let out = self.reg.forward(tape, store, h)?;
        Ok(tape.sigmoid(out))
    }

    pub fn regress_anchor(&self, store: &ParamStore, hidden: &[f64]) -> TemporalAnchor {
        let h = self.mlp_raw(store, hidden);
        let out = self.reg.apply(store, &h, 1);
        let s = |v: f64| ndiff::nn::sigmoid_scalar(v);
        TemporalAnchor::new(s(out[0]), s(out[1])).expect("sigmoid output is a valid anchor")
    }
}

#[derive(Clone, Debug)]
struct Layer {
    attn: Attention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

/// One event block of a training or scoring sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqItem {
    /// Row of the anchor matrix used for the `<slot>` embedding.
    pub anchor_row: usize,
    /// Caption words; empty means the block should produce `</s>` immediately.
    pub caption: Vec<TokenId>,
    /// Earlier items this block may attend to.
    pub history: Vec<usize>,
}

/// Token rows, positions and attention mask for a video plus event blocks.
#[derive(Clone, Debug)]
pub struct BuiltSequence {
    pub num_video: usize,
    /// Token id per text row; `<slot>` rows carry [`Vocab::SLOT`].
    pub ids: Vec<TokenId>,
    /// Text position of each text row (drives the position encoding).
    pub positions: Vec<usize>,
    /// Absolute row of each item's `<slot>`.
    pub slot_rows: Vec<usize>,
    /// Absolute row range of each item.
    pub item_rows: Vec<Range<usize>>,
    pub mask: AttnMask,
    /// `(absolute row, next token)` caption targets.
    pub targets: Vec<(usize, TokenId)>,
    /// Which item each target belongs to.
    pub target_items: Vec<usize>,
}

impl BuiltSequence {
    pub fn num_rows(&self) -> usize {
        self.num_video + self.ids.len()
    }
}

fn check_caption(caption: &[TokenId]) -> Result<()> {
    match caption.iter().find(|&&t| Vocab::is_reserved(t)) {
        Some(&t) => Err(Error::ReservedToken(t)),
        None => Ok(()),
    }
}

/// Lays out `items` after `num_video` video rows.
pub fn build_items(num_video: usize, items: &[SeqItem]) -> Result<BuiltSequence> {
    if items.is_empty() {
        return Err(Error::Empty("event list"));
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut slot_rows = Vec::new();
    let mut item_rows: Vec<Range<usize>> = Vec::new();
    let mut targets = Vec::new();
    let mut target_items = Vec::new();
    for (i, item) in items.iter().enumerate() {
        check_caption(&item.caption)?;
        if let Some(&h) = item.history.iter().find(|&&h| h >= i) {
            return Err(Error::Config(format!("item {i} has non-causal history entry {h}")));
        }
        let base: usize = item.history.iter().map(|&h| item_rows[h].len()).sum();
        let start = num_video + ids.len();
        let mut toks = vec![Vocab::SEP, Vocab::SLOT, Vocab::BOS];
        toks.extend_from_slice(&item.caption);
        for (k, &t) in toks.iter().enumerate() {
            ids.push(t);
            positions.push(base + k);
        }
        slot_rows.push(start + 1);
        // `<s>` predicts w₁, each wⱼ predicts wⱼ₊₁, the last word predicts `</s>`.
        let next = item.caption.iter().copied().chain(std::iter::once(Vocab::EOS));
        for (k, t) in next.enumerate() {
            targets.push((start + 2 + k, t));
            target_items.push(i);
        }
        item_rows.push(start..start + toks.len());
    }
    let rows = num_video + ids.len();
    let mut mask = AttnMask::new(rows, rows, vec![false; rows * rows]);
    for r in 0..num_video {
        for c in 0..=r {
            mask.set(r, c, true);
        }
    }
    for (i, item) in items.iter().enumerate() {
        let range = item_rows[i].clone();
        for r in range.clone() {
            for c in 0..num_video {
                mask.set(r, c, true);
            }
            if r == slot_rows[i] {
                continue;
            }
            for &h in &item.history {
                for c in item_rows[h].clone() {
                    mask.set(r, c, true);
                }
            }
            for c in range.start..=r {
                mask.set(r, c, true);
            }
        }
    }
    Ok(BuiltSequence {
        num_video,
        ids,
        positions,
        slot_rows,
        item_rows,
        mask,
        targets,
        target_items,
    })
}

/// A chronological chain: event `i` conditions on all events before it and
/// uses anchor row `i`.
pub fn build_sequence(num_video: usize, captions: &[Vec<TokenId>]) -> Result<BuiltSequence> {
    let items: Vec<SeqItem> = captions
        .iter()
        .enumerate()
        .map(|(i, c)| SeqItem {
            anchor_row: i,
            caption: c.clone(),
            history: (0..i).collect(),
        })
        .collect();
    build_items(num_video, &items)
}

/// Tape outputs of one teacher-forced pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[text rows × |V|]`; row `k` is absolute row `num_video + k`.
    pub logits: Var,
    /// `[items × 2]` denoised anchors Ỹ.
    pub regressed: Var,
}

/// Model structure; weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Captioner {
    pub config: CaptionerConfig,
    pub vocab_size: usize,
    pub feature_dim: usize,
    tok_emb: ParamId,
    video_in: Linear,
    layers: Vec<Layer>,
    out: Linear,
    pub time: TimeEmbedding,
    frame_enc: TimeEncoding,
}

impl Captioner {
    pub fn new(
        config: CaptionerConfig,
        vocab_size: usize,
        feature_dim: usize,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let tok_emb = store.add("cap.tok_emb", Tensor::randn(vocab_size, d, 0.5, &mut rng));
        let video_in = Linear::new(store, "cap.video_in", feature_dim, d, true, &mut rng);
        let layers = (0..config.num_layers)
            .map(|l| Layer {
                attn: Attention::new(store, &format!("cap.layer{l}.attn"), d, &mut rng),
                ln1: LayerNorm::new(store, &format!("cap.layer{l}.ln1"), d),
                ffn: FeedForward::new(store, &format!("cap.layer{l}.ffn"), d, config.ffn_dim, &mut rng),
                ln2: LayerNorm::new(store, &format!("cap.layer{l}.ln2"), d),
            })
            .collect();
        let out = Linear::new(store, "cap.out", d, vocab_size, true, &mut rng);
        let time = TimeEmbedding::new(store, d, config.time_hidden, &mut rng);
        store.add(META_MAX_LEN, Tensor::scalar(config.max_caption_len as f64));
        Ok(Self {
            config,
            vocab_size,
            feature_dim,
            tok_emb,
            video_in,
            layers,
            out,
            time,
            frame_enc: TimeEncoding::new(d),
        })
    }

    /// Infers the configuration from parameter shapes in a loaded checkpoint
    /// and copies the `time.`/`cap.` weights into `store`.
    pub fn from_checkpoint(loaded: &ParamStore, store: &mut ParamStore) -> Result<Self> {
        let get = |n: &str| {
            loaded
                .by_name(n)
                .map_err(|_| Error::MissingCheckpoint(format!("captioner parameter `{n}`")))
        };
        let emb = get("cap.tok_emb")?;
        let (vocab_size, d) = (emb.rows(), emb.cols());
        let config = CaptionerConfig {
            model_dim: d,
            num_layers: (0..).take_while(|l| loaded.id(&format!("cap.layer{l}.ln1.gain")).is_ok()).count(),
            ffn_dim: get("cap.layer0.ffn.1.w")?.cols(),
            time_hidden: get("time.down.w")?.cols(),
            max_caption_len: get(META_MAX_LEN)?.item() as usize,
        };
        let feature_dim = get("cap.video_in.w")?.rows();
        let net = Self::new(config, vocab_size, feature_dim, store, 0)?;
        store.fill_from(loaded, |n| Self::is_time_param(n) || Self::is_decoder_param(n))?;
        Ok(net)
    }

    pub fn is_time_param(name: &str) -> bool {
        name.starts_with(TIME_PREFIX)
    }

    pub fn is_decoder_param(name: &str) -> bool {
        name.starts_with(DECODER_PREFIX)
    }

    pub fn logit_projection(&self) -> ParamId {
        self.out.w
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        if features.cols() != self.feature_dim {
            return Err(Error::FeatureDim {
                expected: self.feature_dim,
                got: features.cols(),
            });
        }
        if features.rows() == 0 {
            return Err(Error::Empty("feature sequence"));
        }
        Ok(())
    }

    fn check_token(&self, t: TokenId) -> Result<()> {
        if t >= self.vocab_size {
            return Err(Error::UnknownToken(format!("id {t}")));
        }
        Ok(())
    }

    /// Teacher-forced pass. `anchors` is an `[n×2]` matrix (a localizer output
    /// or a constant); item `i` reads row `items[i].anchor_row`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: &Tensor,
        anchors: Var,
        items: &[SeqItem],
        seq: &BuiltSequence,
    ) -> Result<ForwardVars> {
        self.check_features(features)?;
        for &t in &seq.ids {
            self.check_token(t)?;
        }
        let d = self.config.model_dim;
        let (tv, nt, ni) = (seq.num_video, seq.ids.len(), items.len());

        let x = tape.constant(features.clone());
        let video = self.video_in.forward(tape, store, x)?;
        let fe = tape.constant(self.frame_enc.frames(tv));
        let video = tape.add(video, fe)?;

        let table = tape.param(store, self.tok_emb);
        let tok = tape.embed_lookup(table, &seq.ids)?;
        // Zero the `<slot>` rows, then scatter the anchor embeddings into them.
        let mut keep = vec![1.0; nt * d];
        let mut scatter = vec![0.0; nt * ni];
        for (i, &r) in seq.slot_rows.iter().enumerate() {
            let k = r - tv;
            keep[k * d..(k + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            scatter[k * ni + i] = 1.0;
        }
        let keep = tape.constant(Tensor::from_vec(keep, nt, d));
        let tok = tape.mul(tok, keep)?;
        let rows: Vec<usize> = items.iter().map(|it| it.anchor_row).collect();
        let picked = tape.gather_rows(anchors, &rows)?;
        let emb = self.time.embed(tape, store, picked)?;
        let scatter = tape.constant(Tensor::from_vec(scatter, nt, ni));
        let slots = tape.matmul(scatter, emb)?;
        let text = tape.add(tok, slots)?;
        let pe: Vec<f64> = seq.positions.iter().flat_map(|&p| position_encoding(p, d)).collect();
        let pe = tape.constant(Tensor::from_vec(pe, nt, d));
        let text = tape.add(text, pe)?;

        let mut h = tape.concat_rows(&[video, text])?;
        for layer in &self.layers {
            h = layer.attn.cross_attention(tape, store, h, h, Some(&seq.mask))?;
            h = layer.ln1.forward(tape, store, h)?;
            h = layer.ffn.forward(tape, store, h)?;
            h = layer.ln2.forward(tape, store, h)?;
        }
        let text_rows: Vec<usize> = (tv..tv + nt).collect();
        let ht = tape.gather_rows(h, &text_rows)?;
        let logits = self.out.forward(tape, store, ht)?;
        let slot_h = tape.gather_rows(h, &seq.slot_rows)?;
        let regressed = self.time.regress(tape, store, slot_h)?;
        Ok(ForwardVars { logits, regressed })
    }

    /// Mean caption cross-entropy over caption-target rows.
    pub fn caption_ce(&self, tape: &mut Tape, seq: &BuiltSequence, fv: ForwardVars) -> Result<Var> {
        let targets: Vec<(usize, usize)> = seq.targets.iter().map(|&(r, t)| (r - seq.num_video, t)).collect();
        Ok(tape.cross_entropy(fv.logits, &targets)?)
    }

    /// Sum of teacher-forced log-probabilities of `caption` (and its `</s>`)
    /// for an event after a chronological `history`.
    pub fn teacher_forced_logprob(
        &self,
        store: &ParamStore,
        features: &Tensor,
        history: &[(TemporalAnchor, Vec<TokenId>)],
        anchor: TemporalAnchor,
        caption: &[TokenId],
    ) -> Result<f64> {
        let mut captions: Vec<Vec<TokenId>> = history.iter().map(|h| h.1.clone()).collect();
        captions.push(caption.to_vec());
        let seq = build_sequence(features.rows(), &captions)?;
        let items: Vec<SeqItem> = (0..captions.len())
            .map(|i| SeqItem {
                anchor_row: i,
                caption: captions[i].clone(),
                history: (0..i).collect(),
            })
            .collect();
        let mut tape = Tape::new();
        let mut a: Vec<f64> = history.iter().flat_map(|h| [h.0.center(), h.0.duration()]).collect();
        a.extend([anchor.center(), anchor.duration()]);
        let av = tape.constant(Tensor::from_vec(a, captions.len(), 2));
        let fv = self.forward(&mut tape, store, features, av, &items, &seq)?;
        let logits = tape.value(fv.logits);
        let last = captions.len() - 1;
        Ok(seq
            .targets
            .iter()
            .zip(&seq.target_items)
            .filter(|(_, &i)| i == last)
            .map(|(&(r, t), _)| log_softmax_at(logits.row(r - seq.num_video), t))
            .sum())
    }

    // ---- incremental inference ----

    fn push_row(&self, store: &ParamStore, state: &mut DecodeState, input: Vec<f64>, slot: bool) -> Vec<f64> {
        let d = self.config.model_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let visible = if slot { state.num_video } else { state.rows + 1 };
        let mut x = input;
        let mut logits = vec![0.0; visible];
        let mut probs = vec![0.0; visible];
        for (layer, cache) in self.layers.iter().zip(state.layers.iter_mut()) {
            let q = layer.attn.wq.apply(store, &x, 1);
            cache.k.extend(layer.attn.wk.apply(store, &x, 1));
            cache.v.extend(layer.attn.wv.apply(store, &x, 1));
            for (j, l) in logits.iter_mut().enumerate() {
                let k = &cache.k[j * d..(j + 1) * d];
                *l = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_into(&logits, &mut probs, |_| true);
            let mut ctx = vec![0.0; d];
            for (j, &p) in probs.iter().enumerate() {
                let v = &cache.v[j * d..(j + 1) * d];
                ctx.iter_mut().zip(v).for_each(|(c, vv)| *c += p * vv);
            }
            let o = layer.attn.wo.apply(store, &ctx, 1);
            let a: Vec<f64> = x.iter().zip(&o).map(|(p, q)| p + q).collect();
            let y = layer.ln1.apply(store, &a);
            let z = layer.ffn.apply(store, &y, 1);
            x = layer.ln2.apply(store, &z);
        }
        state.rows += 1;
        x
    }

    fn token_input(&self, store: &ParamStore, t: TokenId, pos: usize) -> Vec<f64> {
        let d = self.config.model_dim;
        let emb = store.get(self.tok_emb).row(t);
        emb.iter().zip(position_encoding(pos, d)).map(|(a, b)| a + b).collect()
    }

    /// Encodes the video rows once; the result is shared by every candidate.
    pub fn encode_video(&self, store: &ParamStore, features: &Tensor) -> Result<DecodeState> {
        self.check_features(features)?;
        let t = features.rows();
        let proj = self.video_in.apply(store, features.data(), t);
        let fe = self.frame_enc.frames(t);
        let d = self.config.model_dim;
        let mut state = DecodeState {
            layers: vec![LayerCache::default(); self.layers.len()],
            rows: 0,
            num_video: t,
            text_len: 0,
        };
        for r in 0..t {
            let x: Vec<f64> = proj[r * d..(r + 1) * d].iter().zip(fe.row(r)).map(|(a, b)| a + b).collect();
            self.push_row(store, &mut state, x, false);
        }
        Ok(state)
    }

    fn logits_of(&self, store: &ParamStore, hidden: &[f64]) -> Vec<f64> {
        self.out.apply(store, hidden, 1)
    }

    /// Appends `<sep> <slot> <s>` for `anchor`; returns the `<slot>` and `<s>`
    /// hidden states.
    fn open_event(&self, store: &ParamStore, state: &mut DecodeState, anchor: TemporalAnchor) -> (Vec<f64>, Vec<f64>) {
        let d = self.config.model_dim;
        let p = state.text_len;
        self.push_row(store, state, self.token_input(store, Vocab::SEP, p), false);
        let slot_in: Vec<f64> = self
            .time
            .embed_anchor(store, anchor)
            .into_iter()
            .zip(position_encoding(p + 1, d))
            .map(|(a, b)| a + b)
            .collect();
        let slot_h = self.push_row(store, state, slot_in, true);
        let bos_h = self.push_row(store, state, self.token_input(store, Vocab::BOS, p + 2), false);
        state.text_len += 3;
        (slot_h, bos_h)
    }

    /// Commits an event to `state` so later events condition on it.
    pub fn push_event(&self, store: &ParamStore, state: &mut DecodeState, anchor: TemporalAnchor, caption: &[TokenId]) -> Result<()> {
        check_caption(caption)?;
        self.open_event(store, state, anchor);
        for &t in caption {
            self.check_token(t)?;
            let p = state.text_len;
            self.push_row(store, state, self.token_input(store, t, p), false);
            state.text_len += 1;
        }
        Ok(())
    }

    /// Greedy caption for `anchor` after the events already in `state`.
    pub fn generate_caption(&self, store: &ParamStore, state: &DecodeState, anchor: TemporalAnchor) -> Generated {
        self.generate_with(store, state, anchor, None)
    }

    /// Like [`generate_caption`](Self::generate_caption); with `sampler`
    /// `(rng, temperature)` tokens are drawn from the tempered softmax.
    pub fn generate_with(
        &self,
        store: &ParamStore,
        state: &DecodeState,
        anchor: TemporalAnchor,
        sampler: Option<(&mut dyn rand::RngCore, f64)>,
    ) -> Generated {
        self.generate_branch(store, state, anchor, sampler).0
    }

    /// Generates a caption and also returns the prefix extended by the new
    /// event, ready to condition later events.
    pub fn generate_branch(
        &self,
        store: &ParamStore,
        state: &DecodeState,
        anchor: TemporalAnchor,
        mut sampler: Option<(&mut dyn rand::RngCore, f64)>,
    ) -> (Generated, DecodeState) {
        let mut st = state.clone();
        let (slot_h, mut h) = self.open_event(store, &mut st, anchor);
        let regressed = self.time.regress_anchor(store, &slot_h);
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        // Only words and `</s>` may be emitted.
        let allowed = |t: usize| t == Vocab::EOS || !Vocab::is_reserved(t);
        let truncated = loop {
            let logits = self.logits_of(store, &h);
            let t = match sampler.as_mut() {
                Some((rng, temp)) => sample_token(&logits, *temp, allowed, &mut **rng),
                None => argmax_token(&logits, allowed),
            };
            logprobs.push(log_softmax_at(&logits, t));
            if t == Vocab::EOS {
                break false;
            }
            tokens.push(t);
            let p = st.text_len;
            h = self.push_row(store, &mut st, self.token_input(store, t, p), false);
            st.text_len += 1;
            if tokens.len() >= self.config.max_caption_len {
                break true;
            }
        };
        let g = Generated {
            tokens,
            logprobs,
            truncated,
            regressed,
        };
        (g, st)
    }
}

fn argmax_token(logits: &[f64], allowed: impl Fn(usize) -> bool) -> usize {
    let mut best = Vocab::EOS;
    for (t, &l) in logits.iter().enumerate() {
        if allowed(t) && l > logits[best] {
            best = t;
        }
    }
    best
}

fn sample_token(logits: &[f64], temperature: f64, allowed: impl Fn(usize) -> bool, rng: &mut dyn rand::RngCore) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature.max(1e-6)).collect();
    let mut p = vec![0.0; scaled.len()];
    softmax_into(&scaled, &mut p, &allowed);
    let mut u: f64 = rng.gen();
    for (t, &pt) in p.iter().enumerate() {
        if u < pt {
            return t;
        }
        u -= pt;
    }
    argmax_token(logits, allowed)
}

#[derive(Clone, Debug, Default)]
struct LayerCache {
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Key/value cache of an encoded prefix (video plus committed events).
#[derive(Clone, Debug)]
pub struct DecodeState {
    layers: Vec<LayerCache>,
    rows: usize,
    num_video: usize,
    text_len: usize,
}

impl DecodeState {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Caption words without `</s>`.
    pub tokens: Vec<TokenId>,
    /// Log-probability of each emitted token, including the final `</s>`
    /// unless truncated.
    pub logprobs: Vec<f64>,
    /// Hit the length limit before `</s>`.
    pub truncated: bool,
    /// Ỹ read at the `<slot>` position.
    pub regressed: TemporalAnchor,
}

// ---- stage B ----

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageBConfig {
    pub optim: OptimConfig,
    pub epochs: usize,
    pub weights: LossWeights,
    /// Also train on unmatched localizer anchors whose target is an empty
    /// caption, so the decoder learns to decline anchors without an event.
    pub negatives: bool,
    /// An unmatched anchor is a negative only if its IoU with every matched
    /// anchor is below this (near-duplicates are left unsupervised).
    pub negative_max_iou: f64,
    /// Learning-rate multiplier for the localizer weights.
    pub localizer_lr_scale: f64,
}

impl Default for StageBConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig {
                lr: 3e-3,
                batch_size: 8,
                schedule: crate::optim::Schedule::Cosine { min_factor: 0.05 },
                ..OptimConfig::default()
            },
            epochs: 40,
            weights: LossWeights::default(),
            negatives: true,
            negative_max_iou: 0.75,
            localizer_lr_scale: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBEpoch {
    pub epoch: usize,
    pub caption_loss: f64,
    pub denoise_loss: f64,
}

/// Gradients of one sample's two passes.
#[derive(Clone, Debug)]
pub struct DualGrads {
    pub caption_loss: f64,
    pub denoise_loss: f64,
    /// ∂L_caption for every parameter.
    pub caption: ParamGrads,
    /// ∂L_denoise restricted to `loc.` and `time.` parameters.
    pub denoise: ParamGrads,
}

/// Items for one training video: the ground-truth chain on Hungarian-matched
/// anchors, then optional negatives on unmatched anchors.
pub fn training_items(
    preds: &[TemporalAnchor],
    sample: &VideoSample,
    cfg: &StageBConfig,
) -> Result<(Vec<SeqItem>, usize)> {
    let gts = gt_anchors(sample);
    let (_, asg) = anchor_loss(preds, &gts, cfg.weights)?;
    let mut items: Vec<SeqItem> = sample
        .events
        .iter()
        .enumerate()
        .map(|(j, e)| SeqItem {
            anchor_row: asg.pred_for(j).expect("every ground truth is matched"),
            caption: e.caption.clone(),
            history: (0..j).collect(),
        })
        .collect();
    let num_gt = items.len();
    if cfg.negatives {
        for (p, a) in preds.iter().enumerate() {
            if asg.is_matched(p) {
                continue;
            }
            let near = items[..num_gt]
                .iter()
                .any(|it| temporal_iou(preds[it.anchor_row].span(), a.span()) >= cfg.negative_max_iou);
            if near {
                continue;
            }
            // History: matched events whose anchors start no later than this one,
            // mirroring the chronological order in which decoding commits them.
            let history = (0..num_gt)
                .filter(|&j| preds[items[j].anchor_row].span().start() <= a.span().start())
                .collect();
            items.push(SeqItem {
                anchor_row: p,
                caption: Vec::new(),
                history,
            });
        }
    }
    Ok((items, num_gt))
}

/// One forward pass, two backward passes.
pub fn dual_grads(
    loc: &Localizer,
    cap: &Captioner,
    store: &ParamStore,
    sample: &VideoSample,
    cfg: &StageBConfig,
) -> Result<DualGrads> {
    let mut tape = Tape::new();
    let anchors = loc.forward(&mut tape, store, &sample.features)?;
    let preds = anchors_from_tensor(tape.value(anchors))?;
    let (items, num_gt) = training_items(&preds, sample, cfg)?;
    let seq = build_items(sample.num_frames(), &items)?;
    let fv = cap.forward(&mut tape, store, &sample.features, anchors, &items, &seq)?;
    let ce = cap.caption_ce(&mut tape, &seq, fv)?;
    let caption_loss = tape.value(ce).item();
    let caption = tape.backward(ce)?.into_params();

    let regressed = anchors_from_tensor(tape.value(fv.regressed))?;
    let gts = gt_anchors(sample);
    let denoise_loss = aligned_loss(&regressed[..num_gt], &gts, cfg.weights)?;
    let mut seed = vec![0.0; items.len() * 2];
    for j in 0..num_gt {
        let g = pair_loss_grad(regressed[j], gts[j], cfg.weights);
        seed[2 * j..2 * j + 2].copy_from_slice(&g);
    }
    let mut denoise = tape
        .backward_seeded(fv.regressed, &Tensor::from_vec(seed, items.len(), 2))?
        .into_params();
    denoise.retain(|id| {
        let n = store.name(id);
        Localizer::is_param(n) || Captioner::is_time_param(n)
    });
    Ok(DualGrads {
        caption_loss,
        denoise_loss,
        caption,
        denoise,
    })
}

#[derive(Clone, Debug)]
pub struct TrainedCaptioner {
    pub localizer: Localizer,
    pub captioner: Captioner,
    /// `loc.`, `time.` and `cap.` weights.
    pub params: ParamStore,
    pub trace: Vec<StageBEpoch>,
}

/// Separate AdamW states for the caption pass and the denoising pass, each
/// split into `loc.` weights (scaled learning rate) and the rest.
pub struct StageBOptimizers {
    caption: [AdamW; 2],
    denoise: [AdamW; 2],
    localizer_lr_scale: f64,
}

impl StageBOptimizers {
    pub fn new(opt: &OptimConfig, localizer_lr_scale: f64) -> Self {
        let mk = || AdamW::new(opt.adamw());
        Self {
            caption: [mk(), mk()],
            denoise: [mk(), mk()],
            localizer_lr_scale,
        }
    }

    /// Applies the caption update then the denoising update.
    pub fn step(&mut self, params: &mut ParamStore, caption: &ParamGrads, denoise: &ParamGrads, lr: f64) -> Result<()> {
        let scale = self.localizer_lr_scale;
        for (opts, grads) in [(&mut self.caption, caption), (&mut self.denoise, denoise)] {
            for (k, opt) in opts.iter_mut().enumerate() {
                let is_loc = k == 0;
                let group_lr = if is_loc { lr * scale } else { lr };
                if group_lr == 0.0 {
                    continue;
                }
                let mut g = grads.clone();
                g.retain(|id| Localizer::is_param(params.name(id)) == is_loc);
                if g.global_norm() > 0.0 {
                    opt.step_with_lr(params, &g, group_lr)?;
                }
            }
        }
        Ok(())
    }
}

/// Stage B: starts from a trained localizer (`loc_params`) and trains the
/// captioner, time embedding and localizer with the dual-pass scheme.
pub fn train_stage_b(
    dataset: &Dataset,
    localizer: &Localizer,
    loc_params: &ParamStore,
    config: CaptionerConfig,
    stage: &StageBConfig,
    seed: u64,
) -> Result<TrainedCaptioner> {
    if dataset.videos.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if loc_params.is_empty() {
        return Err(Error::MissingCheckpoint("stage-A localizer weights".into()));
    }
    crate::localizer::check_event_counts(dataset, localizer.config.num_queries)?;
    let mut params = ParamStore::new();
    let loc = Localizer::new(localizer.config, &mut params, 0)?;
    params.load_from(loc_params)?;
    let cap = Captioner::new(config, dataset.vocab.len(), dataset.feature_dim, &mut params, seed)?;
    let mut opts = StageBOptimizers::new(&stage.optim, stage.localizer_lr_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xCAB);
    let mut order: Vec<usize> = (0..dataset.videos.len()).collect();
    let mut trace = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        order.shuffle(&mut rng);
        let lr = stage.optim.lr_at(epoch, stage.epochs);
        let (mut ce_sum, mut dn_sum) = (0.0, 0.0);
        for batch in order.chunks(stage.optim.batch_size.max(1)) {
            let mut g1 = ParamGrads::new();
            let mut g2 = ParamGrads::new();
            for &i in batch {
                let g = dual_grads(&loc, &cap, &params, &dataset.videos[i], stage)?;
                ce_sum += g.caption_loss;
                dn_sum += g.denoise_loss;
                g1.merge(&g.caption);
                g2.merge(&g.denoise);
            }
            let k = 1.0 / batch.len() as f64;
            g1.scale(k);
            g2.scale(k);
            clip(&mut g1, stage.optim.clip_norm);
            clip(&mut g2, stage.optim.clip_norm);
            opts.step(&mut params, &g1, &g2, lr)?;
        }
        let n = dataset.videos.len() as f64;
        trace.push(StageBEpoch {
            epoch,
            caption_loss: ce_sum / n,
            denoise_loss: dn_sum / n,
        });
    }
    Ok(TrainedCaptioner {
        localizer: loc,
        captioner: cap,
        params,
        trace,
    })
}
