//! Layers built from tape ops. Each layer only holds [`ParamId`]s; weights live
//! in the [`ParamStore`] passed to `forward`.

use rand::Rng;

use crate::tape::{log_softmax_at, sigmoid, softmax_into};
use crate::tensor::matmul_raw;
use crate::{AttnMask, ParamId, ParamStore, Result, Tape, Tensor, Var};

/// `y = x·W + b` with `W: [d_in×d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(d_in, d_out, std, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(1, d_out)));
        Self { w, b, d_in, d_out }
    }

    /// Zero-initialized weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(d_in, d_out));
        let b = Some(store.add(format!("{name}.b"), Tensor::zeros(1, d_out)));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Tape-free forward on `rows` row-major inputs.
    pub fn apply(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = matmul_raw(x, store.get(self.w).data(), rows, self.d_in, self.d_out);
        if let Some(b) = self.b {
            let b = store.get(b).data();
            for row in y.chunks_mut(self.d_out) {
                row.iter_mut().zip(b).for_each(|(o, v)| *o += v);
            }
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::from_vec(vec![1.0; dim], 1, dim));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, dim));
        Self { gain, bias, dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let (g, b) = (store.get(self.gain).data(), store.get(self.bias).data());
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(self.dim) {
            let n = self.dim as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + 1e-5).sqrt();
            out.extend(row.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * is * g + b));
        }
        out
    }
}

/// Single-head scaled dot-product attention with output projection and a
/// residual connection on the query stream.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng),
            wk: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            wv: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng),
            wo: Linear::new(store, &format!("{name}.o"), dim, dim, false, rng),
            dim,
        }
    }

    /// `q + softmax(q·Wq (kv·Wk)ᵀ / √d) · kv·Wv · Wo`
    pub fn cross_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: Var,
        kv: Var,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let qp = self.wq.forward(tape, store, q)?;
        let kp = self.wk.forward(tape, store, kv)?;
        let vp = self.wv.forward(tape, store, kv)?;
        let logits = tape.matmul_nt(qp, kp)?;
        let logits = tape.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let attn = tape.softmax_rows(logits, mask)?;
        let ctx = tape.matmul(attn, vp)?;
        let out = self.wo.forward(tape, store, ctx)?;
        tape.add(q, out)
    }
}

/// Two-layer ReLU MLP with residual: `x + W2·relu(W1·x)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.1"), dim, hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h);
        let y = self.l2.forward(tape, store, h)?;
        tape.add(x, y)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        let mut h = self.l1.apply(store, x, rows);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let y = self.l2.apply(store, &h, rows);
        x.iter().zip(y).map(|(a, b)| a + b).collect()
    }
}

/// Elementwise logistic function on a plain value.
pub fn sigmoid_scalar(v: f64) -> f64 {
    sigmoid(v)
}

/// Softmax over a plain slice.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_into(row, &mut out, |_| true);
    out
}

/// `log softmax(row)` over a plain slice.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    (0..row.len()).map(|j| log_softmax_at(row, j)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_key_attention_ignores_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, "a", 4, &mut rng);
        let q_val = Tensor::randn(3, 4, 1.0, &mut rng);
        let kv_val = Tensor::randn(1, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let q = tape.constant(q_val.clone());
        let kv = tape.constant(kv_val.clone());
        let out = att.cross_attention(&mut tape, &store, q, kv, None).unwrap();
        let v = att.wv.apply(&store, kv_val.data(), 1);
        let projected = att.wo.apply(&store, &v, 1);
        for r in 0..3 {
            for c in 0..4 {
                let expected = q_val.get(r, c) + projected[c];
                assert!((tape.value(out).get(r, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_value_weights_give_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, "a", 4, &mut rng);
        *store.get_mut(att.wv.w) = Tensor::zeros(4, 4);
        let q_val = Tensor::randn(2, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let q = tape.constant(q_val.clone());
        let kv = tape.constant(Tensor::randn(5, 4, 1.0, &mut rng));
        let out = att.cross_attention(&mut tape, &store, q, kv, None).unwrap();
        assert_eq!(tape.value(out), &q_val);
    }

    #[test]
    fn raw_apply_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let ff = FeedForward::new(&mut store, "ff", 4, 8, &mut rng);
        let ln = LayerNorm::new(&mut store, "ln", 4);
        let x = Tensor::randn(3, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = ff.forward(&mut tape, &store, xv).unwrap();
        let y = ln.forward(&mut tape, &store, y).unwrap();
        let raw = ln.apply(&store, &ff.apply(&store, x.data(), 3));
        for (a, b) in tape.value(y).data().iter().zip(&raw) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
