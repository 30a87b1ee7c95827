//! Sinusoidal encodings for normalized times, anchors and integer positions.

use std::f64::consts::{FRAC_PI_2, PI};

use ndiff::{Tape, Tensor, Var};

/// Geometric frequency ladder over normalized time in `[0, 1]`.
///
/// The fastest component has period 1/4 of the video, the slowest a period
/// of 4 videos (monotone over `[0, 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEncoding {
    freqs: Vec<f64>,
}

impl TimeEncoding {
    /// `dim` output features (must be even): `dim / 2` sin/cos pairs.
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 2 && dim % 2 == 0, "time encoding needs an even dim, got {dim}");
        let k = dim / 2;
        let (hi, lo) = (8.0 * PI, PI / 2.0);
        let freqs = (0..k)
            .map(|i| {
                let t = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
                hi * (lo / hi).powf(t)
            })
            .collect();
        Self { freqs }
    }

    pub fn dim(&self) -> usize {
        self.freqs.len() * 2
    }

    /// `[sin(ω₀x), cos(ω₀x), sin(ω₁x), ...]`
    pub fn encode(&self, x: f64) -> Vec<f64> {
        self.freqs
            .iter()
            .flat_map(|w| [(w * x).sin(), (w * x).cos()])
            .collect()
    }

    /// Encodings of the frame centers `(i + 0.5) / T` as a `[T×dim]` tensor.
    pub fn frames(&self, num_frames: usize) -> Tensor {
        let data = (0..num_frames)
            .flat_map(|i| self.encode((i as f64 + 0.5) / num_frames as f64))
            .collect();
        Tensor::from_vec(data, num_frames, self.dim())
    }
}

/// Differentiable encoding of `(center, duration)` rows: the first half of the
/// output encodes the center, the second half the duration.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorEncoding {
    half: TimeEncoding,
    proj: Tensor,
    phase: Tensor,
}

impl AnchorEncoding {
    /// `dim` must be a multiple of 4.
    pub fn new(dim: usize) -> Self {
        assert!(dim % 4 == 0 && dim > 0, "anchor encoding needs dim % 4 == 0, got {dim}");
        let half = TimeEncoding::new(dim / 2);
        // sin(x·ω + φ) with φ ∈ {0, π/2} reproduces the sin/cos pairs.
        let mut proj = Tensor::zeros(2, dim);
        let mut phase = Tensor::zeros(1, dim);
        for (k, w) in half.freqs.iter().enumerate() {
            for (coord, offset) in [(0usize, 0usize), (1, dim / 2)] {
                let j = offset + 2 * k;
                proj.data_mut()[coord * dim + j] = *w;
                proj.data_mut()[coord * dim + j + 1] = *w;
                phase.data_mut()[j + 1] = FRAC_PI_2;
            }
        }
        Self { half, proj, phase }
    }

    pub fn dim(&self) -> usize {
        self.phase.cols()
    }

    /// `anchors: [n×2]` → `[n×dim]`, differentiable in the anchors.
    pub fn forward(&self, tape: &mut Tape, anchors: Var) -> ndiff::Result<Var> {
        let proj = tape.constant(self.proj.clone());
        let phase = tape.constant(self.phase.clone());
        let x = tape.matmul(anchors, proj)?;
        let x = tape.add_row(x, phase)?;
        Ok(tape.sin(x))
    }

    pub fn encode(&self, center: f64, duration: f64) -> Vec<f64> {
        let mut out = self.half.encode(center);
        out.extend(self.half.encode(duration));
        out
    }
}

/// Standard transformer position encoding for integer positions.
pub fn position_encoding(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let k = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}
