//! Dense row-major `f64` tensors with a tape-based reverse-mode autodiff.
//!
//! Everything is two-dimensional (`[rows, cols]`); a scalar is `[1, 1]`.
//! Models keep their weights in a [`ParamStore`], record a forward pass on a
//! [`Tape`], and call [`Tape::backward`] to get per-parameter gradients that
//! an [`AdamW`] optimizer consumes.
//!
//! ```
//! use ndiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.0], 1, 3));
//! let sq = tape.mul(x, x).unwrap();
//! let half = tape.scale(sq, 0.5);
//! let loss = tape.sum(half);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), &[1.0, -2.0, 3.0]);
//! ```

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use optim::{adamw_step, AdamState, AdamW, AdamWConfig};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{AttnMask, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NdiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("index {index} out of range for {op} with {len} rows")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NdiffError>;
