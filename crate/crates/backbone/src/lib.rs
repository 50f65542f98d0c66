//! Reverse-mode autodiff over small f64 matrices, with the layers the
//! captioner is built from. One [`Graph`] is a single forward pass; parameters
//! live in a [`ParamStore`] and enter a graph through a [`Session`], which
//! keeps one leaf per name so every use shares its gradient.
//!
//! Everything is 64-bit and sequential: two runs over the same inputs produce
//! bitwise-identical values, gradients, and checkpoints.

pub mod graph;
pub mod gru;
pub mod nn;
pub mod ops;
pub mod store;
pub mod tensor;

pub use graph::{Grads, Graph, Session, Val};
pub use gru::GruCell;
pub use nn::{AffineNorm, AttnMask, EncoderStack, LN_EPS};
pub use ops::{concat_cols, concat_rows, linear};
pub use store::{Checkpoint, ParamStore, CHECKPOINT_VERSION};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("non-finite gradient produced by op {op}")]
    NonFiniteGrad { op: &'static str },
    #[error("checkpoint io at {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint encode: {0}")]
    CheckpointEncode(#[source] serde_json::Error),
    #[error("checkpoint decode: {0}")]
    CheckpointDecode(#[source] serde_json::Error),
    #[error("checkpoint version {found}, this build reads {expected}")]
    CheckpointVersion { found: u32, expected: u32 },
}

/// Central finite difference of `f` w.r.t. one stored parameter coordinate.
/// The oracle side of every gradient test; keep it dumb.
pub fn central_difference(
    store: &ParamStore,
    name: &str,
    idx: usize,
    h: f64,
    f: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let mut plus = store.clone();
    plus.get_mut(name).expect("central_difference: unknown param").data[idx] += h;
    let mut minus = store.clone();
    minus.get_mut(name).expect("central_difference: unknown param").data[idx] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// |analytic - numeric| / max(1, |numeric|).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}
