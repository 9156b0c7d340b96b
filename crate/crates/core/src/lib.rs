//! k-nearest-neighbour attention for vision transformers.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: row-major `f64` matrices, masked softmax, a seeded
//!   counter-based RNG and central finite differences.
//! * [`attention`]: dense attention, the fast (mask-then-softmax) and slow
//!   (per-query gather) k-NN kernels, temperature scaling, analytic
//!   backward passes and the weighted patch covariance that governs the
//!   gradient scale.
//! * [`diagnostics`]: token cosine similarity, attention spread, residual
//!   branch ratios and attention nonlocality computed from forward traces.
//! * [`lemmas`]: Monte-Carlo experiments on a clustered patch model.
//! * [`vit`]: a small pre-norm vision transformer with manual backprop,
//!   Adam, a synthetic noisy-patch task and a binary checkpoint format.
//! * [`verify`]: the invariant suite behind `knn-attn verify`.
//!
//! Trial-level and sample-level loops run through [`Exec`], which uses rayon
//! when the `parallel` feature is on and falls back to a plain loop
//! otherwise. Both paths produce identical results.

pub mod attention;
pub mod diagnostics;
mod error;
mod exec;
pub mod lemmas;
pub mod numerics;
pub mod verify;
pub mod vit;

pub use error::{Error, Result};
pub use exec::Exec;
pub use numerics::{Matrix, RngStream, MASK_SENTINEL};
