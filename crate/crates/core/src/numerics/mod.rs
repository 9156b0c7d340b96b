//! Deterministic numerical substrate.

mod finite_diff;
mod matrix;
mod rng;
mod softmax;
mod stats;

pub use finite_diff::finite_diff_grad;
pub use matrix::{dot, Matrix};
pub use rng::RngStream;
pub use softmax::{softmax_in_place, softmax_rows, MASK_SENTINEL};
pub use stats::{max_abs, mean, population_std, relative_error};
