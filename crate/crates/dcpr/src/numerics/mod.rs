//! Numeric substrate: dense matrices, a deterministic RNG, and a
//! reverse-mode autodiff tape.
//!
//! Everything above this module (diffusion math, denoisers, training) is
//! built on these three pieces. The tape records matrix-level operations and
//! produces exact gradients for them; `gradcheck` holds the
//! finite-difference harness used to verify those gradients in tests.

mod gradcheck;
mod matrix;
mod rng;
mod tape;

pub use gradcheck::{central_difference, max_rel_error};
pub use matrix::{Matrix, Real};
pub use rng::{derive_seed, Rng};
pub use tape::{Gradients, NodeId, Tape, TapeError};
