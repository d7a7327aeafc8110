//! Three-tier diffusion recommender for next point-of-interest prediction.
//!
//! The library trains a denoising-diffusion recommender in three stages of
//! decreasing scope and cost:
//!
//! 1. a **global** model over item categories (the expensive, shared stage),
//! 2. a **region** model per geographic cluster that reuses the frozen global
//!    weights and adds POI embeddings plus a spatiotemporal attention bias,
//! 3. a per-user **patch**: a small residual MLP trained on one device's
//!    history while the region weights stay frozen.
//!
//! Recommendation runs the reverse diffusion chain over a shortened step
//! subsequence, denoising a Gaussian draw into a pseudo target embedding and
//! ranking candidate POIs by inner product against it.
//!
//! Everything is deterministic given a seed: the RNG is a hand-rolled
//! counter generator, parallel region jobs derive independent seeds, and
//! checkpoints/reports are byte-stable across repeat runs.
//!
//! The `examples/` directory is the front door — one runnable program per
//! capability:
//!
//! - `build_schedule` — noise schedule construction and its shape
//! - `forward_reverse` — corrupt an embedding, then walk the reverse chain
//! - `accelerated_sampling` — full-length vs. skip-step inference
//! - `synth_dataset` — generate a planted-pattern check-in corpus
//! - `train_global` — stage 1 on category sequences
//! - `specialize_region` — stage 2 on one region's POI sequences
//! - `personalize_device` — stage 3 patch for a single user
//! - `checkpoint_roundtrip` — binary model serialization
//! - `full_pipeline` — all three tiers plus evaluation, end to end
//!
//! The `dcpr` binary wraps the same entry points as subcommands for
//! scripted use; see `cli`.

pub mod cli;
pub mod data;
pub mod denoisers;
pub mod diffusion;
pub mod evaluation;
pub mod numerics;
pub mod orchestration;

pub use numerics::{Matrix, Real, Rng, Tape};
