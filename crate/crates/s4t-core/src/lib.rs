//! Source-free selective self-training for semantic segmentation.
//!
//! Everything algorithmic lives here: a small tape-based reverse-mode
//! autodiff engine, a batch-norm segmenter, the two-view crop/resize
//! pipeline, reliability selection, selective label interpolation, the
//! selective self-training losses, a seeded synthetic domain-shift
//! benchmark, evaluation metrics, and the adaptation loop itself.
//!
//! The crate is `no_std` + `alloc` compatible (disable default features);
//! the `std` feature is on by default. All computation is single-threaded
//! and deterministic: fixed seeds produce bitwise-identical tensors,
//! checkpoints, and logs.

#![cfg_attr(not(feature = "std"), no_std)]
// Numeric kernels index several parallel buffers by one loop variable;
// iterator rewrites would obscure the stride arithmetic they mirror.
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod adapt;
pub mod config;
pub mod formats;
pub mod losses;
pub mod mathf;
pub mod metrics;
pub mod model;
pub mod pseudolabel;
pub mod reliability;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod views;
