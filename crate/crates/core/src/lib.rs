//! Core algorithms for robust clothes-changing person re-identification on
//! low-quality imagery: a small reverse-mode tensor engine, synthetic
//! degradations, pose clustering, training objectives, the two-branch model,
//! a procedural person renderer, the alternating trainer, and retrieval
//! metrics.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the CLI
//! and anything touching the filesystem live in the `rlq` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod degrade;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod math;
pub mod model;
pub mod optim;
pub mod pose;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use tensor::{Graph, Tensor, TensorError, Var};
