//! Stain-adaptive self-supervised learning at desk scale.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that is pure
//! computation: a small reverse-mode autodiff engine, the encoders and heads,
//! both contrastive objectives, the stain discriminator and its alternating
//! trainer, the dual-encoder transfer scheme, evaluation metrics and a seeded
//! Beer-Lambert stain simulator. File formats, checkpoints and the CLI live in
//! the `sassl` companion crate.
#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod adversary;
pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod ssl;
pub mod synth;
pub mod tensor;
pub mod transfer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
