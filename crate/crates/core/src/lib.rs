//! Multi-stream guided vision transformer for face reenactment detection.
//!
//! Five transformer streams look at a whole face and its four quadrants. The
//! whole-face embedding is reshaped, tiled and added to every quadrant before
//! its stream runs. A frozen image-quality scorer conditions a large-margin
//! cosine loss on the whole-face embedding, and a graph-attention fusion head
//! combines the five stream predictions.
//!
//! This crate is `no_std` (with `alloc`). Everything here is pure computation:
//! file formats that touch the filesystem, the synthetic corpus, the trainer
//! and the command line live in the `ggvit` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod check;
pub mod error;
pub mod fusion;
pub mod ggt;
pub mod guidance;
pub mod init;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod preprocess;
pub mod quality;
pub mod real;
pub mod tensor;
pub mod vit;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamSet};
pub use real::Real;
pub use tensor::Tensor;
