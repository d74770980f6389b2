//! Point tracking on the attention features of a toy video diffusion
//! transformer.
//!
//! The pipeline: a synthetic clip generator with exact ground-truth tracks
//! and occlusion flags ([`datagen`]), a small video DiT pretrained with flow
//! matching whose query/key features drive correspondence ([`dit`]), a
//! convolutional side backbone ([`convnet`]), softmax matching costs and
//! their fusion ([`matching`]), an iterative transformer refiner
//! ([`refiner`]), supervised training with LoRA adaptation ([`training`]),
//! and a TAP-style evaluation kit with corruption and stratification
//! support ([`evalkit`]).
//!
//! Everything runs on CPU, seeded and single-threaded: identical inputs and
//! seeds produce byte-identical artifacts.

pub mod autograd;
pub mod checkpoint;
pub mod convnet;
pub mod datagen;
pub mod dit;
pub mod error;
pub mod evalkit;
pub mod matching;
pub mod numerics;
pub mod refiner;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
pub use numerics::{Grid2D, Point2D};
