//! Feature-level multimodal fusion with compact bilinear (tensor sketch)
//! operators, exact backward passes, and a small dense-network training and
//! evaluation stack for identification experiments.
//!
//! The crate is organized around the lifecycle of an experiment:
//!
//! - [`sketch`]: count sketch projection and the tensor-sketch kernel.
//! - [`fusion`]: concatenation, bilinear, tensor-sketch, and generalized
//!   compact bilinear fusion as differentiable layers.
//! - [`nn`]: modality-dedicated dense networks, joint representation layer,
//!   softmax classifier, and the two-step training schedule.
//! - [`data`]: synthetic multimodal pools, JSON-lines embedding ingestion,
//!   and random set composition.
//! - [`eval`]: rank-one accuracy, score-level fusion baselines, and the
//!   experiment grid runner.
//! - [`config`] / [`checkpoint`] / [`cli`]: experiment configuration, model
//!   persistence, and the command-line entry points.
//!
//! All randomness flows from explicit seeds (see [`rng`]); no entropy is
//! taken from time or the OS, so every run is reproducible bit for bit.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod nn;
pub mod rng;
pub mod sketch;

pub use error::{Error, Result};
