//! Desk-scale controllable diffusion lab.
//!
//! Trains a miniature class-conditional diffusion model with a zero-convolution
//! control branch, timestep-conditioned readout probes over decoder features,
//! and a fine-tuning stage combining diffusion, cycle-consistency reward, and
//! whole-trajectory feature-alignment losses. Everything runs on CPU over a
//! procedurally generated shapes dataset.
//!
//! The numeric core is generic over the scalar type ([`scalar::Scalar`],
//! implemented for `f32`/`f64`): training binaries run at `f32`, while
//! verification code instantiates the identical routines at `f64`.

pub mod ckpt;
pub mod config;
pub mod controls;
pub mod data;
pub mod error;
pub mod eval;
pub mod fidelity;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod opt;
pub mod plot;
pub mod probe;
pub mod rng;
pub mod schedule;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Scalar type used by the CLI training pipelines.
pub type TrainScalar = f32;
/// Scalar type used by verification paths (gradient checks, metric oracles).
pub type CheckScalar = f64;
