//! Desk-scale differentiable architecture search for uncalibrated
//! photometric stereo on synthetic Lambertian scenes.
//!
//! The crate provides:
//! - a minimal reverse-mode tensor engine ([`tensor`]),
//! - the cell search space, continuous relaxation and genotypes ([`search`]),
//! - the alternating bi-level optimizer ([`bilevel`]),
//! - synthetic scene generation, rendering and the classical least-squares
//!   solver ([`scene`]),
//! - the light-calibration and normal-estimation networks ([`models`]),
//! - evaluation metrics ([`metrics`]) and binary checkpoints ([`checkpoint`]).

pub mod error;
pub mod rng;
pub mod tensor;
pub mod nn;
pub mod search;
pub mod bilevel;
pub mod scene;
// pub mod models;
pub mod metrics;
pub mod checkpoint;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
