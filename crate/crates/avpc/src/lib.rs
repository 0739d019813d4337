//! Visually guided sound source separation with a predictive-coding
//! separation network, trained by mixing known sources and supervising
//! mask recovery, with an optional co-prediction pretraining stage.
//!
//! The numeric core is generic over the scalar type (f32 or f64); the
//! CLI and the shipped tools run at [`Real`] precision.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod model;
pub mod pcnet;
pub mod plot;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod vision;
pub mod wav;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar precision used by the CLI and tools.
pub type Real = f64;
