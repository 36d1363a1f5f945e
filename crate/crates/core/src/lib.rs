//! Failure-case generation for an intersection driving scenario.

pub mod cem;
pub mod config;
pub mod ddpm;
pub mod env;
pub mod error;
pub mod io;
pub mod mc;
pub mod plot;
pub mod metrics;
pub mod prior;
pub mod rng;
pub mod sampling;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
pub use failgen_neural::Scalar;

pub type DiffusionModel32 = ddpm::DiffusionModel<f32>;
pub type DiffusionModel64 = ddpm::DiffusionModel<f64>;
pub type EliteTrainer32<'a, E> = trainer::EliteTrainer<'a, f32, E>;
pub type EliteTrainer64<'a, E> = trainer::EliteTrainer<'a, f64, E>;
