//! Joint sequence-structure diffusion for protein binder design.
//!
//! Residue types follow a uniform categorical diffusion and Cα coordinates a
//! Gaussian one; a single equivariant denoiser predicts both clean signals.
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`).

pub mod alphabet;
pub mod autodiff;
pub mod checkpoint;
pub mod continuous;
pub mod curation;
pub mod denoiser;
pub mod discrete;
pub mod error;
pub mod knn;
pub mod linalg;
pub mod metrics;
pub mod record;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod selfcheck;
pub mod schedules;
pub mod spatial;
pub mod training;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use scalar::Scalar;

pub type Denoiser32 = denoiser::Denoiser<f32>;
pub type Denoiser64 = denoiser::Denoiser<f64>;
pub type Schedule32 = schedules::NoiseSchedule<f32>;
pub type Schedule64 = schedules::NoiseSchedule<f64>;
