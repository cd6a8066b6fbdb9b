//! Continuous orientation distribution function (ODF) fields from diffusion MRI.
//!
//! A coordinate network (grid-hash encoder + small MLP head) produces a
//! spatial basis `ξ(v)`; a linear layer `W` maps it to real symmetric
//! spherical-harmonic ODF coefficients `c(v) = W ξ(v)`. The Gaussian
//! measurement model `y ~ N(Φ G c, σ_e² I)` links coefficients to the
//! observed signal and yields a closed-form Gaussian posterior over `W`.

pub mod bench;
pub mod data;
pub mod encoding;
pub mod error;
pub mod field_model;
pub mod metrics;
pub mod posterior;
pub mod sh_basis;
pub mod sphere;
pub mod training;

pub use error::{Error, Result};
