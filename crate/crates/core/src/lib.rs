//! A desk-scale laboratory for conditional score-based diffusion.
//!
//! Conditional scores `∇ ln p(x_t | y)` can be learned three ways: with the
//! condition kept clean (CDE), by diffusing `x` and `y` together and reading
//! off the x-block of the joint score (CDiffE), or by diffusing `y` at its
//! own slower speed (CMDE, optionally with a decaying speed schedule). This
//! crate implements all of them on small dense networks, together with
//! predictor-corrector samplers and closed-form Gaussian oracles to check
//! them against.

pub mod error;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod objectives;
pub mod oracles;
pub mod rng;
pub mod samplers;
pub mod schedules;
pub mod sde;
pub mod tasks;

pub use error::{Error, Result};
