//! Deterministic simulator for online federated learning with partial model
//! sharing on streaming kernel-regression data.
//!
//! Clients learn a linear model in a random Fourier feature space with one
//! LMS step per streaming sample. Two protocols are provided:
//!
//! * **Online-Fed**: selected clients start from the full global model, take
//!   one step, and the server averages the full local models.
//! * **PSO-Fed**: only `M` of the `D` coordinates travel in each direction,
//!   selected through circularly shifted selection masks, and clients that
//!   are not selected keep learning locally.
//!
//! The [`analysis`] module holds the extended block-matrix view of the
//! protocol used for the first-order (mean) convergence condition, and
//! [`experiment`] runs the synthetic non-IID benchmark and writes learning
//! curves as CSV.

pub mod analysis;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod masks;
pub mod rff;
pub mod seeds;

pub use error::{Error, Result};
